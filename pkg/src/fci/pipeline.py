"""Model assembly: embeddings, a configurable preprocessing stack, the
router, and the council with its prediction head, wired for batched
training and evaluation.

Every condition shares the router/council/head construction and training
procedure; conditions differ only in which representations reach the
router. The query position is task supervision: the prediction head always
reads the query's post-council row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttnLayerParams, PosEmbedding, init_attn_params, init_pos_embedding,
    linear_attention_layer, transformer_layer,
)
from .council import CouncilParams, init_council_params, predict_value, sparse_attention_batch
from .errors import ConfigError
from .flow import FlowBlockParams, FlowConfig, bidirectional_flow, flow_block, init_flow_params
from .investigator import (
    RouterConfig, RouterParams, Selection, init_router_params, routing_loss_batch,
    routing_scores, select_topk,
)
from .tensor import (
    Tensor, add, cross_entropy_mean, embedding, gather_rows, matmul, no_grad,
    scale, transpose, tsum, _accum, _make,
)
from .attention import MASK_VALUE, _split_heads, _swap_last
from .data import SequenceBatch, TOKEN_HIGH, VALUE_VOCAB

PREPROCESSING_KINDS = ("raw", "transformer", "flow", "flow-bidir", "linear-attn")
ROUTER_KINDS = ("investigator", "segment-mean", "segment-max")


@dataclass
class ModelConfig:
    d_model: int = 128
    heads: int = 4
    max_len: int = 512
    preprocessing: str = "transformer"
    n_layers: int = 1
    router: str = "investigator"
    router_k: int = 8
    segment_width: int = 16
    d_state: int = 16
    conv_width: int = 4

    def __post_init__(self):
        if self.preprocessing not in PREPROCESSING_KINDS:
            raise ConfigError(f"unknown preprocessing '{self.preprocessing}'")
        if self.router not in ROUTER_KINDS:
            raise ConfigError(f"unknown router '{self.router}'")
        if self.preprocessing == "raw" and self.n_layers != 0:
            raise ConfigError("raw preprocessing has no layers")


def segment_pool(x: Tensor, width: int, method: str) -> Tensor:
    """Per-segment mean or elementwise max over the length axis.

    (..., L, d) -> (..., ceil(L/width), d). The last segment may be short.
    """
    if width < 1:
        raise ConfigError("segment width must be >= 1")
    if method not in ("mean", "max"):
        raise ConfigError(f"unknown summary method '{method}'")
    L = x.shape[-2]
    n_seg = -(-L // width)
    bounds = [(s * width, min((s + 1) * width, L)) for s in range(n_seg)]
    xd = x.data
    pieces = []
    arg = []
    for lo, hi in bounds:
        seg = xd[..., lo:hi, :]
        if method == "mean":
            pieces.append(seg.mean(axis=-2))
        else:
            idx = seg.argmax(axis=-2)
            pieces.append(np.take_along_axis(seg, idx[..., None, :], axis=-2)[..., 0, :])
            arg.append(idx)
    out = _make(np.stack(pieces, axis=-2), (x,), f"segpool_{method}")
    if out.requires_grad:
        def bwd(g):
            gx = np.zeros_like(xd)
            for s, (lo, hi) in enumerate(bounds):
                gs = g[..., s, :]
                if method == "mean":
                    gx[..., lo:hi, :] += gs[..., None, :] / (hi - lo)
                else:
                    # max routes gradient to the winning position only
                    np.put_along_axis(gx[..., lo:hi, :], arg[s][..., None, :],
                                      gs[..., None, :], axis=-2)
            _accum(x, gx)
        out._backward = bwd
    return out


@dataclass
class StepStats:
    loss_total: float
    loss_task: float
    loss_route: float


@dataclass
class EvalStats:
    routing_precision: float       # pre-expansion: gold in raw top-k
    routing_precision_expanded: float
    task_accuracy: float


class Pipeline:
    """One experimental condition's full model."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xF1])
        d, H = cfg.d_model, cfg.heads
        self.token_emb = Tensor(
            rng.normal(0.0, 0.02, (TOKEN_HIGH, d)).astype(np.float32), requires_grad=True)
        self.pos = init_pos_embedding(cfg.max_len, d, rng)
        self.layers: list = []
        if cfg.preprocessing == "transformer":
            self.layers = [init_attn_params(d, H, rng) for _ in range(cfg.n_layers)]
        elif cfg.preprocessing == "linear-attn":
            self.layers = [init_attn_params(d, H, rng) for _ in range(cfg.n_layers)]
        elif cfg.preprocessing in ("flow", "flow-bidir"):
            fc = FlowConfig(d_model=d, d_state=cfg.d_state, conv_width=cfg.conv_width,
                            n_layers=cfg.n_layers)
            per_block = 2 if cfg.preprocessing == "flow-bidir" else 1
            self.layers = [tuple(init_flow_params(fc, rng) for _ in range(per_block))
                           for _ in range(cfg.n_layers)]
        self.router = init_router_params(d, H, rng)
        self.router_cfg = RouterConfig(k=cfg.router_k)
        self.council = init_council_params(d, H, VALUE_VOCAB, rng)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        params = [self.token_emb] + self.pos.tensors()
        for layer in self.layers:
            if isinstance(layer, AttnLayerParams):
                params += layer.tensors()
            else:
                for block in layer:
                    params += block.tensors()
        params += self.router.tensors()
        params += self.council.tensors()
        return params

    # -- forward pieces -------------------------------------------------------

    def represent(self, tokens: np.ndarray) -> Tensor:
        L = tokens.shape[-1]
        x = add(embedding(self.token_emb, tokens), self.pos.rows(L))
        kind = self.cfg.preprocessing
        for layer in self.layers:
            if kind == "transformer":
                x = transformer_layer(x, layer)
            elif kind == "linear-attn":
                x = linear_attention_layer(x, layer)
            elif kind == "flow":
                x = flow_block(x, layer[0])
            else:
                x = bidirectional_flow(x, layer[0], layer[1])
        return x

    def select_batch(self, score_rows: np.ndarray, qs: np.ndarray) -> list[Selection]:
        """Per-sequence top-k with the query position excluded."""
        return [select_topk(score_rows[b], self.router_cfg, exclude={int(qs[b])})
                for b in range(score_rows.shape[0])]

    def _segment_scores(self, reps: Tensor, qs: np.ndarray) -> Tensor:
        summaries = segment_pool(reps, self.cfg.segment_width,
                                 "mean" if self.cfg.router == "segment-mean" else "max")
        q_rep = gather_rows(reps, qs)                     # (B, d)
        from .tensor import reshape
        q_rep = reshape(q_rep, (q_rep.shape[0], 1, q_rep.shape[1]))
        H = self.router.heads
        dh = self.cfg.d_model // H
        qh = _split_heads(matmul(q_rep, self.router.w_q), H)      # (B, H, 1, dh)
        kh = _split_heads(matmul(summaries, self.router.w_k), H)  # (B, H, S, dh)
        per_head = matmul(qh, transpose(kh, _swap_last(kh)))      # (B, H, 1, S)
        scores = scale(tsum(per_head, axis=-3), 1.0 / (H * np.sqrt(dh)))
        return reshape(scores, (scores.shape[0], scores.shape[-1]))  # (B, S)

    def _segment_selections(self, seg_scores: np.ndarray, length: int) -> list[Selection]:
        width = self.cfg.segment_width
        n_seg = seg_scores.shape[1]
        out = []
        for b in range(seg_scores.shape[0]):
            top = int(np.argmax(seg_scores[b]))
            segs = [top, min(top + 1, n_seg - 1)]
            pre = tuple(range(top * width, min((top + 1) * width, length)))
            exp = sorted({p for s in segs
                          for p in range(s * width, min((s + 1) * width, length))})
            out.append(Selection(topk=pre, expanded=tuple(exp)))
        return out

    def _council_logits(self, reps: Tensor, selections: list[Selection],
                        qs: np.ndarray) -> Tensor:
        pad_to = max(len(s.expanded) for s in selections)
        B = len(selections)
        sel = np.zeros((B, pad_to), dtype=np.int64)
        mask = np.zeros((B, pad_to), dtype=np.float32)
        for b, s in enumerate(selections):
            w = len(s.expanded)
            sel[b, :w] = s.expanded
            mask[b, w:] = MASK_VALUE
        y = sparse_attention_batch(reps, sel, self.council, pad_mask=mask)
        return predict_value(y, qs, self.council)

    # -- training interface ---------------------------------------------------

    def loss(self, batch: SequenceBatch, route_weight: float
             ) -> tuple[Tensor, StepStats, list[Selection]]:
        reps = self.represent(batch.tokens)
        qs, ans = batch.q, batch.a
        if self.cfg.router == "investigator":
            scores = routing_scores(reps, self.router)
            route = routing_loss_batch(scores, qs, ans)
            rows = scores.data[np.arange(batch.n), qs]
            selections = self.select_batch(rows, qs)
        else:
            seg_scores = self._segment_scores(reps, qs)
            gold_seg = ans // self.cfg.segment_width
            route = cross_entropy_mean(seg_scores, gold_seg)
            selections = self._segment_selections(seg_scores.data, batch.length)
        logits = self._council_logits(reps, selections, qs)
        task = cross_entropy_mean(logits, batch.value_class())
        total = add(task, scale(route, route_weight))
        stats = StepStats(loss_total=total.item(), loss_task=task.item(),
                          loss_route=route.item())
        return total, stats, selections

    def evaluate(self, batch: SequenceBatch, batch_size: int = 32) -> EvalStats:
        hit_pre = hit_exp = correct = 0
        with no_grad():
            for lo in range(0, batch.n, batch_size):
                sub = slice(lo, min(lo + batch_size, batch.n))
                tokens, qs, ans = batch.tokens[sub], batch.q[sub], batch.a[sub]
                reps = self.represent(tokens)
                selections = self.route_eval(reps, qs)
                logits = self._council_logits(reps, selections, qs)
                preds = logits.data.argmax(axis=-1)
                correct += int((preds == batch.value_class()[sub]).sum())
                for sel, gold in zip(selections, ans):
                    hit_pre += int(gold in sel.topk)
                    hit_exp += int(gold in sel.expanded)
        n = batch.n
        return EvalStats(routing_precision=hit_pre / n,
                         routing_precision_expanded=hit_exp / n,
                         task_accuracy=correct / n)

    def route_eval(self, reps: Tensor, qs: np.ndarray) -> list[Selection]:
        if self.cfg.router == "investigator":
            scores = routing_scores(reps, self.router)
            rows = scores.data[np.arange(len(qs)), qs]
            return self.select_batch(rows, qs)
        seg_scores = self._segment_scores(reps, qs)
        return self._segment_selections(seg_scores.data, reps.shape[-2])

    def represent_eval(self, tokens: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.represent(tokens).data


__all__ = ["ModelConfig", "Pipeline", "segment_pool", "StepStats", "EvalStats",
           "PREPROCESSING_KINDS", "ROUTER_KINDS"]
