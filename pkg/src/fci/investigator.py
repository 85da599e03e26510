"""The learned router: multi-head pairwise scoring over all position pairs,
top-k selection with neighbor expansion, and direct routing supervision.

Scores are s_ij = (1/H) sum_h (Wq_h x_i)^T (Wk_h x_j) / sqrt(d/H). The
query's own row entry is masked out of its loss and selection: it trivially
matches itself. Neighbor expansion adds j+1 for every selected j because
value tokens sit immediately after their keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import (
    Tensor, add, cross_entropy, cross_entropy_mean, gather_rows, matmul,
    scale, transpose, tsum,
)
from .attention import MASK_VALUE, _split_heads, _swap_last

ScoreMatrix = Tensor  # (L, L) or (B, L, L) head-averaged pairwise scores


@dataclass
class RouterParams:
    """Per-head query/key projections, stored as (d, d) matrices whose
    column blocks are the H per-head maps."""

    heads: int
    w_q: Tensor
    w_k: Tensor

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigError("router needs at least one head")
        if self.w_q.shape[1] % self.heads:
            raise ConfigError("router dim not divisible by head count")

    def tensors(self) -> list[Tensor]:
        return [self.w_q, self.w_k]


@dataclass
class RouterConfig:
    k: int = 8
    neighbor_width: int = 1  # forward expansion: each j also selects j+1

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("top-k count must be >= 1")


@dataclass(frozen=True)
class RoutingSupervision:
    q: int  # query position
    a: int  # gold evidence (key) position

    def check(self, length: int) -> None:
        if not (0 <= self.q < length and 0 <= self.a < length):
            raise ContractError(f"supervision ({self.q}, {self.a}) outside length {length}")
        if self.q == self.a:
            raise ContractError("query and answer positions coincide")


@dataclass(frozen=True)
class Selection:
    """Router output for one sequence: the raw top-k picks (descending
    score) and the neighbor-expanded, deduplicated position set
    (ascending). Routing precision is measured on the pre-expansion set."""

    topk: tuple[int, ...]
    expanded: tuple[int, ...]


def init_router_params(d: int, heads: int, rng: np.random.Generator,
                       dtype=np.float32) -> RouterParams:
    return RouterParams(
        heads=heads,
        w_q=Tensor(rng.normal(0.0, 0.02, (d, d)).astype(dtype), requires_grad=True),
        w_k=Tensor(rng.normal(0.0, 0.02, (d, d)).astype(dtype), requires_grad=True),
    )


def routing_scores(reps: Tensor, params: RouterParams) -> ScoreMatrix:
    """Head-averaged bilinear scores for every position pair."""
    H = params.heads
    dh = params.w_q.shape[1] // H
    q = _split_heads(matmul(reps, params.w_q), H)
    k = _split_heads(matmul(reps, params.w_k), H)
    per_head = matmul(q, transpose(k, _swap_last(k)))          # (..., H, L, L)
    return scale(tsum(per_head, axis=-3), 1.0 / (H * np.sqrt(dh)))


def select_topk(score_row, config: RouterConfig, exclude=frozenset()) -> Selection:
    """Deterministic top-k with forward neighbor expansion.

    Ties break toward the lower index. Every selected j also contributes
    j+1, clipped at the last position; the expanded set is deduplicated,
    so its size lies in [k, 2k].
    """
    row = score_row.data if isinstance(score_row, Tensor) else np.asarray(score_row)
    L = row.shape[0]
    exclude = set(exclude)
    if config.k > L - len(exclude):
        raise ConfigError(f"top-{config.k} impossible with {len(exclude)} excluded of {L}")
    masked = row.astype(np.float64, copy=True)
    if exclude:
        masked[sorted(exclude)] = -np.inf
    order = np.argsort(-masked, kind="stable")
    topk = tuple(int(j) for j in order[:config.k])
    expanded: list[int] = []
    seen: set[int] = set()
    for j in topk:
        for p in (j, min(j + config.neighbor_width, L - 1)):
            if p not in seen:
                seen.add(p)
                expanded.append(p)
    return Selection(topk=topk, expanded=tuple(sorted(expanded)))


def routing_loss(scores: ScoreMatrix, sup: RoutingSupervision) -> Tensor:
    """Cross-entropy of the query's score row (own position masked)
    against the gold evidence position."""
    L = scores.shape[-1]
    sup.check(L)
    row = gather_rows(scores, np.array([sup.q]))  # (1, L) keeps graph 2-D
    mask = np.zeros((1, L), dtype=scores.dtype)
    mask[0, sup.q] = MASK_VALUE
    from .tensor import reshape
    return cross_entropy(reshape(add(row, Tensor(mask)), (L,)), sup.a)


def routing_loss_batch(scores: ScoreMatrix, qs: np.ndarray, ans: np.ndarray) -> Tensor:
    """Mean routing loss over a batch of (B, L, L) scores."""
    qs = np.asarray(qs)
    ans = np.asarray(ans)
    if np.any(qs == ans):
        raise ContractError("query and answer positions coincide")
    rows = gather_rows(scores, qs)                 # (B, L)
    mask = np.zeros(rows.shape, dtype=scores.dtype)
    mask[np.arange(len(qs)), qs] = MASK_VALUE
    return cross_entropy_mean(add(rows, Tensor(mask)), ans)


def randomize_projections(params: RouterParams, seed: int) -> RouterParams:
    """Fresh Gaussian (std 1/sqrt(d)) replacements for both projections,
    same shapes; the input params are untouched."""
    rng = np.random.default_rng(seed)
    d = params.w_q.shape[0]
    std = 1.0 / np.sqrt(d)
    return RouterParams(
        heads=params.heads,
        w_q=Tensor(rng.normal(0.0, std, params.w_q.shape).astype(params.w_q.dtype),
                   requires_grad=True),
        w_k=Tensor(rng.normal(0.0, std, params.w_k.shape).astype(params.w_k.dtype),
                   requires_grad=True),
    )


__all__ = [
    "ScoreMatrix", "RouterParams", "RouterConfig", "RoutingSupervision",
    "Selection", "init_router_params", "routing_scores", "select_topk",
    "routing_loss", "routing_loss_batch", "randomize_projections",
]
