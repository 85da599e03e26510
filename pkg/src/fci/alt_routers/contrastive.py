"""Contrastive pretraining of router projections.

Positive pairs are each sequence's (query, gold key) positions; negatives
are sampled uniformly from the other positions. Similarity is the dot
product of the projected representations, so the objective trains exactly
the projections the router will score with afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..tensor import (
    Tensor, backward, concat, cross_entropy, cross_entropy_mean, gather_rows,
    matmul, reshape, scale,
)
from ..attention import _gather_positions
from ..data import SequenceBatch
from ..training import AdamW, TrainConfig, onecycle_lr


@dataclass
class ContrastiveConfig:
    tau: float = 0.1
    negatives: int = 32
    epochs: int = 20
    finetune: bool = False   # also update the representation tables
    batch: int = 32
    max_lr: float = 3e-3
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")


def infonce_loss(anchor: Tensor, positive: Tensor, negatives, tau: float) -> Tensor:
    """-log( e^{s+/tau} / (e^{s+/tau} + sum e^{s-/tau}) ) for one anchor."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    d = anchor.shape[-1]
    rows = [reshape(positive, (1, d))] + [reshape(n, (1, d)) for n in negatives]
    cands = concat(rows, axis=0)
    sims = reshape(matmul(cands, reshape(anchor, (d, 1))), (len(rows),))
    return cross_entropy(scale(sims, 1.0 / tau), 0)


def infonce_loss_batch(anchors: Tensor, cands: Tensor, tau: float) -> Tensor:
    """Mean loss over a batch; `cands` is (B, 1+N, d) with the positive first."""
    b, m, d = cands.shape
    logits = reshape(matmul(cands, reshape(anchors, (b, d, 1))), (b, m))
    return cross_entropy_mean(scale(logits, 1.0 / tau), np.zeros(b, dtype=np.int64))


def contrastive_pretrain(model, data: SequenceBatch, cfg: ContrastiveConfig,
                         progress=None) -> list[float]:
    """Train the model's router projections by the contrastive objective on
    its (frozen or jointly finetuned) representations. Returns per-epoch
    mean losses; with zero epochs the projections are untouched."""
    params = list(model.router.tensors())
    if cfg.finetune:
        params += [model.token_emb] + model.pos.tensors()
    opt = AdamW(params, weight_decay=0.01)
    sched = TrainConfig(n_train=data.n, batch=cfg.batch, epochs=max(cfg.epochs, 1),
                        max_lr=cfg.max_lr, seed=cfg.seed)
    steps_per_epoch = max(1, -(-data.n // cfg.batch))
    total_steps = cfg.epochs * steps_per_epoch
    rng = np.random.default_rng([cfg.seed, 0xC0])
    losses: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(data.n)
        running = 0.0
        for lo in range(0, data.n, cfg.batch):
            idx = order[lo:lo + cfg.batch]
            tokens, qs, ans = data.tokens[idx], data.q[idx], data.a[idx]
            L = tokens.shape[1]
            negs = np.empty((len(idx), cfg.negatives), dtype=np.int64)
            for row, (qq, aa) in enumerate(zip(qs, ans)):
                pool = np.setdiff1d(np.arange(L), [qq, aa])
                negs[row] = rng.choice(pool, size=cfg.negatives, replace=False)
            reps = model.represent(tokens)
            anchors = matmul(gather_rows(reps, qs), model.router.w_q)
            pos = gather_rows(reps, ans)
            pos = reshape(pos, (pos.shape[0], 1, pos.shape[1]))
            cands = matmul(concat([pos, _gather_positions(reps, negs)], axis=1),
                           model.router.w_k)
            loss = infonce_loss_batch(anchors, cands, cfg.tau)
            running += loss.item()
            backward(loss, free_graph=True)
            lr = onecycle_lr(step, total_steps, sched)
            opt.step(lr)
            opt.zero_grad()
            step += 1
        losses.append(running / steps_per_epoch)
        if progress is not None:
            progress(epoch, losses[-1])
    return losses


__all__ = ["ContrastiveConfig", "infonce_loss", "infonce_loss_batch",
           "contrastive_pretrain"]
