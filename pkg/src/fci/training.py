"""Optimization loop: decoupled-weight-decay Adam, one-cycle learning-rate
schedule, linearly decayed routing-loss weight, and per-epoch evaluation.

A run is a pure function of (config, seed): shuffling, initialization and
evaluation data all derive from the seed, and every arithmetic path is
deterministic, so reruns produce bit-identical epoch records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, NumericError
from .pipeline import Pipeline
from .data import SequenceBatch
from .tensor import Tensor, backward


@dataclass
class TrainConfig:
    n_train: int = 8000
    batch: int = 32
    epochs: int = 40
    max_lr: float = 3e-3
    pct_start: float = 0.3
    div: float = 25.0
    final_div: float = 1e4
    route_w_start: float = 1.0
    route_w_end: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    eval_size: int = 500

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.n_train and self.batch > self.n_train:
            raise ConfigError("batch larger than the training set")


@dataclass
class EpochRecord:
    epoch: int
    routing_precision: float
    routing_precision_expanded: float
    task_accuracy: float
    loss_total: float
    loss_route: float
    loss_task: float
    lr: float
    route_weight: float

    def to_dict(self) -> dict:
        return asdict(self)


def adamw_step(param: Tensor, grad: np.ndarray, state: dict, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.01) -> None:
    """One decoupled-weight-decay Adam update, in place.

    p <- p - lr * mhat / (sqrt(vhat) + eps) - lr * wd * p
    """
    if grad.shape != param.data.shape:
        raise ConfigError(f"grad shape {grad.shape} != param shape {param.data.shape}")
    if not state:
        state["m"] = np.zeros_like(param.data)
        state["v"] = np.zeros_like(param.data)
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    state["m"] = beta1 * state["m"] + (1.0 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1.0 - beta2) * grad * grad
    mhat = state["m"] / (1.0 - beta1 ** t)
    vhat = state["v"] / (1.0 - beta2 ** t)
    param.data -= lr * (mhat / (np.sqrt(vhat) + eps)) + lr * weight_decay * param.data


class AdamW:
    """Per-parameter state holder driving `adamw_step`."""

    def __init__(self, params: list[Tensor], weight_decay: float = 0.01):
        self.params = params
        self.weight_decay = weight_decay
        self.states: list[dict] = [{} for _ in params]

    def step(self, lr: float) -> None:
        for p, s in zip(self.params, self.states):
            if p.grad is None:
                continue
            adamw_step(p, p.grad, s, lr, weight_decay=self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def onecycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from max_lr/div to max_lr over pct_start of the run,
    then cosine annealing down to max_lr/final_div."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.pct_start * total_steps
    lo, hi, end = cfg.max_lr / cfg.div, cfg.max_lr, cfg.max_lr / cfg.final_div
    if step <= warm:
        frac = step / warm if warm > 0 else 1.0
        return lo + (hi - lo) * frac
    frac = (step - warm) / (total_steps - warm)
    return end + (hi - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def route_weight(epoch: int, epochs: int, start: float = 1.0, end: float = 0.1) -> float:
    """Linear decay across epochs; endpoints are exactly start and end."""
    if not 0 <= epoch < epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {epochs})")
    if epochs == 1:
        return start
    return start + (end - start) * epoch / (epochs - 1)


@dataclass
class TrainData:
    train: SequenceBatch
    eval: SequenceBatch


def _slice_batch(batch: SequenceBatch, idx: np.ndarray) -> SequenceBatch:
    return SequenceBatch(task=batch.task, tokens=batch.tokens[idx], q=batch.q[idx],
                         a=batch.a[idx], value=batch.value[idx],
                         distractors=batch.distractors[idx], seed=batch.seed,
                         meta=batch.meta)


def train(model: Pipeline, data: TrainData, cfg: TrainConfig,
          progress=None) -> list[EpochRecord]:
    """Run the shared procedure: total loss = task CE + w(epoch) * routing CE,
    seeded shuffling, one evaluation on the held-out set per epoch."""
    opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
    n = min(cfg.n_train, data.train.n)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch))
    total_steps = cfg.epochs * steps_per_epoch
    rng = np.random.default_rng([cfg.seed, 0x5F])
    records: list[EpochRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        w = route_weight(epoch, cfg.epochs, cfg.route_w_start, cfg.route_w_end)
        order = rng.permutation(n)
        sums = np.zeros(3)
        lr = onecycle_lr(step, total_steps, cfg)
        for lo in range(0, n, cfg.batch):
            sub = _slice_batch(data.train, order[lo:lo + cfg.batch])
            total, stats, _ = model.loss(sub, w)
            if not np.isfinite(stats.loss_total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"task={stats.loss_task} route={stats.loss_route}")
            backward(total, free_graph=True)
            lr = onecycle_lr(step, total_steps, cfg)
            opt.step(lr)
            opt.zero_grad()
            sums += (stats.loss_total, stats.loss_route, stats.loss_task)
            step += 1
        ev = model.evaluate(data.eval, batch_size=cfg.batch)
        records.append(EpochRecord(
            epoch=epoch,
            routing_precision=ev.routing_precision,
            routing_precision_expanded=ev.routing_precision_expanded,
            task_accuracy=ev.task_accuracy,
            loss_total=sums[0] / steps_per_epoch,
            loss_route=sums[1] / steps_per_epoch,
            loss_task=sums[2] / steps_per_epoch,
            lr=lr,
            route_weight=w,
        ))
        if progress is not None:
            progress(records[-1])
    return records


__all__ = ["TrainConfig", "EpochRecord", "adamw_step", "AdamW", "onecycle_lr",
           "route_weight", "TrainData", "train"]
