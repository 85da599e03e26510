"""Measurement machinery: routing precision, task accuracy, the
query-answer cosine gap, routing-matrix spectrum, and phase-transition
detection on training histories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError


def routing_precision(selections, gold) -> float:
    """Fraction of sequences whose gold position is in the (pre-expansion)
    selected set."""
    gold = np.asarray(gold)
    if len(selections) != len(gold):
        raise ContractError(f"{len(selections)} selections vs {len(gold)} gold positions")
    if len(gold) == 0:
        raise ContractError("empty evaluation")
    hits = sum(int(g) in set(int(p) for p in sel) for sel, g in zip(selections, gold))
    return hits / len(gold)


def task_accuracy(preds, gold) -> float:
    preds = np.asarray(preds)
    gold = np.asarray(gold)
    if preds.shape != gold.shape:
        raise ContractError(f"prediction shape {preds.shape} != gold shape {gold.shape}")
    return float((preds == gold).mean())


@dataclass
class CosineGapReport:
    value: float
    n_sequences: int
    n_skipped: int           # zero-vector rows encountered and skipped
    meta: dict = field(default_factory=dict)


def cosine_gap(reps: np.ndarray, qs: np.ndarray, ans: np.ndarray,
               rng: np.random.Generator, n_baseline: int = 16) -> CosineGapReport:
    """Mean over sequences of cos(r_q, r_a) minus the mean cosine between
    r_q and `n_baseline` random positions (excluding both the answer and
    the query itself). Zero-norm vectors are skipped and counted."""
    reps = np.asarray(reps, dtype=np.float64)
    n, L, _ = reps.shape
    gaps = []
    skipped = 0
    for i in range(n):
        r = reps[i]
        norms = np.linalg.norm(r, axis=-1)
        q, a = int(qs[i]), int(ans[i])
        if norms[q] == 0 or norms[a] == 0:
            skipped += 1
            continue
        cos_qa = float(r[q] @ r[a] / (norms[q] * norms[a]))
        pool = np.setdiff1d(np.arange(L), [q, a])
        pool = pool[norms[pool] > 0]
        if pool.size == 0:
            skipped += 1
            continue
        pick = rng.choice(pool, size=min(n_baseline, pool.size), replace=False)
        base = float(np.mean(r[pick] @ r[q] / (norms[pick] * norms[q])))
        gaps.append(cos_qa - base)
    if not gaps:
        raise ContractError("no sequence had nonzero query/answer vectors")
    return CosineGapReport(value=float(np.mean(gaps)), n_sequences=len(gaps),
                           n_skipped=skipped,
                           meta={"n_baseline": n_baseline, "baseline_excludes": ["a", "q"]})


@dataclass
class SpectrumReport:
    singular_values: np.ndarray   # descending
    energy_cumulative: np.ndarray  # cumulative squared-singular-value shares
    effective_rank: int
    threshold: float

    def to_dict(self) -> dict:
        return {
            "singular_values": [float(s) for s in self.singular_values],
            "energy_cumulative": [float(e) for e in self.energy_cumulative],
            "effective_rank": int(self.effective_rank),
            "threshold": float(self.threshold),
        }


def svd_energy_rank(wq: np.ndarray, wk: np.ndarray, threshold: float = 0.9,
                    heads: int = 1) -> SpectrumReport:
    """Spectrum of the combined routing matrix.

    With several heads the per-head outer products Wq_h Wk_h^T (column
    blocks of the stored matrices) are summed into one d x d matrix,
    matching the head-averaged score form. Effective rank is the smallest
    r whose leading singular directions hold `threshold` of the squared
    spectrum energy.
    """
    wq = np.asarray(wq, dtype=np.float64)
    wk = np.asarray(wk, dtype=np.float64)
    if wq.shape != wk.shape:
        raise ContractError(f"projection shapes differ: {wq.shape} vs {wk.shape}")
    d, cols = wq.shape
    if cols % heads:
        raise ContractError(f"{cols} columns not divisible into {heads} heads")
    dh = cols // heads
    combined = np.zeros((d, d))
    for h in range(heads):
        block = slice(h * dh, (h + 1) * dh)
        combined += wq[:, block] @ wk[:, block].T
    try:
        sv = np.linalg.svd(combined, compute_uv=False)
    except np.linalg.LinAlgError as err:
        raise NumericError(f"SVD failed to converge: {err}") from err
    energy = sv ** 2
    total = energy.sum()
    if total == 0:
        raise NumericError("routing matrix is exactly zero; spectrum undefined")
    cum = np.cumsum(energy) / total
    rank = int(np.searchsorted(cum, threshold - 1e-12) + 1)
    return SpectrumReport(singular_values=sv, energy_cumulative=cum,
                          effective_rank=rank, threshold=threshold)


def detect_phase_transition(history, jump: float = 0.30, level: float = 0.5):
    """First epoch whose routing precision rises by >= `jump` over the
    previous epoch and reaches at least `level`; None when absent."""
    hist = [float(h) for h in history]
    if not hist:
        raise ContractError("empty history")
    for e in range(1, len(hist)):
        if hist[e] - hist[e - 1] >= jump and hist[e] >= level:
            return e
    return None


__all__ = ["routing_precision", "task_accuracy", "CosineGapReport", "cosine_gap",
           "SpectrumReport", "svd_energy_rank", "detect_phase_transition"]
