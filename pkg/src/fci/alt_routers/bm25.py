"""Okapi-style keyword scoring over segmented documents."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from ..errors import ContractError


@dataclass
class BM25Index:
    term_freqs: list[Counter]
    doc_freq: Counter
    lengths: list[int]
    avg_len: float
    k1: float = 1.2
    b: float = 0.75

    @property
    def n_segments(self) -> int:
        return len(self.term_freqs)

    def idf(self, term: str) -> float:
        df = self.doc_freq.get(term, 0)
        return math.log(1.0 + (self.n_segments - df + 0.5) / (df + 0.5))


def bm25_build(corpus: list[list[str]], k1: float = 1.2, b: float = 0.75) -> BM25Index:
    """Standard sufficient statistics over a list of term-list segments."""
    if not corpus:
        raise ContractError("bm25 needs a nonempty corpus")
    tfs = [Counter(seg) for seg in corpus]
    df = Counter()
    for tf in tfs:
        df.update(tf.keys())
    lengths = [len(seg) for seg in corpus]
    avg_len = sum(lengths) / len(lengths)
    return BM25Index(term_freqs=tfs, doc_freq=df, lengths=lengths,
                     avg_len=max(avg_len, 1e-9), k1=k1, b=b)


def bm25_score(index: BM25Index, query_terms: list[str], seg_id: int) -> float:
    """Score one segment; duplicate query terms contribute once per occurrence."""
    tf = index.term_freqs[seg_id]
    # zero-length segments are normalized as length 1
    length = index.lengths[seg_id] or 1
    norm = index.k1 * (1.0 - index.b + index.b * length / index.avg_len)
    score = 0.0
    for term in query_terms:
        f = tf.get(term, 0)
        if f:
            score += index.idf(term) * f * (index.k1 + 1.0) / (f + norm)
    return score


def bm25_retrieve(index: BM25Index, query_terms: list[str], top_m: int
                  ) -> list[tuple[int, float]]:
    """Top segments by score, descending; ties break toward the lower id."""
    if top_m < 1:
        raise ContractError("top_m must be >= 1")
    scored = [(sid, bm25_score(index, query_terms, sid))
              for sid in range(index.n_segments)]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:top_m]


__all__ = ["BM25Index", "bm25_build", "bm25_score", "bm25_retrieve"]
