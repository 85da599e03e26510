"""Per-segment Bloom filters over raw token ids.

Each fixed-width slice of the sequence gets its own bit array; membership
uses double hashing derived from two seeded 64-bit mixes, so filters are
stable across processes (no interpreter hash salting). Filters can answer
false positives but never false negatives; a positive segment is then
scanned exactly via its stored position list.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4B7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


@dataclass
class _Segment:
    start: int
    tokens: np.ndarray       # raw slice for the exact within-segment scan
    bits: np.ndarray         # packed uint8 bit array, read-only after build


@dataclass
class BloomSegmentIndex:
    width: int
    m_bits: int
    k_hashes: int
    seed: int
    length: int
    segments: list[_Segment]

    def _bit_positions(self, token: int) -> list[int]:
        h1 = _splitmix64(int(token) ^ _splitmix64(self.seed))
        h2 = _splitmix64(int(token) ^ _splitmix64(self.seed + 1)) | 1
        return [((h1 + i * h2) & _MASK64) % self.m_bits for i in range(self.k_hashes)]

    def segment_contains(self, seg_id: int, token: int) -> bool:
        bits = self.segments[seg_id].bits
        return all(bits[p >> 3] & (1 << (p & 7)) for p in self._bit_positions(token))


def bloom_build(tokens, width: int = 16, m_bits: int = 1024, k_hashes: int = 3,
                seed: int = 0) -> BloomSegmentIndex:
    """Index one sequence: each width-sized segment's filter holds exactly
    that segment's token ids. An empty sequence yields zero segments."""
    tokens = np.asarray(tokens)
    index = BloomSegmentIndex(width=width, m_bits=m_bits, k_hashes=k_hashes,
                              seed=seed, length=len(tokens), segments=[])
    for start in range(0, len(tokens), width):
        chunk = tokens[start:start + width]
        bits = np.zeros(m_bits // 8 + (m_bits % 8 > 0), dtype=np.uint8)
        for tok in chunk.tolist():
            for p in index._bit_positions(tok):
                bits[p >> 3] |= 1 << (p & 7)
        bits.flags.writeable = False
        index.segments.append(_Segment(start=start, tokens=chunk, bits=bits))
    return index


def bloom_route(index: BloomSegmentIndex, query_token: int, k: int) -> list[int]:
    """Positions selected for a query token.

    Filter-positive segments are scanned for exact matches; matches and
    their +1 neighbors are kept earliest-first up to 2k. If fewer than k
    positions result, filter-positive segment starts pad the set.
    """
    matched: list[int] = []
    positive_starts: list[int] = []
    for sid, seg in enumerate(index.segments):
        if index.segment_contains(sid, query_token):
            positive_starts.append(seg.start)
            hits = np.nonzero(seg.tokens == query_token)[0]
            matched.extend(int(seg.start + h) for h in hits)
    selected: list[int] = []
    seen: set[int] = set()
    for p in matched:
        for cand in (p, min(p + 1, index.length - 1)):
            if cand not in seen:
                seen.add(cand)
                selected.append(cand)
            if len(selected) >= 2 * k:
                return sorted(selected)
    for start in positive_starts:
        if len(selected) >= k:
            break
        if start not in seen:
            seen.add(start)
            selected.append(start)
    return sorted(selected)


__all__ = ["BloomSegmentIndex", "bloom_build", "bloom_route"]
