"""Task generators, the segmented retrieval corpus, and dataset serialization.

Synthetic sequences use the token range [1, 256) for every slot so that no
range test can identify roles; only content identity separates the gold key
from filler. Value tokens are the first 64 symbols of that range (the
prediction head's class c corresponds to token c+1), but filler draws from
the full range, so membership in the value set marks nothing.

Generators derive one RNG per sequence from (seed, index), so outputs are
pure functions of (config, seed) no matter how generation is scheduled.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ChecksumError, ConfigError, ParseError, VersionError

TOKEN_LOW = 1
TOKEN_HIGH = 256          # exclusive
VALUE_VOCAB = 64          # value tokens are [1, 65); class index = token - 1
KEY_LOW = VALUE_VOCAB + 1  # MQAR keys draw from [65, 256)

MAGIC = b"FCIDATA1"
FORMAT_VERSION = 1

_TERM_SPLIT = re.compile(r"[^0-9a-z]+")


@dataclass
class SequenceBatch:
    """A batch of token sequences with routing supervision."""

    task: str                 # "distant" | "mqar"
    tokens: np.ndarray        # (n, L) int
    q: np.ndarray             # (n,) query positions
    a: np.ndarray             # (n,) gold key positions
    value: np.ndarray         # (n,) gold value tokens
    distractors: np.ndarray   # (n, n_distractors) distractor key positions
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    def value_class(self) -> np.ndarray:
        return self.value.astype(np.int64) - 1

    def __eq__(self, other) -> bool:
        if not isinstance(other, SequenceBatch):
            return NotImplemented
        return (self.task == other.task and self.seed == other.seed
                and np.array_equal(self.tokens, other.tokens)
                and np.array_equal(self.q, other.q)
                and np.array_equal(self.a, other.a)
                and np.array_equal(self.value, other.value)
                and np.array_equal(self.distractors, other.distractors))


def validate_batch(batch: SequenceBatch) -> None:
    """Raise if any stated invariant fails for any sequence."""
    t = batch.tokens
    if t.min() < TOKEN_LOW or t.max() >= TOKEN_HIGH:
        raise ConfigError("token outside [1, 256)")
    n = batch.n
    rows = np.arange(n)
    if not np.array_equal(t[rows, batch.a], t[rows, batch.q]):
        raise ConfigError("gold key token differs from query token")
    if not np.array_equal(t[rows, batch.a + 1], batch.value):
        raise ConfigError("value token not adjacent to gold key")
    if batch.value.min() < TOKEN_LOW or batch.value.max() > VALUE_VOCAB:
        raise ConfigError("gold value outside value vocabulary")
    min_dist = batch.meta.get("min_dist")
    if min_dist and np.abs(batch.a - batch.q).min() < min_dist:
        raise ConfigError("gold key closer than the distance floor")
    if batch.distractors.size:
        dk = t[rows[:, None], batch.distractors]
        if np.any(dk == t[rows, batch.q][:, None]):
            raise ConfigError("distractor key equals the query key")


def gen_distant_evidence(n_seqs: int, L: int = 512, min_dist: int = 200,
                         n_distractors: int = 4, seed: int = 0,
                         max_dist: int | None = None,
                         distractor_window: int = 50) -> SequenceBatch:
    """Far-recall diagnostic: the query key token recurs once at distance
    >= min_dist with its value right after it, while distractor pairs sit
    within +-distractor_window of the query. `max_dist` caps the distance
    for the near-placement sanity variant."""
    if L <= min_dist + 2:
        raise ConfigError(f"length {L} cannot hold a pair at distance {min_dist}")
    if max_dist is not None and max_dist < min_dist:
        raise ConfigError("max_dist below min_dist")
    tokens = np.empty((n_seqs, L), dtype=np.int64)
    qs = np.empty(n_seqs, dtype=np.int64)
    ans = np.empty(n_seqs, dtype=np.int64)
    values = np.empty(n_seqs, dtype=np.int64)
    dists = np.empty((n_seqs, n_distractors), dtype=np.int64)
    positions = np.arange(L)
    for i in range(n_seqs):
        rng = np.random.default_rng([seed, i])
        qkey = int(rng.integers(TOKEN_LOW, TOKEN_HIGH))
        for _ in range(100):
            q = int(rng.integers(0, L))
            dist = np.abs(positions - q)
            ok = (dist >= min_dist) & (positions <= L - 2)
            if max_dist is not None:
                ok &= dist <= max_dist
            cand = positions[ok]
            if cand.size:
                break
        else:
            raise ConfigError("no feasible gold placement for the distance band")
        a = int(rng.choice(cand))
        # filler excludes the query key: shift draws at or above it by one
        filler = rng.integers(TOKEN_LOW, TOKEN_HIGH - 1, size=L)
        filler[filler >= qkey] += 1
        row = filler
        row[q] = qkey
        row[a] = qkey
        value = int(rng.integers(TOKEN_LOW, TOKEN_LOW + VALUE_VOCAB))
        row[a + 1] = value
        taken = {q, a, a + 1}
        lo = max(0, q - distractor_window)
        hi = min(L - 2, q + distractor_window)
        window = [p for p in range(lo, hi + 1) if p not in taken and p + 1 not in taken]
        picked: list[int] = []
        for p in rng.permutation(window):
            p = int(p)
            if any(abs(p - other) < 2 for other in picked):
                continue
            picked.append(p)
            if len(picked) == n_distractors:
                break
        if len(picked) < n_distractors:
            raise ConfigError("distractor window too tight for the requested count")
        for p in picked:
            dkey = int(rng.integers(TOKEN_LOW, TOKEN_HIGH - 1))
            row[p] = dkey + 1 if dkey >= qkey else dkey
            row[p + 1] = int(rng.integers(TOKEN_LOW, TOKEN_LOW + VALUE_VOCAB))
        tokens[i] = row
        qs[i], ans[i], values[i] = q, a, value
        dists[i] = sorted(picked)
    batch = SequenceBatch(
        task="distant", tokens=tokens, q=qs, a=ans, value=values,
        distractors=dists, seed=seed,
        meta={"L": L, "min_dist": min_dist, "max_dist": max_dist,
              "n_distractors": n_distractors},
    )
    validate_batch(batch)
    return batch


def gen_mqar(n_seqs: int, n_pairs: int = 16, L: int = 256, seed: int = 0) -> SequenceBatch:
    """Associative recall: n_pairs distinct (key, value) pairs open the
    sequence, a single query key (one of them) closes it."""
    if 2 * n_pairs + 1 > L:
        raise ConfigError(f"{n_pairs} pairs do not fit in length {L}")
    tokens = np.empty((n_seqs, L), dtype=np.int64)
    qs = np.full(n_seqs, L - 1, dtype=np.int64)
    ans = np.empty(n_seqs, dtype=np.int64)
    values = np.empty(n_seqs, dtype=np.int64)
    dists = np.empty((n_seqs, n_pairs - 1), dtype=np.int64)
    for i in range(n_seqs):
        rng = np.random.default_rng([seed, i])
        for attempt in range(100):
            keys = rng.integers(KEY_LOW, TOKEN_HIGH, size=n_pairs)
            if len(set(keys.tolist())) == n_pairs:
                break
        else:
            raise ConfigError("could not draw distinct keys after 100 retries")
        vals = rng.integers(TOKEN_LOW, TOKEN_LOW + VALUE_VOCAB, size=n_pairs)
        row = np.empty(L, dtype=np.int64)
        row[0:2 * n_pairs:2] = keys
        row[1:2 * n_pairs:2] = vals
        allowed = np.setdiff1d(np.arange(TOKEN_LOW, TOKEN_HIGH), keys)
        row[2 * n_pairs:] = rng.choice(allowed, size=L - 2 * n_pairs)
        pick = int(rng.integers(0, n_pairs))
        row[L - 1] = keys[pick]
        tokens[i] = row
        ans[i] = 2 * pick
        values[i] = vals[pick]
        dists[i] = [2 * j for j in range(n_pairs) if j != pick]
    return SequenceBatch(
        task="mqar", tokens=tokens, q=qs, a=ans, value=values,
        distractors=dists, seed=seed, meta={"L": L, "n_pairs": n_pairs},
    )


# -- segmented retrieval corpus ------------------------------------------------


@dataclass
class CorpusItem:
    id: int
    segments: list[list[str]]
    gold: list[int]
    query: list[str]


@dataclass
class SegmentedCorpus:
    items: list[CorpusItem]

    def __eq__(self, other):
        if not isinstance(other, SegmentedCorpus):
            return NotImplemented
        return [(i.id, i.segments, i.gold, i.query) for i in self.items] == \
               [(i.id, i.segments, i.gold, i.query) for i in other.items]


def normalize_terms(terms) -> list[str]:
    out: list[str] = []
    for term in terms:
        for piece in _TERM_SPLIT.split(str(term).lower()):
            if piece:
                out.append(piece)
    return out


def gen_synthetic_corpus(n_items: int = 200, n_segments: int = 16, n_gold: int = 2,
                         seed: int = 0, vocab_size: int = 4000) -> SegmentedCorpus:
    """Keyword-retrieval stand-in: gold segments share the query's terms,
    distractor segments draw from the remaining vocabulary."""
    rng = np.random.default_rng(seed)
    vocab = np.array([f"term{idx:04d}" for idx in range(vocab_size)])
    items = []
    for i in range(n_items):
        query_idx = rng.choice(vocab_size, size=3, replace=False)
        query = vocab[query_idx].tolist()
        rest = np.setdiff1d(np.arange(vocab_size), query_idx)
        gold_ids = sorted(int(g) for g in rng.choice(n_segments, size=n_gold, replace=False))
        segments = []
        for s in range(n_segments):
            noise = vocab[rng.choice(rest, size=8, replace=False)].tolist()
            if s in gold_ids:
                n_q = int(rng.integers(2, len(query) + 1))
                seg = [query[j] for j in rng.choice(len(query), size=n_q, replace=False)]
                seg += noise[: 8 - n_q + 2]
            else:
                seg = noise
            segments.append(seg)
        items.append(CorpusItem(id=i, segments=segments, gold=gold_ids, query=query))
    return SegmentedCorpus(items)


def save_segmented_corpus(corpus: SegmentedCorpus, path) -> None:
    with open(path, "w") as fh:
        for item in corpus.items:
            fh.write(json.dumps({"id": item.id, "segments": item.segments,
                                 "gold": item.gold, "query": item.query}) + "\n")


def load_segmented_corpus(path) -> SegmentedCorpus:
    """Parse a JSONL corpus; terms are lowercased and split on
    non-alphanumerics. Errors carry the offending line number."""
    items: list[CorpusItem] = []
    with open(path) as fh:
        lines = fh.readlines()
    if not any(line.strip() for line in lines):
        raise ParseError(f"{path}: empty corpus file")
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise ParseError(f"{path}:{lineno}: invalid JSON ({err.msg})") from err
        try:
            segments = [normalize_terms(seg) for seg in obj["segments"]]
            gold = [int(g) for g in obj["gold"]]
            query = normalize_terms(obj["query"])
            item = CorpusItem(id=int(obj["id"]), segments=segments, gold=gold, query=query)
        except (KeyError, TypeError) as err:
            raise ParseError(f"{path}:{lineno}: missing or malformed field ({err})") from err
        for g in item.gold:
            if not 0 <= g < len(item.segments):
                raise ParseError(f"{path}:{lineno}: gold id {g} out of range")
        items.append(item)
    return SegmentedCorpus(items)


# -- dataset files ---------------------------------------------------------------


def write_dataset(batch: SequenceBatch, path) -> None:
    """Binary layout: magic, JSON header line, little-endian u16 payload
    (tokens, q, a, value, distractors), trailing CRC32 of the payload."""
    header = {
        "version": FORMAT_VERSION, "task": batch.task, "n": int(batch.n),
        "L": int(batch.length), "n_distractors": int(batch.distractors.shape[1]),
        "seed": int(batch.seed), "meta": batch.meta,
    }
    payload = b"".join(
        arr.astype("<u2").tobytes()
        for arr in (batch.tokens, batch.q, batch.a, batch.value, batch.distractors)
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(payload)
        fh.write(np.uint32(zlib.crc32(payload)).tobytes())


def read_dataset(path) -> SequenceBatch:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ParseError(f"{path}: bad magic; not a dataset file")
    nl = blob.index(b"\n", len(MAGIC))
    try:
        header = json.loads(blob[len(MAGIC):nl])
    except json.JSONDecodeError as err:
        raise ParseError(f"{path}: unreadable header ({err.msg})") from err
    if header.get("version") != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {header.get('version')} "
                           f"unsupported (expected {FORMAT_VERSION})")
    payload, crc_raw = blob[nl + 1:-4], blob[-4:]
    if zlib.crc32(payload) != int(np.frombuffer(crc_raw, dtype="<u4")[0]):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    n, L, nd = header["n"], header["L"], header["n_distractors"]
    flat = np.frombuffer(payload, dtype="<u2").astype(np.int64)
    sizes = [n * L, n, n, n, n * nd]
    if flat.size != sum(sizes):
        raise ParseError(f"{path}: payload holds {flat.size} values, expected {sum(sizes)}")
    offs = np.cumsum([0] + sizes)
    parts = [flat[offs[j]:offs[j + 1]] for j in range(5)]
    return SequenceBatch(
        task=header["task"], tokens=parts[0].reshape(n, L), q=parts[1],
        a=parts[2], value=parts[3], distractors=parts[4].reshape(n, nd),
        seed=header["seed"], meta=header.get("meta", {}),
    )


def dataset_roundtrip(batch: SequenceBatch, path) -> SequenceBatch:
    """Serialize then reload; the result compares equal to the input."""
    write_dataset(batch, path)
    return read_dataset(path)


__all__ = [
    "SequenceBatch", "SegmentedCorpus", "CorpusItem", "validate_batch",
    "gen_distant_evidence", "gen_mqar", "gen_synthetic_corpus",
    "save_segmented_corpus", "load_segmented_corpus", "normalize_terms",
    "write_dataset", "read_dataset", "dataset_roundtrip",
    "TOKEN_LOW", "TOKEN_HIGH", "VALUE_VOCAB", "KEY_LOW", "MAGIC", "FORMAT_VERSION",
]
