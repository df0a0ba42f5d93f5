"""Bit-packed codebooks, Hamming ranking and streaming query sessions.

Bit ``j`` of a code lives in word ``j // 64`` at bit position ``j % 64``;
``+1`` maps to a set bit and ``-1`` to a clear one.  Padding bits are zero.
"""
from __future__ import annotations

import itertools
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FeatureSequence
from .encoder import EncoderModel, EncoderState, encode_sequence, encode_step
from .training import ALPHA_GRID, observed_length

CODEBOOK_MAGIC = b"MSHC"
CODEBOOK_VERSION = 1


class CodebookFormatError(ValueError):
    pass


class WidthMismatchError(ValueError):
    pass


def n_words(n_bits: int) -> int:
    return (n_bits + 63) // 64


def pack(codes: np.ndarray) -> np.ndarray:
    """Pack ``{-1,+1}`` (or ``{0,1}``) codes of shape ``(..., n_bits)`` into uint64 words."""
    codes = np.asarray(codes)
    bits = (codes > 0).astype(np.uint8)
    n_bits = bits.shape[-1]
    pad = n_words(n_bits) * 64 - n_bits
    if pad:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), np.uint8)], axis=-1)
    as_bytes = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(as_bytes).view("<u8").astype(np.uint64)


def unpack(words: np.ndarray, n_bits: int) -> np.ndarray:
    """Inverse of :func:`pack`; returns int8 codes in ``{-1, +1}``."""
    words = np.ascontiguousarray(np.asarray(words, dtype="<u8"))
    bits = np.unpackbits(words.view(np.uint8), axis=-1, bitorder="little")[..., :n_bits]
    return bits.astype(np.int8) * 2 - 1


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """Hamming distance between two packed codes of the same width."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape:
        raise WidthMismatchError(f"code widths differ: {a.shape} vs {b.shape}")
    return int(np.bitwise_count(a ^ b).sum())


def hamming_many(words: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Distances from packed query ``q`` to every row of ``words``."""
    if words.shape[1:] != q.shape:
        raise WidthMismatchError(f"query has {q.shape[0]} words, codebook {words.shape[1]}")
    return np.bitwise_count(words ^ q).sum(axis=1, dtype=np.int64)


@dataclass
class Codebook:
    """Immutable collection of packed bitcodes kept sorted by entry id."""

    n_bits: int
    entry_ids: np.ndarray  # uint64
    video_ids: np.ndarray  # uint64
    alphas: np.ndarray  # float32
    words: np.ndarray  # (M, n_words) uint64

    def __post_init__(self):
        self.entry_ids = np.asarray(self.entry_ids, dtype=np.uint64)
        self.video_ids = np.asarray(self.video_ids, dtype=np.uint64)
        self.alphas = np.asarray(self.alphas, dtype=np.float32)
        self.words = np.asarray(self.words, dtype=np.uint64).reshape(len(self.entry_ids), n_words(self.n_bits))
        if len(np.unique(self.entry_ids)) != len(self.entry_ids):
            raise ValueError("codebook entry ids must be unique")
        order = np.argsort(self.entry_ids, kind="stable")
        if np.any(order != np.arange(len(order))):
            self.entry_ids, self.video_ids = self.entry_ids[order], self.video_ids[order]
            self.alphas, self.words = self.alphas[order], self.words[order]
        for arr in (self.entry_ids, self.video_ids, self.alphas, self.words):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.entry_ids)

    @property
    def duplicated(self) -> bool:
        return bool(np.any(self.alphas != np.float32(1.0)))

    @property
    def n_alphas(self) -> int:
        return len(np.unique(self.alphas))

    @property
    def nbytes(self) -> int:
        return self.words.nbytes + self.entry_ids.nbytes + self.video_ids.nbytes + self.alphas.nbytes

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (self.n_bits == other.n_bits and np.array_equal(self.entry_ids, other.entry_ids)
                and np.array_equal(self.video_ids, other.video_ids)
                and np.array_equal(self.alphas, other.alphas) and np.array_equal(self.words, other.words))


def build_codebook(encoder: EncoderModel, database: Sequence[FeatureSequence],
                   alphas: Sequence[float] | None = None) -> Codebook:
    """Hash a database into a codebook.

    With ``alphas=None`` (plain mode) each video contributes its full-video
    bitcode.  Otherwise (duplicated mode) every video contributes one entry
    per observation level, the bitcode of its ``alpha``-prefix.  Entry ids are
    assigned consecutively in database order.
    """
    if not len(database):
        raise ValueError("cannot build a codebook from an empty database")
    grid = [1.0] if alphas is None else [float(a) for a in alphas]
    vids, tags, codes = [], [], []
    for seq in database:
        _, per_step, _ = encode_sequence(encoder, seq.clips)
        for a in grid:
            vids.append(seq.video_id)
            tags.append(a)
            codes.append(per_step[observed_length(len(seq), a) - 1])
    return Codebook(encoder.n_bits, np.arange(len(vids)), vids, tags, pack(np.array(codes)))


def save_codebook(cb: Codebook, path: str | Path) -> None:
    """``MSHC`` | u32 version | u32 n_bits | u64 count | per entry:
    u64 entry id, u64 video id, f32 alpha, packed words (all little-endian)."""
    rec = np.dtype([("entry", "<u8"), ("video", "<u8"), ("alpha", "<f4"),
                    ("words", "<u8", (n_words(cb.n_bits),))], align=False)
    table = np.empty(len(cb), dtype=rec)
    table["entry"], table["video"], table["alpha"], table["words"] = \
        cb.entry_ids, cb.video_ids, cb.alphas, cb.words
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC + struct.pack("<IIQ", CODEBOOK_VERSION, cb.n_bits, len(cb)))
        fh.write(table.tobytes())


def load_codebook(path: str | Path) -> Codebook:
    data = Path(path).read_bytes()
    head = struct.Struct("<4sIIQ")
    if len(data) < head.size:
        raise CodebookFormatError(f"{path}: truncated header")
    magic, version, n_bits, count = head.unpack_from(data)
    if magic != CODEBOOK_MAGIC:
        raise CodebookFormatError(f"{path}: bad magic {magic!r}")
    if version != CODEBOOK_VERSION:
        raise CodebookFormatError(f"{path}: unsupported version {version}")
    rec = np.dtype([("entry", "<u8"), ("video", "<u8"), ("alpha", "<f4"),
                    ("words", "<u8", (n_words(n_bits),))], align=False)
    if len(data) != head.size + count * rec.itemsize:
        raise CodebookFormatError(f"{path}: size does not match {count} entries")
    table = np.frombuffer(data, dtype=rec, offset=head.size, count=count)
    return Codebook(n_bits, table["entry"].copy(), table["video"].copy(),
                    table["alpha"].copy(), table["words"].copy())


# ---------------------------------------------------------------- ranking

@dataclass
class RetrievalResult:
    """Ranked hits; rows share an index across the arrays."""

    entry_ids: np.ndarray
    video_ids: np.ndarray
    alphas: np.ndarray
    distances: np.ndarray
    query_id: int | None = None

    def __len__(self) -> int:
        return len(self.entry_ids)

    def rows(self):
        return list(zip(self.video_ids.tolist(), self.alphas.tolist(), self.distances.tolist()))


def search(codebook: Codebook, q: np.ndarray, K: int, query_id: int | None = None) -> RetrievalResult:
    """Top-``K`` entries by Hamming distance; ties go to the lower entry id.

    Every entry is compared once; selection uses a partial partition so the
    cost beyond the scan is ``O(K log K)``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    q = np.asarray(q, dtype=np.uint64).reshape(-1)
    dist = hamming_many(codebook.words, q)
    M = len(dist)
    # entries are sorted by id, so position breaks ties in id order
    key = dist * M + np.arange(M, dtype=np.int64)
    if K < M:
        top = np.argpartition(key, K - 1)[:K]
        top = top[np.argsort(key[top])]
    else:
        top = np.argsort(key)
    return RetrievalResult(codebook.entry_ids[top], codebook.video_ids[top], codebook.alphas[top],
                           dist[top], query_id)


def purge_duplicates(r: RetrievalResult) -> RetrievalResult:
    """Keep only the best-ranked hit of each source video, preserving order."""
    _, first = np.unique(r.video_ids, return_index=True)
    keep = np.sort(first)
    return RetrievalResult(r.entry_ids[keep], r.video_ids[keep], r.alphas[keep], r.distances[keep],
                           r.query_id)


def search_distinct(codebook: Codebook, q: np.ndarray, K: int,
                    query_id: int | None = None) -> RetrievalResult:
    """Top-``K`` distinct source videos.

    Plain codebooks need no purge.  For duplicated ones a candidate list deep
    enough to hold ``K`` distinct videos (``K * n_alphas``) is ranked, purged
    and then cut to ``K``.
    """
    if not codebook.duplicated:
        return search(codebook, q, K, query_id)
    r = purge_duplicates(search(codebook, q, K * codebook.n_alphas, query_id))
    return RetrievalResult(r.entry_ids[:K], r.video_ids[:K], r.alphas[:K], r.distances[:K], query_id)


# -------------------------------------------------------------- streaming

class SessionError(RuntimeError):
    pass


_session_ids = itertools.count(1)


@dataclass
class StreamSession:
    """Incremental query state for one live video."""

    encoder: EncoderModel
    state: EncoderState
    session_id: int = field(default_factory=lambda: next(_session_ids))
    code: np.ndarray | None = None

    @property
    def clips_consumed(self) -> int:
        return self.state.t


def session_open(encoder: EncoderModel) -> StreamSession:
    return StreamSession(encoder, EncoderState.initial(encoder))


def session_push(s: StreamSession, f: np.ndarray) -> np.ndarray:
    """Feed one clip; returns the updated {-1,+1} bitcode."""
    s.state, s.code = encode_step(s.encoder, s.state, f)
    return s.code.copy()


def session_query(s: StreamSession, codebook: Codebook, K: int) -> RetrievalResult:
    """Search with the current bitcode; does not touch the session state."""
    if s.code is None:
        raise SessionError("query before the first clip was pushed")
    if codebook.n_bits != s.encoder.n_bits:
        raise WidthMismatchError(f"codebook has {codebook.n_bits}-bit codes, encoder {s.encoder.n_bits}")
    return search_distinct(codebook, pack(s.code), K, query_id=s.session_id)


# ------------------------------------------------------------- benchmark

@dataclass
class BenchReport:
    codebook_size: int
    n_bits: int
    k: int
    n_queries: int
    median_ms: float
    p99_ms: float
    mean_ms: float
    distance_computations: int  # per query

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def random_codebook(size: int, n_bits: int, seed: int = 0, n_alphas: int = 1) -> Codebook:
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, 2, (size, n_bits)) * 2 - 1
    return Codebook(n_bits, np.arange(size), np.arange(size) // n_alphas,
                    np.ones(size, np.float32), pack(codes))


def bench_search(codebook: Codebook, n_queries: int = 100, K: int = 20, seed: int = 0,
                 warmup: int = 3) -> BenchReport:
    """Time hash ranking (XOR, popcount, top-K) for random queries."""
    rng = np.random.default_rng(seed)
    queries = pack(rng.integers(0, 2, (n_queries + warmup, codebook.n_bits)) * 2 - 1)
    times = []
    for i, q in enumerate(queries):
        t0 = time.perf_counter()
        search(codebook, q, K)
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt * 1e3)
    times = np.array(times)
    return BenchReport(len(codebook), codebook.n_bits, K, n_queries, float(np.median(times)),
                       float(np.percentile(times, 99)), float(times.mean()), len(codebook))
