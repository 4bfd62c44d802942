"""Sparsify-and-ternarize (ST) codec with error-feedback residuals.

``st_compress`` keeps the k = max(floor(d*q), 1) largest-magnitude entries,
replaces each by its sign times the mean kept magnitude, and drops the rest.
Whatever compression throws away is returned by ``residual`` and folded into
the next update by the caller.

Passing ``q=None`` to :func:`compress` selects the identity codec, which sends
the dense vector unchanged.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

HEADER = struct.Struct("<IId")
RECORD = np.dtype([("index", "<u4"), ("sign", "u1")])


@dataclass(frozen=True)
class CompressedUpdate:
    dim: int
    mu: float
    pos_indices: np.ndarray
    neg_indices: np.ndarray

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        for ix in (self.pos_indices, self.neg_indices):
            if ix.size and (ix.min() < 0 or ix.max() >= self.dim):
                raise ValueError("index out of range")
        if np.intersect1d(self.pos_indices, self.neg_indices).size:
            raise ValueError("an index cannot be both positive and negative")

    @property
    def nnz(self) -> int:
        return len(self.pos_indices) + len(self.neg_indices)

    def __eq__(self, other):
        if not isinstance(other, CompressedUpdate):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.mu == other.mu
            and np.array_equal(self.pos_indices, other.pos_indices)
            and np.array_equal(self.neg_indices, other.neg_indices)
        )


@dataclass(frozen=True)
class DenseUpdate:
    """Uncompressed message produced by the identity codec."""

    values: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.values)


Update = CompressedUpdate | DenseUpdate


def keep_count(d: int, q: float) -> int:
    return max(int(math.floor(d * q)), 1)


def st_compress(T: np.ndarray, q: float) -> CompressedUpdate:
    if not 0 < q <= 1:
        raise ValueError(f"sparsity q must lie in (0, 1], got {q}")
    T = np.asarray(T, dtype=np.float64)
    d = T.size
    if T.ndim != 1 or d < 1:
        raise ValueError("st_compress needs a non-empty 1-D vector")
    k = min(keep_count(d, q), d)
    mag = np.abs(T)
    # Stable sort on -|T| puts equal magnitudes in index order: ties keep the lowest index.
    top = np.argsort(-mag, kind="stable")[:k]
    mu = float(mag[top].sum() / k)
    kept = T[top]
    pos = np.sort(top[kept > 0])
    neg = np.sort(top[kept < 0])
    if mu == 0.0:
        pos = neg = np.empty(0, dtype=np.int64)
    return CompressedUpdate(d, mu, pos.astype(np.int64), neg.astype(np.int64))


def compress(T: np.ndarray, q: float | None) -> Update:
    if q is None:
        return DenseUpdate(np.array(T, dtype=np.float64))
    return st_compress(T, q)


def decode(c: Update) -> np.ndarray:
    if isinstance(c, DenseUpdate):
        return c.values.copy()
    out = np.zeros(c.dim)
    out[c.pos_indices] = c.mu
    out[c.neg_indices] = -c.mu
    return out


def residual(delta: np.ndarray, c: Update) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (c.dim,):
        raise ValueError(f"dimension mismatch: delta {delta.shape} vs update dim {c.dim}")
    return delta - decode(c)


def index_bits(d: int) -> int:
    return math.ceil(math.log2(d)) + 1 if d > 1 else 1


def encoded_bits(c: Update) -> int:
    """Idealised payload size: 64-bit mu, 32-bit count, index + sign per entry.

    Dense messages cost 64 bits per coordinate.
    """
    if isinstance(c, DenseUpdate):
        return 64 * c.dim
    return 64 + 32 + c.nnz * index_bits(c.dim)


def to_wire(c: CompressedUpdate) -> bytes:
    """Little-endian [d:u32][k:u32][mu:f64] followed by k [index:u32][sign:u8] records."""
    idx = np.concatenate([c.pos_indices, c.neg_indices])
    order = np.argsort(idx, kind="stable")
    rec = np.empty(len(idx), dtype=RECORD)
    rec["index"] = idx[order]
    rec["sign"] = np.concatenate([np.ones(len(c.pos_indices)), np.zeros(len(c.neg_indices))])[order]
    return HEADER.pack(c.dim, len(idx), c.mu) + rec.tobytes()


def from_wire(buf: bytes) -> CompressedUpdate:
    if len(buf) < HEADER.size:
        raise ValueError(f"truncated header: {len(buf)} bytes, need {HEADER.size}")
    d, k, mu = HEADER.unpack_from(buf)
    body = len(buf) - HEADER.size
    if body != k * RECORD.itemsize:
        raise ValueError(f"header announces {k} records ({k * RECORD.itemsize} bytes) but {body} bytes follow")
    rec = np.frombuffer(buf, dtype=RECORD, offset=HEADER.size)
    idx = rec["index"].astype(np.int64)
    sign = rec["sign"]
    if np.any(sign > 1):
        raise ValueError("sign byte must be 0 (negative) or 1 (positive)")
    return CompressedUpdate(d, mu, np.sort(idx[sign == 1]), np.sort(idx[sign == 0]))


def wire_bits(c: CompressedUpdate) -> int:
    return 8 * (HEADER.size + c.nnz * RECORD.itemsize)
