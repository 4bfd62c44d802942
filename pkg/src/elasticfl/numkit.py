"""Vector helpers and stream-keyed random number generation.

Parameter vectors are plain 1-D ``float64`` numpy arrays. Randomness is drawn
from Philox generators whose key is derived from ``(root_seed, client_id,
round, purpose)``, so a draw never depends on which other draws happened
before it or on the order clients are simulated in.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

ParamVector = np.ndarray

# Client id used for streams that belong to the server / the experiment as a whole.
GLOBAL = -1


def as_vector(values) -> ParamVector:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    return v


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def scale_add(a, b, c: float) -> ParamVector:
    """Return ``a + c * b``."""
    a, b = as_vector(a), as_vector(b)
    _check_dims(a, b)
    return a + c * b


def hadamard(a, b) -> ParamVector:
    a, b = as_vector(a), as_vector(b)
    _check_dims(a, b)
    return a * b


def check_finite(v: np.ndarray, what: str = "vector") -> None:
    if not np.all(np.isfinite(v)):
        bad = np.flatnonzero(~np.isfinite(v))
        raise FloatingPointError(f"{what} has {bad.size} non-finite entries (first at index {bad[0]})")


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """Key of an independent random stream.

    Every call to :meth:`generator` starts the stream from the beginning, so the
    same key always reproduces the same sample sequence.
    """

    root_seed: int
    client_id: int = GLOBAL
    round: int = 0
    purpose: str = ""

    def generator(self) -> np.random.Generator:
        # Negative ids (the GLOBAL client) are shifted into the unsigned range.
        key = (self.client_id + 1, self.round + 1, _purpose_key(self.purpose))
        if min(key) < 0:
            raise ValueError(f"stream key must be >= -1 per field, got {self}")
        ss = np.random.SeedSequence(entropy=self.root_seed & (2**64 - 1), spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))

    def child(self, purpose: str) -> "RngStream":
        return RngStream(self.root_seed, self.client_id, self.round, f"{self.purpose}/{purpose}")


def stream(root_seed: int, client_id: int = GLOBAL, round: int = 0, purpose: str = "") -> RngStream:
    return RngStream(int(root_seed), int(client_id), int(round), purpose)


def gaussian(s: RngStream, n: int, mean: float = 0.0, sd: float = 1.0) -> np.ndarray:
    if sd < 0:
        raise ValueError(f"standard deviation must be >= 0, got {sd}")
    if sd == 0:
        return np.full(n, float(mean))
    return s.generator().normal(mean, sd, size=n)
