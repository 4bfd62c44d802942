"""IDX ingestion, synthetic federated data and client partitioning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .models import Batch
from .numkit import RngStream

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ClientData:
    train: Batch
    test: Batch


@dataclass(frozen=True)
class FederatedDataset:
    clients: tuple[ClientData, ...]
    global_test: Batch
    class_count: int

    @property
    def sizes(self) -> np.ndarray:
        """Train sample count per client (n_k)."""
        return np.array([len(c.train) for c in self.clients])

    @property
    def weights(self) -> np.ndarray:
        """n_k / n."""
        n = self.sizes
        return n / n.sum()

    @property
    def input_dim(self) -> int:
        return self.global_test.features.shape[1]


# --------------------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped) into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: file is {len(raw)} bytes, too short for the 4-byte magic at offset 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if expect_magic is not None and magic != expect_magic:
        raise IDXFormatError(f"{path}: bad magic number 0x{magic:08x} at offset 0, expected 0x{expect_magic:08x}")
    if magic >> 8 != 0x08:
        raise IDXFormatError(f"{path}: magic 0x{magic:08x} at offset 0 is not an unsigned-byte IDX file")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(shape, dtype=np.int64))
    have = len(raw) - header
    if have != expected:
        raise IDXFormatError(
            f"{path}: header declares shape {shape} = {expected} bytes of data starting at offset {header}, "
            f"but {have} bytes follow (file ends at offset {len(raw)})"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(shape)


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX files are supported")
    payload = struct.pack(f">I{arr.ndim}I", 0x0800 | arr.ndim, *arr.shape) + arr.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_idx(images_path, labels_path) -> Batch:
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise IDXFormatError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels "
            f"(counts read at offset 4 of each file)"
        )
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Batch(features, labels.astype(np.int64))


def subset_per_class(source: Batch, cap: int, s: RngStream) -> Batch:
    """Keep at most ``cap`` randomly chosen samples of every class."""
    rng = s.generator()
    keep = []
    for c in np.unique(source.labels):
        idx = np.flatnonzero(source.labels == c)
        if len(idx) > cap:
            idx = np.sort(rng.choice(idx, size=cap, replace=False))
        keep.append(idx)
    return source.take(np.sort(np.concatenate(keep)))


# --------------------------------------------------------------------- partitions


def _split(part: Batch, test_fraction: float, rng: np.random.Generator) -> ClientData:
    n = len(part)
    n_test = int(round(n * test_fraction))
    if n_test >= n:
        n_test = n - 1
    perm = rng.permutation(n)
    return ClientData(train=part.take(np.sort(perm[n_test:])), test=part.take(np.sort(perm[:n_test])))


def _assemble(parts, test_fraction, global_test, class_count, rng) -> FederatedDataset:
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must be in [0, 1)")
    clients = tuple(_split(p, test_fraction, rng) for p in parts)
    if global_test is None:
        tests = [c.test for c in clients if len(c.test)]
        global_test = Batch.concat(tests) if tests else Batch.concat(c.train for c in clients)
    return FederatedDataset(clients, global_test, class_count)


def partition_iid(
    source: Batch,
    N: int,
    s: RngStream,
    test_fraction: float = 0.0,
    global_test: Batch | None = None,
    class_count: int | None = None,
) -> FederatedDataset:
    """Shuffle and cut into N shards whose sizes differ by at most one."""
    if N < 1:
        raise ValueError("need at least one client")
    if N > len(source):
        raise ValueError(f"cannot split {len(source)} samples across {N} clients")
    rng = s.generator()
    perm = rng.permutation(len(source))
    parts = [source.take(np.sort(ix)) for ix in np.array_split(perm, N)]
    C = class_count if class_count is not None else int(source.labels.max()) + 1
    return _assemble(parts, test_fraction, global_test, C, rng)


def partition_by_classes(
    source: Batch,
    N: int,
    m: int,
    s: RngStream,
    test_fraction: float = 0.0,
    global_test: Batch | None = None,
    class_count: int | None = None,
) -> FederatedDataset:
    """Give every client samples from exactly ``m`` distinct classes.

    Classes are visited in a random order; client k takes the m consecutive
    classes starting at position k*m (cyclically). Each class's samples are
    shuffled and cut into one shard per client holding it, so the N*m shards
    are disjoint and, when N*m >= C, cover the whole source.
    """
    C = class_count if class_count is not None else int(source.labels.max()) + 1
    if N < 1:
        raise ValueError("need at least one client")
    if not 1 <= m <= C:
        raise ValueError(f"m must satisfy 1 <= m <= C={C}, got m={m}")
    rng = s.generator()
    order = rng.permutation(C)
    holders: dict[int, list[int]] = {int(c): [] for c in order}
    for k in range(N):
        for j in range(m):
            holders[int(order[(k * m + j) % C])].append(k)

    shards: list[list[np.ndarray]] = [[] for _ in range(N)]
    for c in range(C):
        owners = holders[c]
        if not owners:
            continue
        idx = np.flatnonzero(source.labels == c)
        if len(idx) < len(owners):
            raise ValueError(
                f"infeasible partition: class {c} has {len(idx)} samples but {len(owners)} shards "
                f"are required (N={N}, m={m})"
            )
        idx = rng.permutation(idx)
        for owner, piece in zip(owners, np.array_split(idx, len(owners))):
            shards[owner].append(piece)
    parts = [source.take(np.sort(np.concatenate(sh))) for sh in shards]
    return _assemble(parts, test_fraction, global_test, C, rng)


def gen_synthetic(
    alpha: float,
    beta: float,
    N: int,
    samples_per_client: tuple[int, int],
    d_in: int,
    C: int,
    s: RngStream,
    test_fraction: float = 0.2,
) -> FederatedDataset:
    """Synthetic(alpha, beta) federated classification data.

    A shared generating model ``(W0, b0)`` is perturbed per client by
    ``alpha * N(0, 1)`` noise; client feature means are
    ``beta * (B_k + N(0, 1))`` with ``B_k ~ N(0, 1)``. Features have diagonal
    covariance ``j^-1.2``. Labels are the argmax of the local linear map.
    ``alpha = beta = 0`` gives every client the same distribution.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be >= 0")
    lo, hi = samples_per_client
    if not 2 <= lo <= hi:
        raise ValueError("samples_per_client must be a range (lo, hi) with 2 <= lo <= hi")
    Ws, bs = _synthetic_models(alpha, N, d_in, C, s.child("models"))
    rng = s.child("samples").generator()
    sd = np.arange(1, d_in + 1, dtype=np.float64) ** -0.6
    parts = []
    for k in range(N):
        mean = beta * (rng.normal() + rng.normal(size=d_in))
        n = int(rng.integers(lo, hi + 1))
        X = mean + sd * rng.normal(size=(n, d_in))
        y = np.argmax(X @ Ws[k] + bs[k], axis=1)
        parts.append(Batch(X, y.astype(np.int64)))
    return _assemble(parts, test_fraction, None, C, rng)


def _synthetic_models(alpha, N, d_in, C, s: RngStream):
    rng = s.generator()
    W0 = rng.normal(size=(d_in, C))
    b0 = rng.normal(size=C)
    Ws = W0 + alpha * rng.normal(size=(N, d_in, C))
    bs = b0 + alpha * rng.normal(size=(N, C))
    return Ws, bs


def synthetic_generators(alpha: float, N: int, d_in: int, C: int, s: RngStream) -> np.ndarray:
    """The per-client generating weight matrices gen_synthetic uses for stream ``s``."""
    return _synthetic_models(alpha, N, d_in, C, s.child("models"))[0]


def gen_regression(
    N: int,
    samples_per_client: tuple[int, int],
    d_in: int,
    s: RngStream,
    heterogeneity: float = 1.0,
    noise: float = 0.1,
    test_fraction: float = 0.2,
) -> FederatedDataset:
    """Federated linear-regression data with client-specific true weights."""
    lo, hi = samples_per_client
    rng = s.generator()
    w0 = rng.normal(size=d_in)
    parts = []
    for _ in range(N):
        wk = w0 + heterogeneity * rng.normal(size=d_in)
        n = int(rng.integers(lo, hi + 1))
        X = rng.normal(size=(n, d_in)) + heterogeneity * rng.normal(size=d_in)
        y = X @ wk + noise * rng.normal(size=n)
        parts.append(Batch(X, y))
    return _assemble(parts, test_fraction, None, 1, rng)


# ------------------------------------------------------------------------ batches


def batches(partition: Batch, B: int, s: RngStream) -> list[Batch]:
    """One shuffled epoch of mini-batches; the last one may be short."""
    return list(_epochs(partition, B, s.generator(), 1))


def batch_stream(partition: Batch, B: int, s: RngStream) -> Iterator[Batch]:
    """Endless mini-batches, reshuffling at every epoch boundary."""
    return _epochs(partition, B, s.generator(), None)


def _epochs(partition: Batch, B: int, rng: np.random.Generator, epochs: int | None) -> Iterator[Batch]:
    if B < 1:
        raise ValueError("batch size must be >= 1")
    n = len(partition)
    if n == 0:
        raise ValueError("cannot draw batches from an empty partition")
    e = 0
    while epochs is None or e < epochs:
        perm = rng.permutation(n)
        for start in range(0, n, B):
            yield partition.take(perm[start : start + B])
        e += 1
