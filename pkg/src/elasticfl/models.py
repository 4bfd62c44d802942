"""Small differentiable models with hand-written gradients.

All parameters of a model live in one flat vector. Layout per kind:

* ``linear-regression``: ``[w (d_in), b]``
* ``softmax-regression``: ``[W (d_in x C, row-major), b (C)]``
* ``mlp-1hidden``: ``[W1 (d_in x h), b1 (h), W2 (h x C), b2 (C)]``

The loss is the mean per-sample negative log-likelihood (half squared error for
regression, cross-entropy for classification) plus ``l2/2 * ||w||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import RngStream

KINDS = ("linear-regression", "softmax-regression", "mlp-1hidden")
ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    classes: int = 1
    hidden: int = 0
    activation: str = "tanh"
    l2: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.kind == "linear-regression":
            if self.classes != 1:
                raise ValueError("linear-regression requires classes == 1")
        elif self.classes < 2:
            raise ValueError(f"{self.kind} requires classes >= 2")
        if self.kind == "mlp-1hidden":
            if self.hidden < 1:
                raise ValueError("mlp-1hidden requires hidden >= 1")
            if self.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dim(self) -> int:
        d, c, h = self.input_dim, self.classes, self.hidden
        if self.kind == "linear-regression":
            return d + 1
        if self.kind == "softmax-regression":
            return d * c + c
        return d * h + h + h * c + c

    @property
    def is_classifier(self) -> bool:
        return self.kind != "linear-regression"


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError(f"features must be a matrix, got shape {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Batch":
        return Batch(self.features[idx], self.labels[idx])

    @staticmethod
    def concat(batches) -> "Batch":
        batches = list(batches)
        return Batch(np.concatenate([b.features for b in batches]), np.concatenate([b.labels for b in batches]))


def _unpack(spec: ModelSpec, w: np.ndarray):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.dim,):
        raise ValueError(f"parameter vector has shape {w.shape}, model {spec.kind} needs ({spec.dim},)")
    d, c, h = spec.input_dim, spec.classes, spec.hidden
    if spec.kind == "linear-regression":
        return w[:d], w[d]
    if spec.kind == "softmax-regression":
        return w[: d * c].reshape(d, c), w[d * c :]
    o = 0
    W1 = w[o : o + d * h].reshape(d, h); o += d * h
    b1 = w[o : o + h]; o += h
    W2 = w[o : o + h * c].reshape(h, c); o += h * c
    return W1, b1, W2, w[o:]


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if len(batch) < 1:
        raise ValueError("empty batch")
    if batch.features.shape[1] != spec.input_dim:
        raise ValueError(f"batch has {batch.features.shape[1]} features, model expects {spec.input_dim}")
    if spec.is_classifier:
        y = batch.labels
        if y.min() < 0 or y.max() >= spec.classes:
            raise ValueError(f"labels must lie in [0, {spec.classes})")


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _act(spec: ModelSpec, a: np.ndarray):
    """Activation value and its derivative."""
    if spec.activation == "tanh":
        t = np.tanh(a)
        return t, 1.0 - t * t
    return np.maximum(a, 0.0), (a > 0).astype(np.float64)


def logits(spec: ModelSpec, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Model outputs: predictions (regression) or class scores."""
    p = _unpack(spec, w)
    if spec.kind == "linear-regression":
        return X @ p[0] + p[1]
    if spec.kind == "softmax-regression":
        return X @ p[0] + p[1]
    W1, b1, W2, b2 = p
    hid, _ = _act(spec, X @ W1 + b1)
    return hid @ W2 + b2


def _sample_terms(spec: ModelSpec, w: np.ndarray, batch: Batch):
    """Per-sample NLL values and the factors of the per-sample gradients.

    Every per-sample gradient block is an outer product ``input_i (x) delta_i``
    (or just ``delta_i`` for biases); returning the factors lets the batch
    gradient and the squared-gradient (Fisher) statistic share one pass.
    """
    _check_batch(spec, batch)
    X = batch.features
    p = _unpack(spec, w)
    if spec.kind == "linear-regression":
        r = X @ p[0] + p[1] - batch.labels
        return 0.5 * r * r, [(X, r[:, None]), (None, r[:, None])]
    y = batch.labels.astype(np.intp)
    n = len(y)
    if spec.kind == "softmax-regression":
        z = X @ p[0] + p[1]
        nll = -_log_softmax(z)[np.arange(n), y]
        dz = _softmax(z)
        dz[np.arange(n), y] -= 1.0
        return nll, [(X, dz), (None, dz)]
    W1, b1, W2, b2 = p
    hid, dact = _act(spec, X @ W1 + b1)
    z = hid @ W2 + b2
    nll = -_log_softmax(z)[np.arange(n), y]
    dz = _softmax(z)
    dz[np.arange(n), y] -= 1.0
    da = (dz @ W2.T) * dact
    return nll, [(X, da), (None, da), (hid, dz), (None, dz)]


def loss(spec: ModelSpec, w: np.ndarray, batch: Batch) -> float:
    nll, _ = _sample_terms(spec, w, batch)
    return float(nll.mean() + 0.5 * spec.l2 * np.dot(w, w))


def grad(spec: ModelSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    _, terms = _sample_terms(spec, w, batch)
    n = len(batch)
    parts = [(delta.sum(axis=0) if inp is None else inp.T @ delta).ravel() / n for inp, delta in terms]
    g = np.concatenate(parts)
    if spec.l2:
        g += spec.l2 * np.asarray(w, dtype=np.float64)
    return g


def fisher_diag(spec: ModelSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    """Empirical Fisher diagonal: mean of squared per-sample NLL gradients.

    The l2 penalty is a prior, not part of the likelihood, so it is excluded.
    """
    _, terms = _sample_terms(spec, w, batch)
    n = len(batch)
    # (x_i d_i)^2 summed over i == (x^2)^T (d^2)
    parts = [
        ((delta * delta).sum(axis=0) if inp is None else (inp * inp).T @ (delta * delta)).ravel() / n
        for inp, delta in terms
    ]
    return np.concatenate(parts)


def per_sample_grads(spec: ModelSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    """Matrix of per-sample NLL gradients, one row per sample (no l2 term)."""
    _, terms = _sample_terms(spec, w, batch)
    n = len(batch)
    rows = [
        delta if inp is None else (inp[:, :, None] * delta[:, None, :]).reshape(n, -1)
        for inp, delta in terms
    ]
    return np.concatenate(rows, axis=1)


def predict(spec: ModelSpec, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    if not spec.is_classifier:
        raise ValueError("predict() needs a classification model")
    # np.argmax returns the first maximum, i.e. the lowest class index on ties.
    return np.argmax(logits(spec, w, X), axis=1)


def accuracy(spec: ModelSpec, w: np.ndarray, data: Batch) -> float:
    if not spec.is_classifier:
        raise ValueError(f"accuracy is undefined for {spec.kind}")
    _check_batch(spec, data)
    return float(np.mean(predict(spec, w, data.features) == data.labels))


def init_params(spec: ModelSpec, s: RngStream | None = None) -> np.ndarray:
    """Zeros for the convex models; scaled Gaussian weights for the MLP."""
    w = np.zeros(spec.dim)
    if spec.kind != "mlp-1hidden":
        return w
    if s is None:
        raise ValueError("mlp-1hidden initialisation needs a random stream")
    rng = s.generator()
    d, c, h = spec.input_dim, spec.classes, spec.hidden
    W1, _, W2, _ = _unpack(spec, w)
    W1[...] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h))
    W2[...] = rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, c))
    return w
