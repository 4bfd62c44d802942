"""Offline decision rules and exact oracles on federated least-squares problems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuadraticProblem:
    """Federated ridge regression.

    Client k's risk is ``F_k(w) = ||X_k w - y_k||^2 / (2 n_k) + l2/2 ||w||^2``
    and the global objective is ``sum_k (n_k/n) F_k``.
    """

    X: tuple[np.ndarray, ...]
    y: tuple[np.ndarray, ...]
    l2: float = 0.0

    def __post_init__(self):
        if len(self.X) != len(self.y) or not self.X:
            raise ValueError("need matching, non-empty X and y lists")
        d = self.X[0].shape[1]
        for Xk, yk in zip(self.X, self.y):
            if Xk.ndim != 2 or Xk.shape[1] != d or len(yk) != len(Xk) or len(Xk) == 0:
                raise ValueError("every client needs a non-empty n_k x d design and n_k targets")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")

    @property
    def dim(self) -> int:
        return self.X[0].shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(yk) for yk in self.y])

    def members(self, exclude: int | None = None) -> list[int]:
        return [k for k in range(len(self.X)) if k != exclude]

    def local_hessian(self, k: int) -> np.ndarray:
        Xk = self.X[k]
        return Xk.T @ Xk / len(Xk) + self.l2 * np.eye(self.dim)

    def hessian(self, exclude: int | None = None) -> np.ndarray:
        ks = self.members(exclude)
        n = self.sizes[ks].sum()
        return sum(self.X[k].T @ self.X[k] for k in ks) / n + self.l2 * np.eye(self.dim)

    def gradient(self, w: np.ndarray, exclude: int | None = None) -> np.ndarray:
        ks = self.members(exclude)
        n = self.sizes[ks].sum()
        return sum(self.X[k].T @ (self.X[k] @ w - self.y[k]) for k in ks) / n + self.l2 * w

    def local_risk(self, k: int, w: np.ndarray) -> float:
        r = self.X[k] @ w - self.y[k]
        return float(r @ r / (2 * len(r)) + 0.5 * self.l2 * w @ w)

    def local_optimum(self, k: int) -> np.ndarray:
        """A minimizer of F_k (minimum-norm when F_k is not strictly convex)."""
        Xk, yk = self.X[k], self.y[k]
        A = Xk.T @ Xk / len(Xk) + self.l2 * np.eye(self.dim)
        return np.linalg.lstsq(A, Xk.T @ yk / len(Xk), rcond=None)[0]


def exact_optimum(p: QuadraticProblem, exclude: int | None = None) -> np.ndarray:
    """Closed-form minimizer of the global objective, optionally without one client."""
    ks = p.members(exclude)
    if not ks:
        raise ValueError("no clients left after exclusion")
    H = p.hessian(exclude)
    if np.linalg.eigvalsh(H)[0] <= 0:
        raise np.linalg.LinAlgError("global Hessian is singular; the optimum is not unique")
    n = p.sizes[ks].sum()
    b = sum(p.X[k].T @ p.y[k] for k in ks) / n
    return np.linalg.solve(H, b)


def smoothness(p: QuadraticProblem) -> float:
    """Uniform L: largest curvature of every client risk and of every global objective."""
    curv = [np.linalg.eigvalsh(p.local_hessian(k))[-1] for k in range(len(p.X))]
    curv.append(np.linalg.eigvalsh(p.hessian())[-1])
    curv += [np.linalg.eigvalsh(p.hessian(a))[-1] for a in range(len(p.X)) if len(p.X) > 1]
    return float(max(curv))


@dataclass(frozen=True)
class ShiftBound:
    lhs: float
    rhs: float
    mu: float
    L: float
    D_hat: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs


def shift_bound(p: QuadraticProblem, a: int, mode: str) -> ShiftBound:
    """Optimum displacement when client ``a`` leaves or joins, against its bound.

    ``leave``: the federation before the shift is all clients, after it all but
    ``a``. ``join``: before is all but ``a``, after is all clients. ``n`` counts
    samples before the shift. ``mu`` is the strong-convexity constant of the
    pre-shift global objective and ``L`` the uniform smoothness constant over
    all client risks and global objectives (see :func:`smoothness`).
    """
    if mode not in ("leave", "join"):
        raise ValueError("mode must be 'leave' or 'join'")
    if not 0 <= a < len(p.X):
        raise ValueError(f"no client {a}")
    if len(p.X) < 2:
        raise ValueError("a shift needs at least two clients")
    w_all = exact_optimum(p)
    w_wo = exact_optimum(p, exclude=a)
    if mode == "leave":
        before, after, pre_exclude = w_all, w_wo, None
        n = p.sizes.sum()
        denom = n
    else:
        before, after, pre_exclude = w_wo, w_all, a
        n = p.sizes.sum() - p.sizes[a]
        denom = n + p.sizes[a]
    mu = float(np.linalg.eigvalsh(p.hessian(pre_exclude))[0])
    L = smoothness(p)
    n_a = p.sizes[a]
    D_hat = max(p.local_risk(a, after) - p.local_risk(a, p.local_optimum(a)), 0.0)
    diff = before - after
    lhs = float(diff @ diff)
    rhs = 8.0 * L * n_a**2 * D_hat / (mu**2 * denom**2)
    return ShiftBound(lhs, rhs, mu, L, D_hat)


def random_problem(rng: np.random.Generator, d: int, N: int, n_range=(5, 40), l2: float = 0.0,
                   heterogeneity: float = 1.0, noise: float = 0.1) -> QuadraticProblem:
    """Random instance with client-specific true weights and feature scales."""
    w0 = rng.normal(size=d)
    X, y = [], []
    for _ in range(N):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        scale = np.exp(heterogeneity * rng.normal(size=d) / 2)
        Xk = rng.normal(size=(n, d)) * scale + heterogeneity * rng.normal(size=d)
        wk = w0 + heterogeneity * rng.normal(size=d)
        X.append(Xk)
        y.append(Xk @ wk + noise * rng.normal(size=n))
    return QuadraticProblem(tuple(X), tuple(y), l2)


def should_abandon(y_a: float, T: int, E: int, c_ratio: float) -> bool:
    """Drop an intermittently inactive client when ``y_a > c_ratio / (T E)``."""
    if not 0 <= y_a <= 1:
        raise ValueError("y_a must lie in [0, 1]")
    if c_ratio <= 0:
        raise ValueError("c_ratio must be > 0")
    if T < 1 or E < 1:
        raise ValueError("T and E must be >= 1")
    return y_a > c_ratio / (T * E)


def from_federated(data, l2: float = 0.0) -> QuadraticProblem:
    """Least-squares problem matching a linear-regression model on ``data``.

    A column of ones is appended so the model's bias becomes the last weight.
    """
    X = tuple(np.hstack([c.train.features, np.ones((len(c.train), 1))]) for c in data.clients)
    y = tuple(np.asarray(c.train.labels, dtype=np.float64) for c in data.clients)
    return QuadraticProblem(X, y, l2)
