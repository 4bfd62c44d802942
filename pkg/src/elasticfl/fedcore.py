"""Elastic federated rounds with compressed, error-feedback communication.

One round:

1. every connected client applies the previous round's broadcast to its copy
   of the synchronized model;
2. clients that do work run ``s`` local SGD steps on their loss plus the
   Fisher-weighted elastic penalty, add their stored residual to the movement,
   compress the sum, keep what compression dropped as the new residual, and
   report the compressed update with fresh Fisher statistics ``(u, v)``;
3. the server adds its own residual to the coefficient-weighted sum of the
   decoded client updates, compresses that, keeps the remainder, and moves the
   synchronized model by the decoded broadcast.

``fedavg`` and ``fedprox`` reuse the same machinery without the elastic term.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import models
from .compress import Update, compress, decode, encoded_bits
from .data import ClientData, FederatedDataset, batch_stream
from .models import Batch, ModelSpec
from .numkit import GLOBAL, RngStream, check_finite, stream

PARTICIPATION_KINDS = ("full", "inactive", "incomplete", "depart", "arrive")
ALGORITHMS = ("efl", "fedavg", "fedprox")


@dataclass(frozen=True)
class ParticipationSpec:
    """How many local steps a client completes per round.

    ``inactive`` and ``incomplete`` clients skip a round with probability ``y``.
    Otherwise an ``incomplete`` client draws ``s`` from ``s_probs`` over
    ``1..E`` (uniform when omitted). ``depart`` clients work fully up to and
    including round ``at`` and never again; ``arrive`` clients start at round
    ``at``. Rounds are numbered from 1.
    """

    kind: str = "full"
    y: float = 0.0
    s_probs: tuple[float, ...] | None = None
    at: int = 0

    def __post_init__(self):
        if self.kind not in PARTICIPATION_KINDS:
            raise ValueError(f"unknown participation kind {self.kind!r}")
        if not 0 <= self.y <= 1:
            raise ValueError("inactivity probability y must lie in [0, 1]")
        if self.s_probs is not None:
            p = np.asarray(self.s_probs, dtype=float)
            if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
                raise ValueError("s_probs must be a probability vector over 1..E")
        if self.at < 0:
            raise ValueError("at must be >= 0")

    def departed(self, rnd: int) -> bool:
        return self.kind == "depart" and rnd > self.at

    def arrived(self, rnd: int) -> bool:
        return self.kind != "arrive" or rnd >= self.at


@dataclass(frozen=True)
class LRSchedule:
    kind: str = "constant"
    eta0: float = 0.1
    gamma0: float = 10.0

    def __post_init__(self):
        if self.kind not in ("constant", "inverse-time"):
            raise ValueError(f"unknown learning-rate schedule {self.kind!r}")
        if self.eta0 <= 0 or self.gamma0 <= 0:
            raise ValueError("eta0 and gamma0 must be positive")


def lr(schedule: LRSchedule, tau: int) -> float:
    """Step size for 0-based round index ``tau``."""
    if tau < 0:
        raise ValueError("round index must be >= 0")
    if schedule.kind == "constant":
        return schedule.eta0
    return schedule.eta0 * schedule.gamma0 / (tau + schedule.gamma0)


@dataclass(frozen=True)
class HyperParams:
    T: int = 100
    E: int = 5
    B: int = 32
    lam: float = 0.0
    lr: LRSchedule = LRSchedule()
    theta: float | None = None
    q_up: float | None = 0.05
    q_down: float | None = 0.05
    algorithm: str = "efl"
    mu_prox: float = 0.0
    coeff: str = "adaptive"
    fisher_batch: int = 64

    def __post_init__(self):
        errors = []
        if self.T < 0:
            errors.append("T must be >= 0")
        if self.E < 1:
            errors.append("E must be >= 1")
        if self.B < 1:
            errors.append("B must be >= 1")
        if not self.lam >= 0:
            errors.append("lam must be >= 0")
        if self.theta is not None and not self.theta >= 1:
            errors.append("theta must be >= 1")
        for name in ("q_up", "q_down"):
            q = getattr(self, name)
            if q is not None and not 0 < q <= 1:
                errors.append(f"{name} must lie in (0, 1] or be None")
        if self.algorithm not in ALGORITHMS:
            errors.append(f"algorithm must be one of {ALGORITHMS}")
        if self.mu_prox < 0:
            errors.append("mu_prox must be >= 0")
        if self.coeff not in ("static", "adaptive"):
            errors.append("coeff must be 'static' or 'adaptive'")
        if self.fisher_batch < 1:
            errors.append("fisher_batch must be >= 1")
        if errors:
            raise ValueError("; ".join(errors))


@dataclass
class ClientState:
    id: int
    p: float
    w: np.ndarray
    R: np.ndarray
    data: ClientData
    participation: ParticipationSpec = ParticipationSpec()
    u: np.ndarray | None = None
    v: np.ndarray | None = None

    def receive(self, broadcast: np.ndarray | None) -> None:
        if broadcast is not None:
            self.w = self.w + broadcast


@dataclass
class ServerState:
    w_sync: np.ndarray
    R_G: np.ndarray
    U_sum: np.ndarray
    V_sum: np.ndarray
    round: int = 0
    last_broadcast: np.ndarray | None = None
    fisher: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


@dataclass(frozen=True)
class ClientReport:
    client: int
    s: int
    update: Update
    u: np.ndarray | None
    v: np.ndarray | None
    movement: np.ndarray


@dataclass(frozen=True)
class RoundTrace:
    """Everything exchanged in one round, kept for audits."""

    round: int
    s: np.ndarray
    reports: tuple[ClientReport, ...]
    coeffs: dict[int, float]
    aggregate: np.ndarray | None
    broadcast: Update | None
    bits_up: int
    bits_down: int


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    train_loss: float
    test_acc_global: float
    test_acc_mean: float
    test_acc_std: float
    bits_up: int
    bits_down: int
    participants: int
    mean_s: float
    wall_ms: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ------------------------------------------------------------------- gradients


def elastic_grad(w: np.ndarray, lam: float, U_sum: np.ndarray, V_sum: np.ndarray) -> np.ndarray:
    """Gradient of ``lam/2 w'diag(U)w - lam w'V``, i.e. ``lam (U*w - V)``."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if not (w.shape == U_sum.shape == V_sum.shape):
        raise ValueError(f"dimension mismatch: w {w.shape}, U {U_sum.shape}, V {V_sum.shape}")
    if lam == 0:
        return np.zeros_like(w)
    return lam * (U_sum * w - V_sum)


def local_grad(
    spec: ModelSpec,
    w: np.ndarray,
    batch: Batch,
    hp: HyperParams,
    U_sum: np.ndarray | None = None,
    V_sum: np.ndarray | None = None,
    anchor: np.ndarray | None = None,
) -> np.ndarray:
    """Stochastic gradient of the client's local objective for ``hp.algorithm``.

    ``anchor`` is the synchronized model the round started from (FedProx only).
    """
    g = models.grad(spec, w, batch)
    if hp.algorithm == "efl":
        if hp.lam and U_sum is not None:
            g += elastic_grad(w, hp.lam, U_sum, V_sum)
    elif hp.algorithm == "fedprox" and hp.mu_prox:
        g += hp.mu_prox * (w - anchor)
    return g


def elastic_objective(
    spec: ModelSpec, w: np.ndarray, batch: Batch, lam: float, U_sum: np.ndarray, V_sum: np.ndarray
) -> float:
    """Local loss plus the elastic term, up to the constant that does not depend on ``w``."""
    return models.loss(spec, w, batch) + 0.5 * lam * float(w @ (U_sum * w)) - lam * float(w @ V_sum)


# ---------------------------------------------------------------- participation


def sample_s(specs: Sequence[ParticipationSpec], rnd: int, E: int, seed: int) -> np.ndarray:
    """Local step counts for round ``rnd`` (1-based); 0 means no work."""
    out = np.zeros(len(specs), dtype=np.int64)
    for k, ps in enumerate(specs):
        if ps.departed(rnd) or not ps.arrived(rnd):
            continue
        if ps.kind in ("full", "depart", "arrive"):
            out[k] = E
            continue
        rng = stream(seed, k, rnd, "participation").generator()
        if ps.y and rng.random() < ps.y:
            continue
        if ps.kind == "inactive":
            out[k] = E
        else:
            probs = np.full(E, 1.0 / E) if ps.s_probs is None else np.asarray(ps.s_probs, dtype=float)
            if probs.size != E:
                raise ValueError(f"client {k}: s_probs has {probs.size} entries, expected E={E}")
            out[k] = 1 + int(rng.choice(E, p=probs))
    return out


def aggregation_coeff(scheme: str, p_k: float, s: int, E: int, theta: float | None = None) -> float:
    if s < 1:
        raise ValueError("aggregation coefficient is undefined for s = 0")
    if scheme == "static":
        return p_k
    if scheme != "adaptive":
        raise ValueError(f"unknown coefficient scheme {scheme!r}")
    c = E * p_k / s
    return c if theta is None else min(c, theta * p_k)


# ------------------------------------------------------------------ protocol


def client_update(
    state: ClientState,
    broadcast: np.ndarray | None,
    U_sum: np.ndarray,
    V_sum: np.ndarray,
    s: int,
    hp: HyperParams,
    spec: ModelSpec,
    tau: int,
    seed: int,
) -> ClientReport:
    """Run ``s`` local steps and emit the compressed update; mutates ``state``."""
    if s < 1:
        raise ValueError("client_update needs s >= 1; inactive clients are skipped")
    state.receive(broadcast)
    base = state.w
    eta = lr(hp.lr, tau)
    key = stream(seed, state.id, tau, "client")
    it = batch_stream(state.data.train, hp.B, key.child("batches"))
    w = base.copy()
    for _ in range(s):
        w -= eta * local_grad(spec, w, next(it), hp, U_sum, V_sum, anchor=base)
    movement = w - base
    delta = state.R + movement
    update = compress(delta, hp.q_up)
    state.R = delta - decode(update)
    u = v = None
    if hp.algorithm == "efl":
        fb = _fisher_batch(state.data.train, hp.fisher_batch, key.child("fisher"))
        u = models.fisher_diag(spec, w, fb)
        v = u * w
        state.u, state.v = u, v
    return ClientReport(state.id, s, update, u, v, movement)


def _fisher_batch(train: Batch, size: int, s: RngStream) -> Batch:
    if size >= len(train):
        return train
    return train.take(np.sort(s.generator().choice(len(train), size=size, replace=False)))


def server_round(
    server: ServerState,
    clients: Sequence[ClientState],
    spec: ModelSpec,
    hp: HyperParams,
    seed: int,
) -> RoundTrace:
    """Advance the federation by one round; mutates server and clients."""
    tau = server.round
    rnd = tau + 1
    specs = [c.participation for c in clients]
    s = sample_s(specs, rnd, hp.E, seed)
    incoming = server.last_broadcast

    reports = []
    for c in clients:
        k = c.id
        if specs[k].departed(rnd):
            server.fisher.pop(k, None)
            continue
        works = s[k] >= 1 and not (hp.algorithm == "fedavg" and s[k] < hp.E)
        if works:
            reports.append(client_update(c, incoming, server.U_sum, server.V_sum, int(s[k]), hp, spec, tau, seed))
        else:
            c.receive(incoming)

    bits_up = sum(encoded_bits(r.update) for r in reports)
    coeffs = {}
    aggregate = broadcast = None
    bits_down = 0
    if reports:
        scheme = "static" if hp.algorithm == "fedavg" else hp.coeff
        aggregate = np.zeros_like(server.w_sync)
        for r in reports:
            coeffs[r.client] = aggregation_coeff(scheme, clients[r.client].p, r.s, hp.E, hp.theta)
            aggregate += coeffs[r.client] * decode(r.update)
        delta_G = server.R_G + aggregate
        broadcast = compress(delta_G, hp.q_down)
        step = decode(broadcast)
        server.R_G = delta_G - step
        server.w_sync = server.w_sync + step
        server.last_broadcast = step
        # one copy of the broadcast goes to every client still connected
        receivers = sum(1 for c in clients if not specs[c.id].departed(rnd))
        bits_down = receivers * encoded_bits(broadcast)
        for r in reports:
            if r.u is not None:
                server.fisher[r.client] = (r.u, r.v)
    else:
        server.last_broadcast = None

    if server.fisher:
        keys = sorted(server.fisher)
        server.U_sum = np.sum([server.fisher[k][0] for k in keys], axis=0)
        server.V_sum = np.sum([server.fisher[k][1] for k in keys], axis=0)
    else:
        server.U_sum = np.zeros_like(server.w_sync)
        server.V_sum = np.zeros_like(server.w_sync)
    server.round += 1
    return RoundTrace(rnd, s, tuple(reports), coeffs, aggregate, broadcast, bits_up, bits_down)


# ------------------------------------------------------------------ simulation


@dataclass(frozen=True)
class RunConfig:
    spec: ModelSpec
    data: FederatedDataset
    hp: HyperParams
    participation: ParticipationSpec | tuple[ParticipationSpec, ...] = ParticipationSpec()
    seed: int = 0
    eval_every: int = 1
    debug: bool = False
    record_wall_time: bool = False
    p: tuple[float, ...] | None = None


class Simulation:
    """Stateful driver around :func:`server_round` with evaluation and audits."""

    def __init__(self, cfg: RunConfig):
        if cfg.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if cfg.data.input_dim != cfg.spec.input_dim:
            raise ValueError(f"data has {cfg.data.input_dim} features, model expects {cfg.spec.input_dim}")
        N = len(cfg.data.clients)
        part = cfg.participation
        part = (part,) * N if isinstance(part, ParticipationSpec) else tuple(part)
        if len(part) != N:
            raise ValueError(f"{len(part)} participation specs for {N} clients")
        for ps in part:
            if ps.kind in ("depart", "arrive") and ps.at > cfg.hp.T:
                raise ValueError(f"participation round {ps.at} exceeds T={cfg.hp.T}")
        p = np.asarray(cfg.p if cfg.p is not None else cfg.data.weights, dtype=float)
        if p.shape != (N,):
            raise ValueError("need one base weight per client")
        self.cfg = cfg
        self.spec = cfg.spec
        self.hp = cfg.hp
        w0 = models.init_params(cfg.spec, stream(cfg.seed, GLOBAL, 0, "init"))
        d = w0.size
        self.server = ServerState(w0.copy(), np.zeros(d), np.zeros(d), np.zeros(d))
        self.clients = [
            ClientState(k, float(p[k]), w0.copy(), np.zeros(d), cfg.data.clients[k], part[k]) for k in range(N)
        ]
        self._train_all = Batch.concat(c.train for c in cfg.data.clients)
        self.last_trace: RoundTrace | None = None
        if cfg.debug:
            self._up_raw = np.zeros((N, d))
            self._up_sent = np.zeros((N, d))
            self._down_raw = np.zeros(d)
            self._down_sent = np.zeros(d)

    def step(self) -> RoundTrace:
        trace = server_round(self.server, self.clients, self.spec, self.hp, self.cfg.seed)
        self.last_trace = trace
        if self.cfg.debug:
            self._audit(trace)
        return trace

    def _audit(self, trace: RoundTrace) -> None:
        srv = self.server
        check_finite(srv.w_sync, "w_sync")
        for r in trace.reports:
            self._up_raw[r.client] += r.movement
            self._up_sent[r.client] += decode(r.update)
            gap = np.abs(self._up_sent[r.client] + self.clients[r.client].R - self._up_raw[r.client]).max()
            if gap > 1e-12:
                raise AssertionError(f"round {trace.round}: client {r.client} upstream telescoping off by {gap:.3e}")
        if trace.aggregate is not None:
            self._down_raw += trace.aggregate
            self._down_sent += decode(trace.broadcast)
        gap = np.abs(self._down_sent + srv.R_G - self._down_raw).max()
        if gap > 1e-12:
            raise AssertionError(f"round {trace.round}: downstream telescoping off by {gap:.3e}")
        for c in self.clients:
            if c.participation.departed(trace.round):
                continue
            synced = c.w if srv.last_broadcast is None else c.w + srv.last_broadcast
            if not np.array_equal(synced, srv.w_sync):
                raise AssertionError(f"round {trace.round}: client {c.id} is out of sync with the server")

    def evaluate(self, trace: RoundTrace, wall_ms: float = 0.0) -> RoundMetrics:
        spec, w = self.spec, self.server.w_sync
        train_loss = models.loss(spec, w, self._train_all)
        if spec.is_classifier:
            acc_global = models.accuracy(spec, w, self.cfg.data.global_test)
            accs = [models.accuracy(spec, w, c.data.test) for c in self.clients if len(c.data.test)]
            acc_mean = float(np.mean(accs)) if accs else math.nan
            acc_std = float(np.std(accs)) if accs else math.nan
        else:
            acc_global = acc_mean = acc_std = math.nan
        n_part = len(trace.reports)
        mean_s = float(np.mean([r.s for r in trace.reports])) if n_part else 0.0
        return RoundMetrics(
            trace.round, train_loss, acc_global, acc_mean, acc_std,
            trace.bits_up, trace.bits_down, n_part, mean_s, wall_ms,
        )

    def run(self) -> list[RoundMetrics]:
        out = []
        T, every = self.hp.T, self.cfg.eval_every
        for _ in range(T):
            t0 = time.perf_counter()
            trace = self.step()
            if trace.round % every == 0 or trace.round == T:
                wall = (time.perf_counter() - t0) * 1e3 if self.cfg.record_wall_time else 0.0
                out.append(self.evaluate(trace, wall))
        return out


def run_rounds(cfg: RunConfig) -> list[RoundMetrics]:
    return Simulation(cfg).run()
