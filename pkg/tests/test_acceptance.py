"""Acceptance suite. Each test carries a ``criterion`` marker; the terminal
summary prints one PASS/FAIL line per criterion."""

import math
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

from elasticfl import cli, data as D, models
from elasticfl.compress import decode, encoded_bits, keep_count, residual, st_compress
from elasticfl.fedcore import (
    HyperParams,
    LRSchedule,
    ParticipationSpec,
    RunConfig,
    Simulation,
    elastic_objective,
    local_grad,
    run_rounds,
)
from elasticfl.models import ModelSpec
from elasticfl.numkit import stream
from elasticfl.policies import exact_optimum, from_federated, random_problem, shift_bound

from conftest import MODEL_SPECS, central_diff, fd_rel_error, random_batch
from reference import fedavg_reference

criterion = pytest.mark.criterion
ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture(scope="module")
def synth10():
    return D.gen_synthetic(0.5, 0.5, 10, (40, 80), 8, 4, stream(11))


SPEC10 = ModelSpec("softmax-regression", 8, 4, l2=0.01)


# ------------------------------------------------------------------ 1. codec


def sort_oracle(T, k):
    """Top-k by a full lexicographic sort on (-|T_i|, i)."""
    order = np.lexsort((np.arange(T.size), -np.abs(T)))
    return np.sort(order[:k])


@criterion("AC1 codec correctness")
def test_codec_correctness():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    for i in range(10_000):
        d = int(rng.integers(1, 4097))
        q = 1.0 - rng.random()  # (0, 1]
        if i % 4 == 0:  # heavy ties and exact zeros
            T = rng.integers(-3, 4, size=d).astype(float)
        else:
            T = rng.normal(size=d) * 10 ** rng.uniform(-3, 3)
        c = st_compress(T, q)
        k = keep_count(d, q)
        top = sort_oracle(T, k)
        top_nz = top[T[top] != 0]
        np.testing.assert_array_equal(np.sort(np.concatenate([c.pos_indices, c.neg_indices])), top_nz)
        assert np.all(T[c.pos_indices] > 0) and np.all(T[c.neg_indices] < 0)
        mass = float(np.abs(T[top]).sum())
        assert abs(c.mu * k - mass) <= 1e-12 * max(1.0, mass)
        scale = max(1.0, float(np.abs(T).max()))
        assert np.abs(decode(c) + residual(T, c) - T).max() <= 1e-12 * scale
    elapsed = time.perf_counter() - t0
    print(f"AC1: 10000 instances in {elapsed:.2f} s")
    assert elapsed < 10


# ------------------------------------------------------------- 2. telescoping


@criterion("AC2 residual telescoping")
def test_residual_telescoping(synth10):
    hp = HyperParams(T=50, B=16, lam=0.1, q_up=0.05, q_down=0.05, lr=LRSchedule("constant", 0.2))
    sim = Simulation(RunConfig(SPEC10, synth10, hp, ParticipationSpec("incomplete", y=0.2), seed=3))
    d = SPEC10.dim
    up_raw, up_sent = np.zeros((10, d)), np.zeros((10, d))
    down_raw, down_sent = np.zeros(d), np.zeros(d)
    worst = 0.0
    for _ in range(hp.T):
        tr = sim.step()
        for r in tr.reports:
            up_raw[r.client] += r.movement
            up_sent[r.client] += decode(r.update)
        for c in sim.clients:
            worst = max(worst, np.abs(up_sent[c.id] + c.R - up_raw[c.id]).max())
        if tr.aggregate is not None:
            down_raw += tr.aggregate
            down_sent += decode(tr.broadcast)
        worst = max(worst, np.abs(down_sent + sim.server.R_G - down_raw).max())
        assert worst <= 1e-12, f"round {tr.round}: {worst:.3e}"
    assert np.abs(sim.server.R_G).max() > 0  # compression actually left something behind


# -------------------------------------------------------- 3. FedAvg reduction


@criterion("AC3 FedAvg reduction")
def test_fedavg_reduction(synth10):
    hp = HyperParams(T=100, B=16, lam=0.0, q_up=None, q_down=None, coeff="static",
                     lr=LRSchedule("constant", 0.2))
    sim = Simulation(RunConfig(SPEC10, synth10, hp, seed=7))
    ref = fedavg_reference(SPEC10, synth10, hp.T, hp.E, hp.B, 0.2, seed=7)
    worst = 0.0
    for w_ref in ref:
        sim.step()
        worst = max(worst, np.abs(sim.server.w_sync - w_ref).max())
    print(f"AC3: max deviation {worst:.3e}")
    assert worst <= 1e-12


# --------------------------------------------------------------- 4. gradients


@criterion("AC4 gradient audits")
@pytest.mark.parametrize("name", sorted(MODEL_SPECS))
def test_model_gradients(name):
    spec = MODEL_SPECS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(100):
        batch = random_batch(rng, spec, int(rng.integers(1, 12)))
        w = rng.normal(size=spec.dim)
        g_fd = central_diff(lambda v: models.loss(spec, v, batch), w)
        assert fd_rel_error(models.grad(spec, w, batch), g_fd) <= 1e-5


@criterion("AC4 gradient audits")
@pytest.mark.parametrize("name", ["linear", "softmax", "mlp-tanh"])
def test_elastic_objective_gradient(name):
    spec = MODEL_SPECS[name]
    rng = np.random.default_rng(99)
    for _ in range(100):
        batch = random_batch(rng, spec, int(rng.integers(1, 12)))
        w = rng.normal(size=spec.dim)
        U = rng.random(spec.dim) * 3
        V = U * rng.normal(size=spec.dim)
        lam = float(rng.uniform(0, 2))
        hp = HyperParams(lam=lam)
        g = local_grad(spec, w, batch, hp, U, V)
        g_fd = central_diff(lambda v: elastic_objective(spec, v, batch, lam, U, V), w)
        assert fd_rel_error(g, g_fd) <= 1e-5


# ---------------------------------------------------------- 5. optimum shift


@criterion("AC5 optimum-shift bound")
def test_optimum_shift_bound():
    """Leave and join bounds on 100 random instances, every client in turn.

    Join cases where the newcomer holds more samples than the incumbents
    combined are outside the bound's reach (see
    test_policies.test_join_bound_fails_for_a_dominant_newcomer); they are
    counted and reported, not asserted.
    """
    t0 = time.perf_counter()
    violations, excluded, checks = [], [], 0
    for i in range(100):
        rng = stream(0, -1, i, "shift-instances").generator()
        d = int(rng.integers(1, 21))
        N = int(rng.integers(2, 11))
        l2 = 0.0 if rng.random() < 0.5 else 0.1
        p = random_problem(rng, d, N, n_range=(d + 5, 60), l2=l2)
        for a in range(N):
            n_a = int(p.sizes[a])
            n_rest = int(p.sizes.sum()) - n_a
            for mode in ("leave", "join"):
                b = shift_bound(p, a, mode)
                if mode == "join" and n_a > n_rest:
                    excluded.append((i, a, b.holds))
                    continue
                checks += 1
                if not b.holds:
                    violations.append((i, a, mode, b.lhs / b.rhs))
    elapsed = time.perf_counter() - t0
    print(f"AC5: {checks} checks, {len(violations)} violations, {len(excluded)} dominant-newcomer joins "
          f"skipped ({sum(not h for *_, h in excluded)} of them violate), {elapsed:.1f} s")
    assert not violations
    assert elapsed < 30


# -------------------------------------------------------- 6. convergence trend


@criterion("AC6 convergence trend")
def test_convergence_trend():
    ds = D.gen_regression(10, (50, 100), 10, stream(0), heterogeneity=1.0, noise=0.5)
    spec = ModelSpec("linear-regression", 10, l2=0.01)
    w_star = exact_optimum(from_federated(ds, spec.l2))
    hp = HyperParams(T=400, E=5, B=10, lam=0.01, lr=LRSchedule("inverse-time", 0.05, 10.0),
                     q_up=0.05, q_down=0.05)
    sim = Simulation(RunConfig(spec, ds, hp, seed=1))
    err = {}
    for _ in range(hp.T):
        sim.step()
        err[sim.server.round] = float(np.sum((sim.server.w_sync - w_star) ** 2))
    ratios = {tau: err[4 * tau] / err[tau] for tau in (25, 50, 100)}
    print("AC6: err(4t)/err(t) " + ", ".join(f"t={t}: {r:.3f}" for t, r in ratios.items()))
    assert all(r <= 0.6 for r in ratios.values())


# ----------------------------------------------------------- 7. unbiasedness


@criterion("AC7 incomplete-client unbiasedness")
def test_incomplete_unbiasedness(synth10, monkeypatch):
    c = np.linspace(-2, 1, SPEC10.dim)
    monkeypatch.setattr(models, "grad", lambda spec, w, batch: c.copy())
    eta = 0.05
    hp = HyperParams(T=1, B=16, q_up=None, q_down=None, coeff="adaptive", lr=LRSchedule("constant", eta))
    expected = -hp.E * eta * c  # sum_k p_k = 1
    draws = []
    for seed in range(20):
        sim = Simulation(RunConfig(SPEC10, synth10, hp, ParticipationSpec("incomplete"), seed=seed))
        tr = sim.step()
        draws.append(tuple(tr.s))
        assert len(tr.reports) == 10
        assert np.abs(tr.aggregate - expected).max() <= 1e-12
    assert len(set(draws)) > 1


# -------------------------------------------------- 8 and 9. MNIST experiments


def mnist_split(mnist, seed):
    sub = D.subset_per_class(mnist, 200, stream(seed, purpose="subset"))
    return D.partition_by_classes(sub, 10, 2, stream(seed, purpose="partition"), 0.2, class_count=10)


def final_accuracy(ds, seed, algorithm="efl", lam=0.0, q=0.05, coeff="static", part=ParticipationSpec()):
    spec = ModelSpec("softmax-regression", 784, 10)
    hp = HyperParams(T=150, E=5, B=32, lam=lam, lr=LRSchedule("constant", 0.1), q_up=q, q_down=q,
                     algorithm=algorithm, coeff=coeff)
    return run_rounds(RunConfig(spec, ds, hp, part, seed=seed, eval_every=150))[-1].test_acc_mean


@pytest.mark.slow
@criterion("AC8 non-IID MNIST")
def test_noniid_mnist(mnist):
    t0 = time.perf_counter()
    seeds = range(5)
    splits = {s: mnist_split(mnist, s) for s in seeds}
    assert sum(len(c.train) + len(c.test) for c in splits[0].clients) == 2000
    fedavg = [final_accuracy(splits[s], s, "fedavg", q=None) for s in seeds]
    efl = {lam: [final_accuracy(splits[s], s, lam=lam) for s in seeds] for lam in (0.0, 0.001, 0.01, 0.1)}
    best = max((0.001, 0.01, 0.1), key=lambda lam: np.mean(efl[lam]))
    elapsed = time.perf_counter() - t0
    print(f"AC8: FedAvg {np.mean(fedavg):.4f}+/-{np.std(fedavg):.4f}; "
          + "; ".join(f"EFL lam={lam} {np.mean(a):.4f}+/-{np.std(a):.4f}" for lam, a in efl.items())
          + f"; best lam={best}; {elapsed:.0f} s")
    assert np.mean(efl[best]) >= np.mean(fedavg) - 0.01
    assert np.std(efl[best]) <= np.std(efl[0.0])
    assert elapsed < 300


@pytest.mark.slow
@criterion("AC9 participation robustness")
def test_participation_robustness(mnist):
    t0 = time.perf_counter()
    seeds = range(3)
    splits = {s: mnist_split(mnist, s) for s in seeds}
    # incomplete clients skip no rounds and draw s uniformly from 1..E: E[s]/E = 0.6;
    # half of them also sit idle each round, giving 0.5 * 0.6 = 0.3
    low = ParticipationSpec("incomplete", y=0.5)
    assert math.isclose(0.5 * np.mean(np.arange(1, 6)) / 5, 0.3)

    def degradation(**kw):
        full = [final_accuracy(splits[s], s, **kw) for s in seeds]
        part = [final_accuracy(splits[s], s, part=low, **kw) for s in seeds]
        return np.mean(full) - np.mean(part)

    d_fedavg = degradation(algorithm="fedavg", q=None)
    d_efl = degradation(lam=0.1, coeff="adaptive")
    elapsed = time.perf_counter() - t0
    print(f"AC9: degradation FedAvg {d_fedavg:.4f}, EFL {d_efl:.4f}; {elapsed:.0f} s")
    assert d_efl <= d_fedavg
    assert elapsed < 300


# ------------------------------------------------------ 10. bit accounting


@criterion("AC10 communication accounting")
def test_bit_budget(synth10):
    rng = np.random.default_rng(5)
    dims = [4096, 4097, 5000, 7850, 8192, 65_536, 1_000_000] + [int(x) for x in rng.integers(4096, 200_000, 20)]
    for d in dims:
        c = st_compress(rng.normal(size=d), 0.05)
        k = keep_count(d, 0.05)
        bits = encoded_bits(c)
        assert bits == 64 + 32 + k * (math.ceil(math.log2(d)) + 1)
        assert 100 * bits <= 7 * 64 * d, (d, bits)
    # the uplink messages of an actual MNIST-sized run obey the same budget
    spec = ModelSpec("softmax-regression", 784, 10)
    fd = D.gen_synthetic(0.5, 0.5, 3, (30, 40), 784, 10, stream(1))
    sim = Simulation(RunConfig(spec, fd, HyperParams(T=2, B=16, lam=0.1), seed=0))
    for _ in range(2):
        tr = sim.step()
        for r in tr.reports:
            assert 100 * encoded_bits(r.update) <= 7 * 64 * spec.dim


# --------------------------------------------------------- 11. determinism


@criterion("AC11 determinism")
@pytest.mark.parametrize("config,overrides", [
    ("configs/mnist_noniid.yaml", ["hp.T=5", "seeds=[0, 1]"]),
    ("configs/synthetic.yaml", ["hp.T=10", "participation={kind: incomplete, y: 0.3}"]),
    ("configs/regression.yaml", ["hp.T=10"]),
])
def test_byte_identical_metrics(config, overrides, tmp_path, monkeypatch):
    monkeypatch.setenv("ELASTICFL_DATA", str(ROOT / "data"))
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert cli.cmd_run(ROOT / config, overrides, str(out)) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].glob("metrics_*.csv"))
    assert names
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
