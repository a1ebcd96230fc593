"""Acceptance criteria, each at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line that is printed in the pytest
summary.  The training criteria run the shipped presets end to end through
the experiment layer (environment audit, training, checkpoints, attacks), so
together they take most of an hour on one core.
"""

import dataclasses
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from nlyoula.controllers import make_base_controller
from nlyoula.environments import make_environment
from nlyoula.experiments import cmd_attack, cmd_train, load_config, read_manifest
from nlyoula.fixtures import scalar_fixture
from nlyoula.policies import PolicyFactory, build_model
from nlyoula.qmodels import ContractingCell, empirical_gain
from nlyoula.dynamics import simulate
from nlyoula.policies import scenario
from nlyoula.verification import (audit_contraction, audit_lemma2_boundedness,
                                  audit_lemma3_convergence, audit_observer, audit_theorem1,
                                  example1_counterexample, map_runner, run_closed_loop)
from nlyoula.youla import FeedbackPolicy, LinearNet, YoulaPolicy, construct_QK

ENVS = ("maglev", "pendulum")
SEEDS = [0, 1, 2]


def _record(num, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {num}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --- 1 -----------------------------------------------------------------------

def test_c1_observer_correctness():
    t0 = time.perf_counter()
    worst_map, worst_track = 0.0, 0.0
    for name in ENVS:
        env = make_environment(name)
        base = make_base_controller(env)
        worst_map = max(worst_map, audit_observer(env, base.observer, samples=1000)["max_error"])
        x0 = env.initial_conditions(11, "acceptance", count=8)
        xs, ss, _ = run_closed_loop(env, base, x0, x0.copy(), 100)
        worst_track = max(worst_track, float(np.max(np.abs(xs - ss))))
    dt = time.perf_counter() - t0
    ok = worst_map < 1e-12 and worst_track < 1e-9 and dt < 1.0
    _record(1, "observer correctness", ok,
            f"max |f - f_o(c)| {worst_map:.2e}, max |xh - x| {worst_track:.2e}, {dt:.2f} s")


# --- 2 -----------------------------------------------------------------------

def test_c2_certificate_soundness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(500):
        gamma = float(10 ** rng.uniform(-1, 3))
        m = ContractingCell(3, 1, state_dim=8, hidden_dim=12,
                            alpha_bar=float(rng.uniform(0.1, 0.99)), gamma=gamma)
        c = m.certificate(m.project(rng.normal(0, float(10 ** rng.uniform(-2, 0.5)), m.num_params)))
        bad += not (c["contraction"] <= m.alpha_bar + 1e-9 and c["gain_bound"] <= gamma + 1e-9)
    # empirical contraction and gain against the certificate, 1000 probes each
    m = ContractingCell(3, 1, state_dim=8, hidden_dim=12, alpha_bar=0.9, gamma=10.0)
    free = rng.normal(0, 1.0, m.num_params)
    p, cert = m.prepare(free), m.certificate(m.project(free))
    q1 = 3 * rng.normal(size=(1000, m.state_dim))
    q2 = q1 + rng.normal(size=q1.shape) * 10.0 ** rng.uniform(-4, 0, size=(1000, 1))
    u = rng.normal(size=(1000, 3))
    ratio = (np.linalg.norm(m.step(p, q1, u)[0] - m.step(p, q2, u)[0], axis=-1)
             / np.linalg.norm(q1 - q2, axis=-1))
    gain = empirical_gain(m, p, probes=1000, horizon=30, seed=2)
    dt = time.perf_counter() - t0
    ok = (bad == 0 and ratio.max() <= cert["contraction"] + 1e-9
          and gain.bound <= cert["gain_bound"] + 1e-9 and dt < 30)
    _record(2, "Q-model certificate soundness", ok,
            f"{bad}/500 violations, step ratio {ratio.max():.4f} <= {cert['contraction']:.4f}, "
            f"gain {gain.bound:.4f} <= {cert['gain_bound']:.4f}, {dt:.1f} s")


# --- 3 -----------------------------------------------------------------------

def test_c3_closed_loop_audit():
    t0 = time.perf_counter()
    failures, rates, gains = [], [], []
    for name in ENVS:
        env = make_environment(name)
        rng = np.random.default_rng(3)
        for k in range(20):
            cls = "youla-gamma" if k % 2 else "youla-contracting"
            model = build_model(env, cls, gamma=float(10 ** rng.uniform(0, 2)))
            theta = rng.normal(0.0, float(10 ** rng.uniform(-2, -1)), model.num_params)
            rep = audit_theorem1(env, PolicyFactory(env, cls, model)(theta), seed=k)
            r2 = [v for v, s in zip(rep.contraction.r2, rep.contraction.statuses) if s == "fit"]
            ok = rep.passed and rep.contraction.rate < 1 and all(v > 0.9 for v in r2) \
                and np.isfinite(rep.gain)
            if not ok:
                failures.append((name, k, rep.reasons))
            rates.append(rep.contraction.rate)
            gains.append(rep.gain)
    dt = time.perf_counter() - t0
    ok = not failures and dt < 300
    _record(3, "closed-loop contraction and finite gain, 20 Q-models per env", ok,
            f"{40 - len(failures)}/40 pass, max rate {max(rates):.4f}, "
            f"max gain {max(gains):.3g}, {dt:.1f} s {failures[:2] if failures else ''}")


# --- 4 -----------------------------------------------------------------------

def test_c4_counterexample():
    t0 = time.perf_counter()
    rep = example1_counterexample()
    dt = time.perf_counter() - t0
    ok = rep.converged_gap < 1e-6 and rep.separation > 0.1 and np.isfinite(rep.sup_norm) \
        and dt < 1.0
    _record(4, "disturbed observer-loop counterexample", ok,
            f"gap {rep.converged_gap:.2e}, separation {rep.separation:.3f}, "
            f"sup {rep.sup_norm:.1f}, {dt:.2f} s")


# --- 5 -----------------------------------------------------------------------

def test_c5_lemma_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    rep = audit_contraction(map_runner(lambda x, u: 0.5 * x + u, rng.normal(size=(6, 60, 1))),
                            rng.uniform(-1, 1, size=(6, 2, 1)))
    c_ok = rep.passed and abs(rep.rate - 0.5) <= 0.01

    cells_ok = True
    for k in range(5):
        m = ContractingCell(3, 1, state_dim=8, hidden_dim=12, alpha_bar=0.95)
        p = m.prepare(rng.normal(0, 1.0, m.num_params))
        r2 = audit_lemma2_boundedness(lambda q, v: m.step(p, q, v)[0],
                                      10 * rng.normal(size=(4, 8)),
                                      rng.uniform(-1, 1, size=(4, 1000, 3)))
        cells_ok &= r2.passed
    neg = audit_lemma2_boundedness(scalar_fixture(1.1).step, np.array([[0.1]]),
                                   rng.uniform(-1, 1, size=(1, 1000, 1)))
    b_ok = cells_ok and not neg.passed

    fitted = []
    l_ok = True
    for alpha, a in ((0.5, 0.8), (0.8, 0.5), (0.5, 0.5)):
        u1 = rng.uniform(-1, 1, size=(150, 1))
        u2 = u1 + a ** np.arange(150)[:, None]
        r3 = audit_lemma3_convergence(lambda x, u, al=alpha: al * x + u, lambda x, u: x,
                                      np.array([[1.0], [-1.0]]), u1, u2,
                                      declared_rate=alpha, input_rate=a)
        fitted.append(r3.output_rate)
        l_ok &= r3.passed and abs(r3.output_rate - max(alpha, a)) <= 0.05
    dt = time.perf_counter() - t0
    ok = c_ok and b_ok and l_ok and dt < 30
    _record(5, "lemma suite", ok,
            f"scalar rate {rep.rate:.4f}, cells bounded {cells_ok}, 1.1 control flagged "
            f"{not neg.passed}, converging-input rates {np.round(fitted, 3).tolist()} "
            f"vs [0.8, 0.8, 0.5], {dt:.1f} s")


# --- 6 -----------------------------------------------------------------------

def test_c6_converse_construction():
    t0 = time.perf_counter()
    env = make_environment("maglev")
    base = make_base_controller(env)
    y_eq = env.measure(env.equilibrium_state)
    F = 0.05 * np.ones((env.input_dim, env.output_dim)) / np.maximum(np.abs(y_eq), 1.0)
    K = FeedbackPolicy(base, LinearNet(-F), y_eq)
    qk = construct_QK(K, base.observer, base.feedback)
    sc = scenario(env, 6, "acceptance-qk", count=10)
    run = lambda pol: simulate(env.system, pol, sc.x0, env.horizon, process_noise=sc.w,
                               measurement_noise=sc.v)
    a, b = run(K), run(YoulaPolicy(base.observer, base.feedback, qk, None))
    err = float(np.max(np.abs(a.inputs - b.inputs)))

    rng = np.random.default_rng(6)
    N, T, n = 6, 300, env.state_dim
    inputs = np.concatenate([np.zeros((N, T, 1)),
                             1e-5 * rng.standard_normal((N, T, env.output_dim))], -1)

    def run_pairs(pairs):
        flat = pairs.reshape(2 * N, -1)
        st = qk.initial_state((2 * N,))
        st = dataclasses.replace(st, phi=dataclasses.replace(st.phi, xh=flat[:, :n].copy()),
                                 xh=flat[:, n:].copy())
        u = np.repeat(inputs, 2, axis=0)
        out = [flat]
        for t in range(T):
            st, _ = qk.step(st, u[:, t])
            out.append(np.concatenate([st.phi.xh, st.xh], -1))
        return np.stack(out, 1).reshape(N, 2, T + 1, -1)

    box = np.array([0.02, 0.05, 0.2 * env.equilibrium_state[2]])
    start = env.equilibrium_state + box * rng.uniform(-1, 1, size=(N, 2, 2, n))
    rep = audit_contraction(run_pairs, start.reshape(N, 2, -1))
    dt = time.perf_counter() - t0
    ok = err < 1e-10 and rep.passed and dt < 30
    _record(6, "converse construction reproduces K", ok,
            f"max |u_K - u_QK| {err:.2e}, standalone rate {rep.rate:.4f} "
            f"({'pass' if rep.passed else rep.reasons}), {dt:.1f} s")


# --- 7, 8, 9: presets through the experiment layer ---------------------------

_RUNS = {}


def _trained(preset, tmp_factory, seeds=SEEDS):
    if preset not in _RUNS:
        cfg = load_config(preset)
        t0 = time.perf_counter()
        res = cmd_train(cfg, out=tmp_factory.mktemp(preset), seeds=seeds, workers=1)
        _RUNS[preset] = (cfg, res, time.perf_counter() - t0)
    return _RUNS[preset]


def _costs(res, key):
    return np.array([res.manifest["seeds"][str(s)][key] for s in SEEDS])


@pytest.mark.slow
def test_c7_training_improvement(tmp_path_factory):
    _, mres, mt = _trained("maglev_youla", tmp_path_factory)
    _, pres, pt = _trained("pendulum_youla", tmp_path_factory)
    assert not mres.failures and not pres.failures
    m_best, p_best = _costs(mres, "best_normalized_test_cost"), _costs(pres, "best_normalized_test_cost")
    m_fin, p_fin = _costs(mres, "final_normalized_test_cost"), _costs(pres, "final_normalized_test_cost")
    ok = bool(np.all(m_best < 1.0) and m_best.mean() < 0.9 and p_best.mean() < 1.0
              and mt < 15 * 60 and pt < 60 * 60)
    _record(7, "training improvement (kept checkpoint)", ok,
            f"maglev {np.round(m_best, 4).tolist()} mean {m_best.mean():.4f} ({mt / 60:.1f} min); "
            f"pendulum {np.round(p_best, 4).tolist()} mean {p_best.mean():.4f} ({pt / 60:.1f} min); "
            f"final epoch: maglev mean {m_fin.mean():.4f}, pendulum mean {p_fin.mean():.4f}")


@pytest.mark.slow
def test_c8_robustness_ordering(tmp_path_factory):
    crit = {}
    dt = 0.0
    for preset in ("pendulum_gamma100", "pendulum_youla", "pendulum_lstm"):
        cfg, res, _ = _trained(preset, tmp_path_factory)
        assert not res.failures
        t0 = time.perf_counter()
        _, rep = cmd_attack(cfg, run_dir=res.run_dir, out=tmp_path_factory.mktemp("attack"))
        dt += time.perf_counter() - t0
        crit[preset] = (rep["mean_critical_eps"], [c["critical_eps"] for c in rep["critical"]],
                        sum(c["censored"] for c in rep["critical"]))
    g, y, l = (crit[k][0] for k in ("pendulum_gamma100", "pendulum_youla", "pendulum_lstm"))
    ok = g >= y >= l and dt < 30 * 60
    detail = "; ".join(f"{k} mean {v[0]:.5f} per-seed {np.round(v[1], 5).tolist()} "
                       f"censored {v[2]}" for k, v in crit.items())
    _record(8, "robustness ordering gamma=100 >= gamma=inf >= LSTM", ok,
            f"{detail}; attacks {dt / 60:.1f} min")


@pytest.mark.slow
def test_c9_determinism_across_workers(tmp_path_factory):
    cfg, first, _ = _trained("maglev_youla", tmp_path_factory)
    again = cmd_train(cfg, out=tmp_path_factory.mktemp("rerun"), seeds=[0, 1], workers=2)
    same = []
    for s in (0, 1):
        for f in ("train_log.csv", "best.bin", "final.bin", "events.json"):
            same.append((first.run_dir / f"seed_{s}" / f).read_bytes()
                        == (again.run_dir / f"seed_{s}" / f).read_bytes())
        same.append(first.manifest["seeds"][str(s)] == again.manifest["seeds"][str(s)])
    ok = all(same)
    _record(9, "determinism across worker counts", ok,
            f"{sum(same)}/{len(same)} artifacts identical (1 worker vs 2 workers)")
