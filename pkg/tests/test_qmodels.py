import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlyoula.dynamics import ConfigurationError
from nlyoula.qmodels import (ContractingCell, LstmCell, ParamLayout, empirical_gain,
                             load_params, make_qmodel, run_sequence, save_params, spectral_norm)


def _cell(gamma=float("inf"), **kw):
    kw.setdefault("state_dim", 8)
    kw.setdefault("hidden_dim", 12)
    return ContractingCell(3, 1, gamma=gamma, **kw)


def _free(model, rng, std=0.5):
    return rng.normal(0.0, std, model.num_params)


def _certified(model, free):
    """Certificate recomputed from scratch on the projected parameters."""
    return model.certificate(model.project(free))


# --- projection --------------------------------------------------------------

def test_zero_params_need_no_rescale():
    m = _cell(gamma=1.0)
    free = np.zeros(m.num_params)
    p = m.project(free)
    assert m.certificate(p)["contraction"] == 0.0
    assert all(np.array_equal(v, 0.0 * v) for v in p.values())


def test_projection_halves_twice_too_large_cell():
    m = _cell(alpha_bar=0.8)
    rng = np.random.default_rng(1)
    p = m.layout.unpack(_free(m, rng))
    s = m.certificate(p)["contraction"]
    # s is linear in (A, B) jointly with Cq fixed
    k = 2 * m.alpha_bar / s
    p["A"] *= k
    p["B"] *= k
    free = m.layout.pack(p)
    assert abs(m.certificate(p)["contraction"] - 2 * m.alpha_bar) < 1e-9
    q = m.project(free)
    assert np.allclose(q["A"], 0.5 * p["A"], rtol=1e-9, atol=0)
    assert abs(m.certificate(q)["contraction"] - m.alpha_bar) < 1e-9


def test_infinite_gamma_leaves_output_maps():
    m = _cell()
    rng = np.random.default_rng(2)
    free = _free(m, rng, std=2.0)
    p, q = m.layout.unpack(free), m.project(free)
    assert np.array_equal(p["Co"], q["Co"]) and np.array_equal(p["Dff"], q["Dff"])


def test_certificate_soundness_over_random_draws():
    rng = np.random.default_rng(3)
    for k in range(500):
        gamma = float(10.0 ** rng.uniform(-1, 3))
        m = _cell(gamma=gamma, alpha_bar=float(rng.uniform(0.1, 0.99)))
        free = _free(m, rng, std=float(10.0 ** rng.uniform(-2, 0.5)))
        c = _certified(m, free)
        assert c["contraction"] <= m.alpha_bar + 1e-9
        assert c["gain_bound"] <= gamma + 1e-9


def test_per_step_contraction_never_exceeds_certificate():
    rng = np.random.default_rng(4)
    m = _cell(alpha_bar=0.9)
    free = _free(m, rng, std=1.0)
    p = m.prepare(free)
    s = m.certificate(m.project(free))["contraction"]
    q1 = rng.normal(size=(1000, m.state_dim)) * 3
    q2 = q1 + rng.normal(size=q1.shape) * 10.0 ** rng.uniform(-4, 0, size=(1000, 1))
    u = rng.normal(size=(1000, 3))
    n1, _ = m.step(p, q1, u)
    n2, _ = m.step(p, q2, u)
    ratio = np.linalg.norm(n1 - n2, axis=-1) / np.linalg.norm(q1 - q2, axis=-1)
    assert ratio.max() <= s + 1e-9


def test_trajectories_contract_at_alpha_bar():
    rng = np.random.default_rng(5)
    m = _cell(alpha_bar=0.7)
    p = m.prepare(_free(m, rng, std=1.0))
    u = rng.normal(size=(40, 3))
    q1, q2 = rng.normal(size=m.state_dim), rng.normal(size=m.state_dim)
    d0 = np.linalg.norm(q1 - q2)
    for t in range(1, 41):
        q1, _ = m.step(p, q1, u[t - 1])
        q2, _ = m.step(p, q2, u[t - 1])
        assert np.linalg.norm(q1 - q2) <= m.alpha_bar ** t * d0 + 1e-9


@pytest.mark.parametrize("gamma", [1.0, 25.0, float("inf")])
def test_empirical_gain_below_certificate(gamma):
    rng = np.random.default_rng(6)
    m = _cell(gamma=gamma, in_scale=(0.5, 1.0, 2.0), out_scale=(3.0,))
    free = _free(m, rng, std=1.0)
    bound = _certified(m, free)["gain_bound"]
    est = empirical_gain(m, m.prepare(free), probes=1000, horizon=30, seed=1)
    assert est.probes == 1000
    assert est.bound <= bound + 1e-9
    if np.isfinite(gamma):
        assert est.bound <= gamma * (1 + 1e-6)


def test_empirical_gain_skips_identical_inputs():
    m = _cell()
    p = m.prepare(_free(m, np.random.default_rng(7)))
    u = np.random.default_rng(8).normal(size=(4, 10, 3))
    est = empirical_gain(m, p, pairs=(u, u.copy()))
    assert est.skipped == 4 and est.probes == 0 and est.bound == 0.0


def test_output_scaling_doubles_gain():
    m = _cell()
    rng = np.random.default_rng(9)
    p = m.layout.unpack(_free(m, rng))
    p2 = dict(p, Co=2 * p["Co"], Dff=2 * p["Dff"], bo=2 * p["bo"])
    a = empirical_gain(m, m.prepare(m.layout.pack(p)), probes=200, seed=3)
    b = empirical_gain(m, m.prepare(m.layout.pack(p2)), probes=200, seed=3)
    assert abs(b.bound - 2 * a.bound) < 1e-9 * max(1.0, b.bound)


def test_zero_state_input_bias_gives_zero():
    m = _cell()
    p = m.layout.unpack(_free(m, np.random.default_rng(10)))
    p["b"][:] = 0.0
    p["bo"][:] = 0.0
    prm = m.prepare(m.layout.pack(p))
    q, out = m.step(prm, np.zeros(m.state_dim), np.zeros(3))
    assert np.all(q == 0) and np.all(out == 0)


# --- spectral norm -----------------------------------------------------------

def test_spectral_norm_matches_svd():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        M = rng.normal(size=tuple(rng.integers(1, 40, size=2)))
        val, ok = spectral_norm(M)
        ref = np.linalg.svd(M, compute_uv=False)[0]
        if ok:
            worst = max(worst, abs(val - ref) / ref)
        else:
            assert val >= ref
    assert worst < 1e-6


def test_spectral_norm_fallback_is_upper_bound():
    M = np.diag([1.0, 1.0 - 1e-13, 0.5])
    val, ok = spectral_norm(M, max_iter=1)
    assert val >= 1.0


# --- layouts and checkpoints -------------------------------------------------

@pytest.mark.parametrize("model", [ContractingCell(3, 1), LstmCell(2, 1)])
def test_pack_unpack_roundtrip(model):
    v = np.random.default_rng(12).normal(size=model.num_params)
    assert np.array_equal(model.layout.pack(model.layout.unpack(v)), v)
    V = np.random.default_rng(13).normal(size=(4, model.num_params))
    assert np.array_equal(model.layout.pack(model.layout.unpack(V)), V)


def test_layout_rejects_wrong_length():
    with pytest.raises(ConfigurationError):
        ContractingCell(3, 1).layout.unpack(np.zeros(5))


def test_checkpoint_roundtrip(tmp_path):
    m = ContractingCell(3, 1)
    v = np.random.default_rng(14).normal(size=m.num_params)
    save_params(tmp_path / "p.bin", tmp_path / "p.json", v, m.layout, {"model": "contracting"})
    w, layout, doc = load_params(tmp_path / "p.bin", tmp_path / "p.json")
    assert np.array_equal(v, w) and layout == m.layout
    assert doc["model"] == "contracting" and doc["byte_order"] == "little"
    assert (tmp_path / "p.bin").stat().st_size == 8 * m.num_params


def test_parameter_parity():
    cell = ContractingCell(3, 1, state_dim=32, hidden_dim=64)
    lstm = LstmCell(2, 1, units=28)
    a, b = cell.num_params, lstm.num_params
    assert (a, b) == (4516, 3501)
    assert abs(a - b) / max(a, b) <= 0.25


def test_zero_initialized_outputs():
    rng = np.random.default_rng(15)
    for m in (ContractingCell(3, 1), LstmCell(2, 1)):
        p = m.prepare(m.init_params(rng))
        out, _ = run_sequence(m, p, rng.normal(size=(5, 20, m.input_dim)))
        assert np.all(out == 0.0)


def test_stacked_prepare_matches_single():
    m = _cell(gamma=5.0)
    rng = np.random.default_rng(16)
    F = rng.normal(0, 0.5, size=(3, m.num_params))
    u = rng.normal(size=(3, 7, 10, 3))
    stacked, _ = run_sequence(m, m.prepare(F), u)
    for i in range(3):
        single, _ = run_sequence(m, m.prepare(F[i]), u[i])
        assert np.array_equal(stacked[i], single)


def test_bad_hyperparameters():
    with pytest.raises(ConfigurationError):
        ContractingCell(3, 1, alpha_bar=1.0)
    with pytest.raises(ConfigurationError):
        ContractingCell(3, 1, gamma=0.0)
    with pytest.raises(ConfigurationError):
        make_qmodel("gru", 3, 1)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31), std=st.floats(0.01, 5.0),
       alpha=st.floats(0.0, 0.99), gamma=st.floats(0.05, 1e4))
def test_property_projection_certified(seed, std, alpha, gamma):
    m = ContractingCell(2, 1, state_dim=5, hidden_dim=6, alpha_bar=alpha, gamma=gamma)
    free = np.random.default_rng(seed).normal(0, std, m.num_params)
    c = _certified(m, free)
    assert c["contraction"] <= alpha + 1e-9
    assert c["gain_bound"] <= gamma + 1e-9
