import numpy as np
import pytest

from nlyoula.controllers import make_base_controller
from nlyoula.dynamics import ConfigurationError, simulate
from nlyoula.environments import make_environment, quadratic_cost
from nlyoula.fixtures import LinearFixture, step_criterion
from nlyoula.robustness import (AttackSetting, SpsaConfig, bisect_threshold, clean_rollout,
                                critical_attack_size, empirical_policy_gain, env_setting,
                                project_ball, sweep, synthesize_attack, task_deviation,
                                task_threshold)


class Gain:
    """Memoryless ``u = k y``."""

    def __init__(self, k):
        self.k = k

    def initial_state(self, batch_shape):
        return np.zeros(tuple(batch_shape) + (0,))

    def step(self, state, y, r):
        return self.k * y, state


def _scalar_setting(T=30, batch=2, a=0.9):
    fx = LinearFixture([[a]], [[1.0]], [[1.0]])
    cost = quadratic_cost([[1.0]], [[0.01]], [0.0], [0.0], T)
    x0 = np.array([[0.2], [-0.1]])[:batch]
    return AttackSetting(fx.system(), cost, x0, T)


@pytest.fixture(scope="module")
def maglev():
    return make_environment("maglev")


def test_project_ball():
    a = np.array([[3.0, 4.0], [0.1, 0.0]])
    p = project_ball(a, 1.0)
    assert np.allclose(np.linalg.norm(p, axis=-1), [1.0, 0.1])
    assert np.all(project_ball(a, 0.0) == 0.0)


def test_zero_attack_is_clean(maglev):
    base = make_base_controller(maglev)
    setting = env_setting(maglev, 0, count=3)
    res = synthesize_attack(setting, base, 0.0)
    clean = clean_rollout(setting, base)
    assert np.array_equal(res.trajectory.states, clean.states)
    assert res.mean_cost == res.clean_cost == float(clean.cost.mean())
    with pytest.raises(ConfigurationError):
        synthesize_attack(setting, base, -1.0)


def test_attack_never_below_clean_and_admissible(maglev):
    base = make_base_controller(maglev)
    setting = env_setting(maglev, 1, count=2)
    cfg = SpsaConfig(iterations=2)
    for eps in (1e-4, 1e-3, 5e-3):
        res = synthesize_attack(setting, base, eps, cfg)
        assert res.mean_cost >= res.clean_cost
        assert res.max_slot_norm <= eps * (1 + 1e-12)
        assert res.attack.shape == (2, maglev.horizon, 2)


def _resonant_setting(T=30):
    # closed-loop poles 0.77 at about 50 degrees: the worst probe is a sinusoid
    fx = LinearFixture([[0.0, 1.0], [-0.49, 0.99]], [[0.0], [1.0]], [[1.0, 0.0]])
    cost = quadratic_cost(np.eye(2), [[0.01]], [0.0, 0.0], [0.0], T)
    return AttackSetting(fx.system(), cost, np.array([[0.1, 0.0], [0.0, -0.05]]), T)


@pytest.mark.parametrize("case", ["bias", "alternating", "resonant"])
def test_attack_matches_grid_oracle_on_linear_plant(case):
    # scalar closed-loop pole 0.4 (worst probe is a constant bias), -0.6
    # (worst probe alternates sign), and a lightly damped second-order loop
    if case == "resonant":
        setting, pol = _resonant_setting(), Gain(-0.1)
    else:
        a, k = (0.9, -0.5) if case == "bias" else (0.2, -0.8)
        setting, pol = _scalar_setting(a=a), Gain(k)
    eps, T = 0.05, setting.horizon
    clean = float(clean_rollout(setting, pol).cost.mean())
    # grid of sign, sinusoid and square-wave probes, best one per scenario
    t = np.arange(T)
    probes = [s * np.ones(T) for s in (-1.0, 1.0)]
    probes += [s * (-1.0) ** t for s in (-1.0, 1.0)]
    for f in np.linspace(0.02, 0.5, 25):
        for ph in np.linspace(0, 2 * np.pi, 16, endpoint=False):
            wave = np.cos(2 * np.pi * f * t + ph)
            probes += [wave, np.where(wave >= 0, 1.0, -1.0)]
    best = np.full(setting.batch, -np.inf)
    for pr in probes:
        a = np.broadcast_to((eps * pr)[None, :, None], (setting.batch, T, 1))
        tr = simulate(setting.system, pol, setting.x0, T, output_attack=a, cost=setting.cost)
        best = np.maximum(best, tr.cost)
    grid_gain = float(best.mean()) - clean
    res = synthesize_attack(setting, pol, eps)
    spsa_gain = res.mean_cost - clean
    assert grid_gain > 0
    assert abs(spsa_gain - grid_gain) <= 0.2 * grid_gain, spsa_gain / grid_gain


# --- critical size -----------------------------------------------------------

@pytest.mark.parametrize("threshold", [0.5, 0.37])
def test_bisection_recovers_threshold(threshold):
    est, censored, evals = bisect_threshold(step_criterion(threshold), 0.0, 1.0, iterations=8)
    assert not censored
    assert abs(est - threshold) <= 1.0 / 2 ** 8
    assert len(evals) == 9


def test_bisection_expands_then_censors():
    est, censored, _ = bisect_threshold(step_criterion(3.0), 0.0, 1.0, iterations=8, expand=4)
    assert not censored and abs(est - 3.0) <= 4.0 / 2 ** 8
    est, censored, _ = bisect_threshold(lambda e: False, 0.0, 1.0, expand=2)
    assert censored and est == 4.0


def test_critical_size_censored_when_immune(maglev):
    base = make_base_controller(maglev)
    res = critical_attack_size(maglev, base, eps_range=(0.0, 1e-6), expand=0, batch=2,
                               cfg=SpsaConfig(iterations=1))
    assert res.censored
    assert res.threshold == task_threshold(maglev) == 0.01
    assert [c[0] for c in res.curve] == [0.0, 1e-6]
    assert res.curve[0][1] == pytest.approx(1.0)


def test_sweep_zero_eps_clean_stats(maglev):
    base = make_base_controller(maglev)
    rows = sweep(maglev, base, [0.0], batch=3)
    setting = env_setting(maglev, 0, count=3)
    clean = clean_rollout(setting, base)
    assert rows[0][1] == 1.0
    assert rows[0][2] == task_deviation(maglev, clean.states)
    assert rows[0][3] is False or not rows[0][3]


def test_deviation_counts_divergence_as_failure():
    env = make_environment("pendulum")
    states = np.zeros((2, 11, 4))
    states[1, 8:] = np.nan
    assert task_deviation(env, states) == np.inf
    states = np.zeros((1, 11, 4))
    states[0, 6:, 1] = np.pi
    assert task_deviation(env, states) > task_threshold(env)


# --- empirical gain ----------------------------------------------------------

def test_identity_passthrough_gain_one():
    setting = _scalar_setting(T=10, batch=1)
    g = empirical_policy_gain(setting, Gain(1.0), probes=20, output="input")
    assert g.bound >= 1 - 1e-6 and g.probes == 20


def test_unresponsive_policy_gain_zero():
    setting = _scalar_setting(T=10, batch=1)
    g = empirical_policy_gain(setting, Gain(0.0), probes=20, output="input")
    assert g.bound == 0.0


def test_gain_running_max_and_skipped_probes():
    setting = _scalar_setting(T=10, batch=1)
    g = empirical_policy_gain(setting, Gain(-0.5), probes=50)
    assert np.all(np.diff(g.running_max) >= 0)
    a = np.ones((3, 10, 1))
    g2 = empirical_policy_gain(setting, Gain(-0.5), pairs=(a, a))
    assert g2.skipped == 3 and g2.bound == 0.0
