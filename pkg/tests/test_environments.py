import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlyoula.controllers import make_base_controller
from nlyoula.dynamics import ConfigurationError, Trajectory, apply_disturbance, simulate
from nlyoula.environments import (make_environment, make_pendulum, maglev_cost,
                                  pendulum_cost, quadratic_cost, read_env_config)
from nlyoula.environments.maglev import equilibrium_current
from nlyoula.environments.pendulum import pendulum_energy, pendulum_rhs_factory
from nlyoula.dynamics import rk4_step


@pytest.fixture(scope="module")
def maglev():
    return make_environment("maglev")


@pytest.fixture(scope="module")
def pendulum():
    return make_environment("pendulum")


def _traj(states, inputs, p=2):
    T = inputs.shape[-2]
    return Trajectory(states, inputs, np.zeros(inputs.shape[:-1] + (p,)), np.zeros(T))


def test_noise_levels_match_task_values(maglev, pendulum):
    assert np.all(maglev.noise.process_std == 5e-4)
    assert np.all(maglev.noise.measurement_std == 1e-3)
    assert np.all(pendulum.noise.process_std == 1e-2)
    assert np.all(pendulum.noise.measurement_std == 1e-2)


def test_measurements_select_expected_states(maglev, pendulum):
    x = np.array([0.05, 0.3, 0.9])
    assert np.array_equal(maglev.measure(x), [0.05, 0.9])
    xp = np.array([0.1, 0.2, 0.3, 0.4])
    assert np.array_equal(pendulum.measure(xp), [0.1, 0.2])


def test_maglev_cost_zero_at_reference(maglev):
    T = maglev.horizon
    xs = np.tile(maglev.equilibrium_state, (T + 1, 1))
    us = np.tile(maglev.equilibrium_input, (T, 1))
    assert maglev_cost(_traj(xs, us), maglev) == 0.0


def test_maglev_single_step_position_error(maglev):
    T = maglev.horizon
    xs = np.tile(maglev.equilibrium_state, (T + 1, 1))
    xs[3, 0] += 0.025
    us = np.tile(maglev.equilibrium_input, (T, 1))
    assert abs(maglev_cost(_traj(xs, us), maglev) - 1.0) < 1e-12


def test_maglev_cost_weights(maglev):
    assert np.allclose(np.diag(maglev.cost.Q), [1 / 0.025 ** 2, 0, 0])
    assert np.allclose(maglev.cost.R, 1 / 50 ** 2)
    assert maglev.equilibrium_state[0] == 0.05


def test_pendulum_cost_zero_and_hanging(pendulum):
    T = pendulum.horizon
    xs = np.zeros((T + 1, 4))
    us = np.zeros((T, 1))
    assert pendulum_cost(_traj(xs, us), pendulum) == 0.0
    xs[0, 1] = np.pi
    assert abs(pendulum_cost(_traj(xs, us), pendulum) - 40.0) < 1e-12


def test_cost_matches_per_step_oracle(maglev, pendulum):
    for env in (maglev, pendulum):
        base = make_base_controller(env)
        x0 = env.initial_conditions(1, "cost-oracle", count=1)[0]
        w, v = env.noise_batch(1, "cost-oracle", count=1)
        tr = simulate(env.system, base, x0, env.horizon, process_noise=w[0],
                      measurement_noise=v[0], cost=env.cost)
        Q, R = np.diag(env.cost.Q), np.diag(env.cost.R)
        total = 0.0
        for t in range(env.horizon):
            dz = env.cost.performance(tr.states[t]) - env.cost.z_ref
            du = tr.inputs[t] - env.cost.u_ref
            total += float(np.sum(Q * dz * dz) + np.sum(R * du * du))
        assert abs(total - tr.cost) <= 1e-9 * max(1.0, total)


def test_cost_horizon_mismatch(maglev):
    xs = np.tile(maglev.equilibrium_state, (6, 1))
    with pytest.raises(ConfigurationError):
        maglev.cost.total(_traj(xs, np.zeros((5, 1))))


def test_cost_weight_checks():
    with pytest.raises(ConfigurationError):
        quadratic_cost(np.diag([1.0, -1.0]), np.eye(1), np.zeros(2), np.zeros(1), 5)
    with pytest.raises(ConfigurationError):
        quadratic_cost(np.eye(2), np.zeros((1, 1)), np.zeros(2), np.zeros(1), 5)


def test_maglev_equilibrium_holds(maglev):
    x = maglev.equilibrium_state
    res = maglev.system.step(x, maglev.equilibrium_input) - x
    assert np.max(np.abs(res)) < 1e-8
    assert equilibrium_current(maglev.config["physical"]) == x[2]


def test_pendulum_fixed_points(pendulum):
    up = np.zeros(4)
    down = np.array([0.0, np.pi, 0.0, 0.0])
    for x in (up, down):
        assert np.max(np.abs(pendulum.system.step(x, np.zeros(1)) - x)) < 1e-8


def test_pendulum_energy_conserved_without_damping(pendulum):
    p = dict(pendulum.config["physical"], Dr=0.0, Dp=0.0)
    step = rk4_step(pendulum_rhs_factory(p, actuated=False), pendulum.dt)
    x = np.array([0.0, 2.5, 0.3, 0.0])
    e0 = pendulum_energy(p, x)
    for _ in range(1000):
        x = step(x, np.zeros(1))
    assert abs(pendulum_energy(p, x) - e0) / abs(e0) < 1e-3


def test_zero_disturbance_identical(maglev):
    base = make_base_controller(maglev)
    x0 = maglev.initial_conditions(0, "dist", count=1)[0]
    a = simulate(maglev.system, base, x0, 50)
    b = simulate(apply_disturbance(maglev.system, np.zeros(3), np.zeros(2)), base, x0, 50)
    assert np.array_equal(a.states, b.states)


def test_initial_conditions_within_box(maglev, pendulum):
    x = pendulum.initial_conditions(0, "box", count=500)
    assert np.all(np.abs(x[:, 1]) <= np.pi) and np.all(np.abs(x[:, 0]) <= np.pi / 2)
    assert np.all(np.abs(x[:, 2:]) <= 0.5)
    xm = maglev.initial_conditions(0, "box", count=500) - maglev.equilibrium_state
    assert np.all(np.abs(xm[:, 0]) <= 0.02) and np.all(np.abs(xm[:, 1]) <= 0.05)
    assert np.all(np.abs(xm[:, 2]) <= 0.2 * maglev.equilibrium_state[2] + 1e-15)


def test_initial_conditions_stable_under_count(maglev):
    a = maglev.initial_conditions(3, "k", count=5)
    b = maglev.initial_conditions(3, "k", count=50)
    assert np.array_equal(a, b[:5])


def test_config_validation_names_field():
    with pytest.raises(ConfigurationError, match="dt"):
        read_env_config("maglev", {"dt": -1.0})
    with pytest.raises(ConfigurationError):
        read_env_config("no-such-environment")


def test_overrides_change_noise():
    env = make_pendulum(overrides={"noise": {"process_std": 0.0}})
    assert np.all(env.noise.process_std == 0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4),
       st.floats(-5, 5))
def test_property_cost_nonnegative(x, u):
    env = make_environment("pendulum")
    assert env.cost.stage(np.array(x), np.array([u])) >= 0.0
