from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from droneset.vehicle import (
    Command,
    DronePose,
    ShakeModel,
    ShakeState,
    VehicleParams,
    initial_shake,
    initial_state,
    sample_shake,
    step_dynamics,
    wrap_angle,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_pose_rejects_negative_altitude():
    with pytest.raises(ValueError):
        DronePose(0, 0, -0.01)


@given(finite)
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert 0.0 <= w < 2 * math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_zero_command_without_shake_keeps_pose():
    s = initial_state(DronePose(0.3, -0.2, 1.0, 0.5))
    for _ in range(100):
        s = step_dynamics(s, Command(), 0.05)
    assert s.pose == DronePose(0.3, -0.2, 1.0, 0.5)


def test_constant_velocity_integration():
    params = VehicleParams(tau_velocity=0.0, tau_yaw=0.0)
    s = initial_state(DronePose(0.0, 0.0, 1.0, 0.0))
    v = (0.3, -0.2, 0.1)
    for _ in range(200):
        s = step_dynamics(s, Command(*v), 0.01, params)
    T = 2.0
    assert abs(s.pose.x - v[0] * T) < 1e-9
    assert abs(s.pose.y - v[1] * T) < 1e-9
    assert abs(s.pose.z - 1.0 - v[2] * T) < 1e-9


def test_first_order_tracking_matches_closed_form():
    params = VehicleParams(tau_velocity=0.25)
    s = initial_state(DronePose(0.0, 0.0, 1.0, 0.0))
    for _ in range(10):
        s = step_dynamics(s, Command(0.5, 0, 0), 0.05, params)
    assert math.isclose(s.linear_velocity[0], 0.5 * (1 - math.exp(-0.5 / 0.25)), rel_tol=1e-12)


def test_dt_must_be_positive():
    with pytest.raises(ValueError):
        step_dynamics(initial_state(DronePose(0, 0, 1)), Command(), 0.0)
    with pytest.raises(ValueError):
        sample_shake(ShakeState(), ShakeModel(), -1.0)


def test_shake_model_invariants():
    with pytest.raises(ValueError):
        ShakeModel(sigma_pos=-1)
    with pytest.raises(ValueError):
        ShakeModel(tau=0)


def test_zero_sigma_gives_zero_offsets():
    m = ShakeModel(0.0, 0.0, 0.4, seed=3)
    st_ = initial_shake(m)
    assert st_.offset == (0, 0, 0, 0)
    for _ in range(500):
        st_, off = sample_shake(st_, m, 0.05)
        assert off == (0.0, 0.0, 0.0, 0.0)


def test_shake_replay_is_identical():
    m = ShakeModel(0.01, 0.02, 0.4, seed=9)

    def run():
        s = initial_shake(m)
        out = []
        for _ in range(50):
            s, off = sample_shake(s, m, 0.05)
            out.append(off)
        return out

    assert run() == run()


def _shake_trace(m: ShakeModel, n: int, dt: float) -> np.ndarray:
    s = initial_shake(m)
    out = np.empty((n, 4))
    for i in range(n):
        s, off = sample_shake(s, m, dt)
        out[i] = off
    return out


def _ar1_reference(sigma: float, tau: float, dt: float, n: int, seed: int) -> np.ndarray:
    # independent oracle: an AR(1) recursion with the same stationary law
    rng = np.random.default_rng(seed)
    a = math.exp(-dt / tau)
    x = np.empty(n)
    x[0] = sigma * rng.standard_normal()
    e = rng.standard_normal(n) * sigma * math.sqrt(1 - a * a)
    for i in range(1, n):
        x[i] = a * x[i - 1] + e[i]
    return x


@pytest.fixture(scope="module")
def long_trace():
    return _shake_trace(ShakeModel(0.01, 0.02, 0.4, seed=4), 120_000, 0.05)


def test_stationary_std_within_ten_percent(long_trace):
    assert abs(long_trace[:, 0].std() / 0.01 - 1) < 0.10
    assert abs(long_trace[:, 1].std() / 0.01 - 1) < 0.10
    assert abs(long_trace[:, 3].std() / 0.02 - 1) < 0.10
    ref = _ar1_reference(0.01, 0.4, 0.05, 120_000, seed=1)
    assert abs(ref.std() / 0.01 - 1) < 0.10


def test_autocorrelation_at_tau(long_trace):
    lag = round(0.4 / 0.05)
    for axis in range(4):
        x = long_trace[:, axis] - long_trace[:, axis].mean()
        r = float(np.dot(x[:-lag], x[lag:]) / np.dot(x, x))
        assert abs(r / math.exp(-1) - 1) < 0.15


def test_shake_is_unbiased(long_trace):
    # the standard error of the mean of an AR(1) with a=exp(-1/8) is about sigma*sqrt((1+a)/(1-a)/n)
    a = math.exp(-0.05 / 0.4)
    se = 0.01 * math.sqrt((1 + a) / (1 - a) / len(long_trace))
    assert np.all(np.abs(long_trace[:, :3].mean(axis=0)) < 4 * se)


def test_hover_command_zeroes_velocity():
    s = initial_state(DronePose(0, 0, 1, 0))
    s = step_dynamics(s, Command(0.5, 0.1, 0.2, 0.3), 0.05)
    s = step_dynamics(s, Command(hover=True), 0.05)
    assert s.linear_velocity == (0.0, 0.0, 0.0) and s.yaw_rate == 0.0


def test_shake_off_on_ground():
    m = ShakeModel(0.05, 0.05, 0.4, seed=1)
    s = initial_state(DronePose(1, 1, 0, 0), m)
    for _ in range(20):
        s = step_dynamics(s, Command(), 0.05, shake=m)
        assert (s.pose.x, s.pose.y, s.pose.z) == (1, 1, 0)


commands = st.builds(
    Command,
    st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.booleans(),
)


@given(st.lists(commands, min_size=1, max_size=40), st.integers(0, 2**32))
def test_step_invariants(cmds, seed):
    p = VehicleParams()
    m = ShakeModel(seed=seed)
    s = initial_state(DronePose(0.0, 0.0, 0.5, 1.0), m)
    for c in cmds:
        s = step_dynamics(s, c, 0.05, p, m)
        assert 0.0 <= s.pose.yaw < 2 * math.pi
        assert s.pose.z >= 0.0
        assert math.hypot(*s.linear_velocity[:2]) <= p.max_speed_xy + 1e-12
        assert abs(s.linear_velocity[2]) <= p.max_speed_z + 1e-12
        assert abs(s.yaw_rate) <= p.max_yaw_rate + 1e-12


@given(st.lists(commands, min_size=1, max_size=20), st.integers(0, 2**32))
def test_trace_determinism(cmds, seed):
    m = ShakeModel(seed=seed)

    def run():
        s = initial_state(DronePose(0.0, 0.0, 1.0, 0.0), m)
        out = []
        for c in cmds:
            s = step_dynamics(s, c, 0.05, shake=m)
            out.append(s)
        return out

    assert run() == run()
