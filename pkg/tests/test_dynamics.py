import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import ballistic
from quadftc.dynamics import (MotorFault, NonFiniteState, QuadrotorParams, RigidBodyState, fault_at,
                              mixer_matrix, mixer_wrench, quat_to_rotation, rotor_forces, simulate,
                              state_derivative, step_rk4)

P = QuadrotorParams()


def test_params_validation():
    with pytest.raises(ValueError):
        QuadrotorParams(mass=-1.0)
    with pytest.raises(ValueError):
        QuadrotorParams(inertia_diag=(1e-3, 0.0, 1e-3))
    # 4 * kf * wmax^2 must exceed m g
    with pytest.raises(ValueError):
        QuadrotorParams(mass=2.0)
    assert P.hover_rotor_speed == pytest.approx(np.sqrt(P.mass * P.gravity / (4 * P.thrust_coeff)))
    assert P.hover_command == pytest.approx(P.hover_rotor_speed / P.max_rotor_speed)


def test_params_roundtrip():
    q = QuadrotorParams(mass=0.9, inertia_diag=(4e-3, 6e-3, 8e-3), arm_length=0.2)
    assert QuadrotorParams.from_array(q.as_array()) == q


def test_fault_schedule():
    f = MotorFault((0.4, 1, 1, 1), 2.0)
    assert np.array_equal(fault_at(f, 1.9), np.ones(4))
    assert np.array_equal(fault_at(f, 2.0), [0.4, 1, 1, 1])
    assert np.array_equal(fault_at(MotorFault((1, 1, 1, 1), 3.0), 5.0), np.ones(4))
    with pytest.raises(ValueError):
        MotorFault((1.2, 1, 1, 1), 0.0)
    with pytest.raises(ValueError):
        MotorFault((1, 1, 1, 1), -1.0)


def test_rotor_forces_examples():
    p = QuadrotorParams(thrust_coeff=1e-6, max_rotor_speed=3000.0)
    f, _ = rotor_forces([2000] * 4, np.ones(4), p)
    assert f[0] == pytest.approx(4.0)
    f, _ = rotor_forces([2000] * 4, [0.5, 1, 1, 1], p)
    assert f[0] == pytest.approx(2.0)
    f, q = rotor_forces([2000] * 4, [0.0, 1, 1, 1], p)
    assert f[0] == 0.0 and q[0] == 0.0


@given(st.floats(0, 1200), st.floats(0, 1200), st.floats(0, 1), st.floats(0, 1))
def test_rotor_forces_monotone(w1, w2, e1, e2):
    lo_w, hi_w = sorted((w1, w2))
    lo_e, hi_e = sorted((e1, e2))
    f_lo, q_lo = rotor_forces([lo_w] * 4, [lo_e] * 4, P)
    f_hi, q_hi = rotor_forces([hi_w] * 4, [hi_e] * 4, P)
    assert np.all(f_lo >= 0) and np.all(f_lo <= f_hi) and np.all(q_lo <= q_hi)


def test_mixer_equal_thrusts_cancel():
    c, tau = mixer_wrench([2.0] * 4, [0.05] * 4, P)
    assert c == 8.0
    assert np.array_equal(tau, np.zeros(3))


def test_mixer_matches_cross_product():
    # motor positions in the body frame (x forward, y left): 1 FR, 2 BL, 3 FL, 4 BR
    d = P.arm_length / np.sqrt(2)
    pos = np.array([[d, -d, 0], [-d, d, 0], [d, d, 0], [-d, -d, 0]])
    # spin directions: 1, 2 counter-clockwise (reaction torque -z), 3, 4 clockwise (+z)
    spin = np.array([-1, -1, 1, 1])
    rng = np.random.default_rng(0)
    for _ in range(20):
        f = rng.uniform(0, 4, 4)
        q = rng.uniform(0, 0.1, 4)
        tau_ref = sum(np.cross(pos[i], [0, 0, f[i]]) for i in range(4)) + np.array([0, 0, spin @ q])
        c, tau = mixer_wrench(f, q, P)
        assert c == pytest.approx(f.sum())
        assert np.allclose(tau, tau_ref, atol=1e-14)


def test_mixer_matrix_consistent_with_wrench():
    f = np.array([1.0, 2.0, 1.5, 0.5])
    c, tau = mixer_wrench(f, f * P.torque_coeff / P.thrust_coeff, P)
    assert np.allclose(mixer_matrix(P) @ f, [c, *tau], atol=1e-14)


def test_single_motor_torque_magnitude():
    c, tau = mixer_wrench([1.0, 0, 0, 0], [0, 0, 0, 0], P)
    d = P.arm_length / np.sqrt(2)
    assert abs(tau[0]) == pytest.approx(d) and abs(tau[1]) == pytest.approx(d)


def test_hover_one_step():
    s = step_rk4(RigidBodyState.hover(P), np.full(4, P.hover_command), MotorFault.none(), P, 0.0, 0.01)
    assert np.max(np.abs(s.velocity)) < 1e-9
    assert np.max(np.abs(s.body_rates)) < 1e-9


def test_hover_equilibrium_drift():
    s0 = RigidBodyState.hover(P, (0.0, 0.0, 2.0))
    traj = simulate(s0, np.full((1000, 4), P.hover_command), MotorFault.none(), P, 0.01)
    assert np.max(np.abs(traj[:, 0:3] - traj[0, 0:3])) < 1e-6


def test_free_fall_matches_ballistic():
    s0 = RigidBodyState(position=np.array([0.0, 0.0, 5.0]))
    s1 = step_rk4(s0, np.zeros(4), MotorFault.none(), P, 0.0, 0.01)
    assert s1.position[2] - 5.0 == pytest.approx(-4.905e-4, abs=1e-12)
    assert s1.velocity[2] == pytest.approx(-0.0981, abs=1e-12)
    traj = simulate(s0, np.zeros((100, 4)), MotorFault.none(), P, 0.01)
    z, vz = ballistic(5.0, 0.0, P.gravity, 1.0)
    assert abs(traj[-1, 2] - z) < 1e-9
    assert abs(traj[-1, 5] - vz) < 1e-9


def test_full_effectiveness_is_identity():
    rng = np.random.default_rng(3)
    cmds = rng.uniform(0.5, 0.8, (300, 4))
    s0 = RigidBodyState.hover(P, (0, 0, 2))
    a = simulate(s0, cmds, MotorFault.none(), P, 0.002)
    b = simulate(s0, cmds, MotorFault((1.0, 1.0, 1.0, 1.0), 0.1), P, 0.002)
    assert np.array_equal(a, b)


def test_fault_reduces_thrust_after_onset():
    s0 = RigidBodyState.hover(P, (0, 0, 2))
    cmds = np.full((200, 4), P.hover_command)
    traj = simulate(s0, cmds, MotorFault((0.5, 1, 1, 1), 0.2), P, 0.002)
    onset_k = 100
    assert np.max(np.abs(traj[: onset_k + 1, 3:6])) < 1e-9
    assert traj[-1, 2] < 2.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_quaternion_norm_preserved(seed):
    rng = np.random.default_rng(seed)
    s0 = RigidBodyState.hover(P, (0, 0, 2))
    s0.body_rates = rng.uniform(-3, 3, 3)
    traj = simulate(s0, rng.uniform(0, 1, (200, 4)), MotorFault.none(), P, 0.002)
    norms = np.linalg.norm(traj[:, 6:10], axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-9


def test_rotor_speeds_clamped():
    s = RigidBodyState.hover(P)
    for _ in range(400):
        s = step_rk4(s, np.ones(4) * 1.5, MotorFault.none(), P, 0.0, 0.01)
    assert np.all(s.rotor_speeds <= P.max_rotor_speed)


def test_step_validates_dt_and_nonfinite():
    s = RigidBodyState.hover(P)
    with pytest.raises(ValueError):
        step_rk4(s, np.zeros(4), MotorFault.none(), P, 0.0, 0.05)
    bad = RigidBodyState.hover(P)
    bad.velocity = np.array([np.nan, 0, 0])
    with pytest.raises(NonFiniteState):
        step_rk4(bad, np.zeros(4), MotorFault.none(), P, 0.0, 0.01)


def test_derivative_rejects_non_unit_quaternion():
    s = RigidBodyState.hover(P)
    s.attitude = np.array([1.0, 0.1, 0.0, 0.0])
    with pytest.raises(ValueError):
        state_derivative(s, (0.0, np.zeros(3)), np.zeros(4), P)


def test_rotation_is_orthonormal():
    q = np.array([0.9, 0.1, -0.3, 0.2])
    q /= np.linalg.norm(q)
    R = quat_to_rotation(q)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-14)
    assert np.linalg.det(R) == pytest.approx(1.0)
