import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadftc.adaptation import HistoryBuffer
from quadftc.control import (ControllerMode, HybridController, MissingModel, PidController, PidGains,
                             allocate, attitude_error, hybrid_step, pid_attitude, pid_position)
from quadftc.dynamics import MotorFault, QuadrotorParams, RigidBodyState, quat_to_rotation, step_rk4
from quadftc.env import EnvConfig, InvalidConfig, extrinsics, observe
from quadftc.nn import TransformerConfig, init_encoder
from quadftc.ppo import init_policy, latent, policy_mean_action

P = QuadrotorParams()
G = PidGains()
TARGET = (0.0, 0.0, 2.0)


def test_gains_validation():
    with pytest.raises(InvalidConfig, match="pid.kp_pos"):
        PidGains(kp_pos=(-1.0, 1.0, 1.0)).validate()
    with pytest.raises(InvalidConfig):
        PidGains(max_tilt=2.0).validate()


def test_mode_parse():
    assert ControllerMode.parse("hybridtransformer") is ControllerMode.TRANSFORMER
    assert ControllerMode.parse("PidBaseline") is ControllerMode.PID
    assert ControllerMode.PID.checkpoint is None
    assert ControllerMode.ZERO_LATENT.checkpoint == "policy"


def test_position_equilibrium():
    c, q = pid_position(RigidBodyState.hover(P, TARGET), TARGET, G, P)
    assert c == pytest.approx(P.mass * P.gravity)
    assert np.allclose(q, [1, 0, 0, 0], atol=1e-12)


def test_position_hand_arithmetic():
    g = PidGains(kp_pos=(4.0, 4.0, 4.0), kd_pos=(0.0, 0.0, 0.0))
    s = RigidBodyState.hover(P, (-1.0, 0.0, 2.0))
    c, q = pid_position(s, TARGET, g, P)
    assert c == pytest.approx(0.8 * np.linalg.norm([4.0, 0.0, 9.81]), abs=1e-9)
    assert c == pytest.approx(8.475, abs=1e-3)
    zb = quat_to_rotation(q)[:, 2]
    assert np.allclose(zb, np.array([4.0, 0.0, 9.81]) / np.linalg.norm([4.0, 0.0, 9.81]))


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2), st.floats(-2, 2))
def test_position_outputs_valid(ex, ey, ez, vx, vy):
    s = RigidBodyState.hover(P, (ex, ey, 2 + ez))
    s.velocity = np.array([vx, vy, 0.0])
    c, q = pid_position(s, TARGET, G, P)
    assert c >= 0 and abs(np.linalg.norm(q) - 1) < 1e-12
    # tilt limit respected
    assert quat_to_rotation(q)[2, 2] >= np.cos(G.max_tilt) - 1e-9


def test_positive_x_error_tips_toward_x():
    s = RigidBodyState.hover(P, (-1.0, 0.0, 2.0))
    _, q = pid_position(s, TARGET, G, P)
    assert quat_to_rotation(q)[0, 2] > 0  # body z leans to +x
    # positive rotation about body y tilts body z toward +x
    assert attitude_error(s.attitude, q)[1] > 0


def test_attitude_level_hover_equal_commands():
    s = RigidBodyState.hover(P, TARGET)
    u = pid_attitude(s, np.array([1.0, 0, 0, 0]), P.mass * P.gravity, G, P)
    assert np.allclose(u, P.hover_command, atol=1e-12)


def test_pure_yaw_error_splits_pairs():
    s = RigidBodyState.hover(P, TARGET)
    yaw = 0.1
    q_des = np.array([np.cos(yaw / 2), 0, 0, np.sin(yaw / 2)])
    u = pid_attitude(s, q_des, P.mass * P.gravity, G, P)
    # 1, 2 spin one way and 3, 4 the other
    assert u[0] == pytest.approx(u[1]) and u[2] == pytest.approx(u[3])
    assert u[2] > u[0]


def test_saturation_no_nan():
    s = RigidBodyState.hover(P, TARGET)
    s.body_rates = np.array([1e4, -1e4, 1e4])
    u = pid_attitude(s, np.array([0.0, 1.0, 0.0, 0.0]), 1e3, G, P)
    assert np.all(np.isfinite(u)) and np.all((u >= 0) & (u <= 1))
    assert np.all(np.isfinite(allocate(-5.0, [1e3, 0, 0], P)))


def test_non_unit_desired_attitude_rejected():
    with pytest.raises(ValueError):
        pid_attitude(RigidBodyState.hover(P), np.array([1.0, 0.1, 0, 0]), 8.0, G, P)


def _fly_pid(start, params=P, fault=MotorFault.none(), seconds=5.0):
    ctl = PidController(G, P, 0.01)
    s = RigidBodyState.hover(params, start)
    errs = []
    for k in range(int(seconds / 0.01)):
        u = ctl(s, TARGET)
        for j in range(5):
            s = step_rk4(s, u, fault, params, k * 0.01 + j * 0.002, 0.002)
        errs.append(np.linalg.norm(s.position - np.array(TARGET)))
    return np.array(errs)


@pytest.mark.parametrize("offset", [(1, 0, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1), (0.6, 0.6, -0.5)])
def test_pid_reaches_target(offset):
    start = np.array(TARGET) + np.array(offset, float) / np.linalg.norm(offset)
    errs = _fly_pid(start)
    assert errs[-1] < 0.05
    assert np.all(errs[-100:] < 0.05)


def test_pid_commands_in_range_under_fault():
    ctl = PidController(G, P, 0.01)
    s = RigidBodyState.hover(P, (0.5, 0, 2))
    f = MotorFault((0.3, 1, 1, 1), 0.0)
    for k in range(200):
        u = ctl(s, TARGET)
        assert np.all(np.isfinite(u)) and np.all((u >= 0) & (u <= 1))
        for j in range(5):
            s = step_rk4(s, u, f, P, k * 0.01 + j * 0.002, 0.002)
        if s.position[2] < 0:
            break


# ---- hybrid ----------------------------------------------------------------

TCFG = TransformerConfig(model_dim=16, num_heads=2, num_layers=1, feedforward_dim=32, history_len=8)


def _models():
    params = init_policy(0, hover_command=P.hover_command)
    params.update(init_encoder(TCFG, np.random.default_rng(1)))
    return params


def test_hybrid_step_pid_dispatch():
    s = RigidBodyState.hover(P, (0.3, -0.2, 2.4))
    s.velocity = np.array([0.1, 0.0, -0.2])
    u = hybrid_step(s, TARGET, None, None, None, ControllerMode.PID)
    c, q = pid_position(s, TARGET, G, P)
    assert np.array_equal(u, pid_attitude(s, q, c, G, P))


def test_hybrid_missing_models():
    with pytest.raises(MissingModel):
        HybridController(ControllerMode.TRANSFORMER, None, TCFG)
    with pytest.raises(MissingModel):
        HybridController(ControllerMode.TRANSFORMER, init_policy(0), TCFG)
    with pytest.raises(MissingModel):
        hybrid_step(RigidBodyState.hover(P), TARGET, None, None, None, ControllerMode.PRIVILEGED)


def test_hybrid_zero_latent_is_transformer_with_zero_z():
    params = _models()
    s = RigidBodyState.hover(P, (0.2, 0.1, 2.1))
    hz, ht = HistoryBuffer(8), HistoryBuffer(8)
    u0 = hybrid_step(s, TARGET, hz, params, TCFG, ControllerMode.ZERO_LATENT)
    ctl = HybridController(ControllerMode.TRANSFORMER, params, TCFG, ht)
    obs = observe(s, TARGET, np.full(4, P.hover_command))
    u1, _ = ctl.act(obs, z=np.zeros(8, np.float32))
    assert np.array_equal(u0, u1)
    assert hz.valid_len == 1 and np.array_equal(hz.materialize(), ht.materialize())


def test_privileged_matches_transformer_with_exact_phi():
    """phi whose output is mu(e) exactly (zero regression error) gives the privileged commands."""
    params = _models()
    cfg = EnvConfig()
    eta = np.array([0.5, 1, 1, 1])
    e = extrinsics(P, eta, cfg)
    z = latent(params, e[None].astype(np.float32))[0]
    params["phi.out.w"][:] = 0.0
    params["phi.out.b"][:] = z
    s = RigidBodyState.hover(P, (0.2, 0.1, 2.1))
    hp, ht = HistoryBuffer(8), HistoryBuffer(8)
    prev = np.full(4, P.hover_command)
    for k in range(20):
        up = hybrid_step(s, TARGET, hp, params, TCFG, ControllerMode.PRIVILEGED, prev, e)
        ut = hybrid_step(s, TARGET, ht, params, TCFG, ControllerMode.TRANSFORMER, prev, e)
        if k > 0:
            assert np.max(np.abs(up - ut)) < 1e-3
        for j in range(5):
            s = step_rk4(s, up, MotorFault(tuple(eta), 0.0), P, k * 0.01 + j * 0.002, 0.002)
        prev = up


def test_hybrid_empty_history_uses_zero_latent():
    params = _models()
    ctl = HybridController(ControllerMode.TRANSFORMER, params, TCFG, HistoryBuffer(8))
    assert np.array_equal(ctl.latent(), np.zeros(8))
    obs = observe(RigidBodyState.hover(P, TARGET), TARGET, np.zeros(4))
    a, z = ctl.act(obs)
    assert np.array_equal(a, policy_mean_action(params, obs[None], np.zeros((1, 8)))[0])
    assert ctl.history.valid_len == 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_hybrid_deterministic_and_in_range(seed):
    params = _models()
    rng = np.random.default_rng(seed)
    s = RigidBodyState.hover(P, rng.uniform(-3, 3, 3))
    s.body_rates = rng.uniform(-5, 5, 3)
    outs = []
    for _ in range(2):
        h = HistoryBuffer(8)
        for _ in range(3):
            outs.append(hybrid_step(s, TARGET, h, params, TCFG, ControllerMode.TRANSFORMER))
    assert all(np.array_equal(a, b) for a, b in zip(outs[:3], outs[3:]))
    assert all(np.all((u >= 0) & (u <= 1)) for u in outs)
