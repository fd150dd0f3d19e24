"""Controllers under evaluation: cascade PID baseline and the hybrid learned controller."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from quadftc.adaptation import EmptyHistory, HistoryBuffer, infer_latent
from quadftc.dynamics import QuadrotorParams, RigidBodyState, mixer_matrix, quat_to_rotation
from quadftc.ppo import LATENT_DIM, latent, policy_mean_action


class MissingModel(LookupError):
    pass


class ControllerMode(enum.Enum):
    PID = "pid"
    TRANSFORMER = "transformer"
    CNN = "cnn"
    PRIVILEGED = "privileged"
    ZERO_LATENT = "zero"

    @classmethod
    def parse(cls, s: str) -> ControllerMode:
        aliases = {"pidbaseline": "pid", "hybridtransformer": "transformer", "hybridcnn": "cnn",
                   "hybridprivileged": "privileged", "hybridzerolatent": "zero", "zerolatent": "zero"}
        key = s.strip().lower().replace("_", "").replace("-", "")
        return cls(aliases.get(key, key))

    @property
    def checkpoint(self) -> str | None:
        """Checkpoint stem the mode needs, relative to the model directory."""
        return {ControllerMode.PID: None, ControllerMode.TRANSFORMER: "transformer",
                ControllerMode.CNN: "cnn"}.get(self, "policy")


@dataclass
class PidGains:
    kp_pos: tuple = (6.0, 6.0, 8.0)
    kd_pos: tuple = (4.5, 4.5, 5.0)
    ki_pos: tuple = (0.3, 0.3, 1.5)
    # m/s^2; large enough to absorb +30% mass with -20% thrust coefficient
    pos_integral_limit: float = 6.0
    # position error (m) beyond which the position integrator is frozen
    integral_zone: float = 0.5
    kp_att: tuple = (120.0, 120.0, 20.0)
    kd_att: tuple = (18.0, 18.0, 6.0)
    ki_att: tuple = (10.0, 10.0, 0.0)
    att_integral_limit: float = 0.5
    max_tilt: float = 0.6
    yaw_target: float = 0.0

    def validate(self):
        from quadftc.env import InvalidConfig

        for k in ("kp_pos", "kd_pos", "ki_pos", "kp_att", "kd_att", "ki_att"):
            v = getattr(self, k)
            if len(v) != 3 or any(x < 0 for x in v):
                raise InvalidConfig(f"pid.{k}: need three non-negative gains")
        if self.pos_integral_limit <= 0 or self.att_integral_limit <= 0 or self.integral_zone <= 0:
            raise InvalidConfig("pid.*_integral_limit: must be > 0")
        if not 0 < self.max_tilt < math.pi / 2:
            raise InvalidConfig("pid.max_tilt: must lie in (0, pi/2)")


def _quat_from_rotation(R) -> np.ndarray:
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def pid_position(state: RigidBodyState, target, gains: PidGains, params: QuadrotorParams,
                 integral=None):
    """Desired collective thrust (N) and attitude quaternion from the position loop.

    ``integral`` is the accumulated position error (m s); pass None to ignore it.
    """
    e_p = np.asarray(target, dtype=np.float64) - state.position
    e_v = -state.velocity
    acc = np.asarray(gains.kp_pos) * e_p + np.asarray(gains.kd_pos) * e_v
    if integral is not None:
        acc = acc + np.clip(np.asarray(gains.ki_pos) * integral, -gains.pos_integral_limit,
                            gains.pos_integral_limit)
    acc[2] += params.gravity
    acc[2] = max(acc[2], 0.1 * params.gravity)
    horiz = math.hypot(acc[0], acc[1])
    max_h = acc[2] * math.tan(gains.max_tilt)
    if horiz > max_h:
        acc[0:2] *= max_h / horiz
    collective = params.mass * float(np.linalg.norm(acc))
    zb = acc / np.linalg.norm(acc)
    xc = np.array([math.cos(gains.yaw_target), math.sin(gains.yaw_target), 0.0])
    yb = np.cross(zb, xc)
    yb /= np.linalg.norm(yb)
    xb = np.cross(yb, zb)
    q_des = _quat_from_rotation(np.column_stack([xb, yb, zb]))
    return collective, q_des


def attitude_error(q, q_des) -> np.ndarray:
    """Body-frame rotation vector (small-angle) taking ``q`` to ``q_des``."""
    w, x, y, z = q
    qc = np.array([w, -x, -y, -z])
    a = qc
    b = np.asarray(q_des)
    qe = np.array([
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ])
    if qe[0] < 0:
        qe = -qe
    return 2.0 * qe[1:]


def allocate(collective: float, torque, params: QuadrotorParams) -> np.ndarray:
    """Inverse mixer to normalized motor commands, dropping yaw first when saturated."""
    Minv = np.linalg.inv(mixer_matrix(params))
    f_max = params.thrust_coeff * params.max_rotor_speed**2
    wrench = np.array([collective, *torque])
    f = Minv @ wrench
    if f.min() < 0.0 or f.max() > f_max:
        wrench[3] = 0.0
        f = Minv @ wrench
    f = np.clip(f, 0.0, f_max)
    return np.sqrt(f / params.thrust_coeff) / params.max_rotor_speed


def pid_attitude(state: RigidBodyState, q_des, collective: float, gains: PidGains,
                 params: QuadrotorParams, integral=None) -> np.ndarray:
    if abs(np.linalg.norm(q_des) - 1.0) > 1e-6:
        raise ValueError("desired attitude must be a unit quaternion")
    inertia = np.asarray(params.inertia_diag)
    e = attitude_error(state.attitude, q_des)
    ang = np.asarray(gains.kp_att) * e - np.asarray(gains.kd_att) * state.body_rates
    if integral is not None:
        # the accumulator itself is clamped by the caller
        ang = ang + np.asarray(gains.ki_att) * integral
    torque = inertia * ang
    return np.clip(allocate(collective, torque, params), 0.0, 1.0)


class PidController:
    """Cascade PID with anti-windup integrators; one instance per episode."""

    def __init__(self, gains: PidGains, params: QuadrotorParams, dt: float):
        self.gains = gains
        self.params = params
        self.dt = dt
        self.reset()

    def reset(self):
        self.pos_int = np.zeros(3)
        self.att_int = np.zeros(3)

    def __call__(self, state: RigidBodyState, target) -> np.ndarray:
        g = self.gains
        collective, q_des = pid_position(state, target, g, self.params, self.pos_int)
        e_att = attitude_error(state.attitude, q_des)
        cmd = pid_attitude(state, q_des, collective, g, self.params, self.att_int)
        lim_p = g.pos_integral_limit / np.maximum(np.asarray(g.ki_pos), 1e-9)
        e_p = np.asarray(target) - state.position
        e_p = np.where(np.abs(e_p) < g.integral_zone, e_p, 0.0)
        self.pos_int = np.clip(self.pos_int + e_p * self.dt, -lim_p, lim_p)
        self.att_int = np.clip(self.att_int + e_att * self.dt, -g.att_integral_limit,
                               g.att_integral_limit)
        return cmd


@dataclass
class HybridController:
    """Learned motor-level policy fed with a latent chosen by ``mode``.

    The observation carries the classical position/velocity error terms; PID
    mode bypasses the policy entirely.
    """

    mode: ControllerMode
    params: dict | None = None
    encoder_config: object = None
    history: HistoryBuffer = field(default_factory=HistoryBuffer)

    def __post_init__(self):
        if self.mode is ControllerMode.PID:
            raise ValueError("use PidController for the PID baseline")
        if self.params is None:
            raise MissingModel(f"mode {self.mode.value} needs a policy checkpoint")
        if self.mode in (ControllerMode.TRANSFORMER, ControllerMode.CNN):
            if self.encoder_config is None or not any(k.startswith("phi.") for k in self.params):
                raise MissingModel(f"mode {self.mode.value} needs a phase-2 checkpoint")

    def reset(self):
        self.history.clear()

    def latent(self, extrinsics=None) -> np.ndarray:
        if self.mode is ControllerMode.PRIVILEGED:
            if extrinsics is None:
                raise ValueError("privileged mode needs the true extrinsics")
            return latent(self.params, np.asarray(extrinsics, np.float32)[None])[0]
        if self.mode is ControllerMode.ZERO_LATENT:
            return np.zeros(LATENT_DIM, np.float32)
        try:
            return infer_latent(self.encoder_config, self.params, self.history)
        except EmptyHistory:
            return np.zeros(LATENT_DIM, np.float32)

    def act(self, observation, extrinsics=None, z=None):
        """Mean action for ``observation``; pushes (observation, action) afterwards.

        Returns (action, latent used).
        """
        if z is None:
            z = self.latent(extrinsics)
        a = policy_mean_action(self.params, np.asarray(observation, np.float32)[None], z[None])[0]
        self.history.push(observation, a)
        return a, z


def hybrid_step(state: RigidBodyState, target, history: HistoryBuffer | None, params: dict | None,
                encoder_config, mode: ControllerMode, prev_action=None, extrinsics=None,
                next_dir=(0.0, 0.0, 0.0), gains: PidGains | None = None,
                nominal: QuadrotorParams | None = None) -> np.ndarray:
    """One control decision for ``mode``.

    PID mode is the stateless pid_position/pid_attitude composition; the
    learned modes push (observation, action) into ``history`` after acting.
    """
    from quadftc.env import observe

    if mode is ControllerMode.PID:
        g = gains or PidGains()
        p = nominal or QuadrotorParams()
        collective, q_des = pid_position(state, target, g, p)
        return pid_attitude(state, q_des, collective, g, p)
    if history is None:
        history = HistoryBuffer()
    if prev_action is None:
        prev_action = np.full(4, (nominal or QuadrotorParams()).hover_command)
    ctl = HybridController(mode, params, encoder_config, history)
    obs = observe(state, target, prev_action, next_dir)
    return ctl.act(obs, extrinsics)[0]


def quat_tilt_cos(q) -> float:
    return float(quat_to_rotation(q)[2, 2])
