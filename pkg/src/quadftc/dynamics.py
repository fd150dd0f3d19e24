"""6-DOF quadrotor rigid-body model with per-motor loss-of-effectiveness faults.

Frame conventions: world is z-up, body is x-forward / y-left / z-up.  Motors
sit in an X layout::

    3 (FL, CW)    1 (FR, CCW)
            \\   /
             [ ]
            /   \\
    2 (BL, CCW)   4 (BR, CW)

Indices in arrays are zero-based, so "motor 1" is element 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from quadftc import kernels
from quadftc.kernels import STATE_DIM


class NonFiniteState(ArithmeticError):
    """Integration produced NaN or inf; the episode must terminate."""


@dataclass(frozen=True)
class QuadrotorParams:
    mass: float = 0.8
    inertia_diag: tuple[float, float, float] = (5e-3, 5e-3, 9e-3)
    arm_length: float = 0.17
    thrust_coeff: float = 3.25e-6
    torque_coeff: float = 7.5e-8
    motor_time_const: float = 0.05
    max_rotor_speed: float = 1200.0
    gravity: float = 9.81

    def __post_init__(self):
        vals = [self.mass, *self.inertia_diag, self.arm_length, self.thrust_coeff,
                self.torque_coeff, self.motor_time_const, self.max_rotor_speed, self.gravity]
        if len(self.inertia_diag) != 3:
            raise ValueError("inertia_diag needs three entries")
        if not all(math.isfinite(v) and v > 0 for v in vals):
            raise ValueError(f"quadrotor parameters must be finite and positive: {self}")
        if 4.0 * self.thrust_coeff * self.max_rotor_speed**2 <= self.mass * self.gravity:
            raise ValueError("hover is not achievable with these parameters")

    def as_array(self) -> np.ndarray:
        ixx, iyy, izz = self.inertia_diag
        return np.array([self.mass, ixx, iyy, izz, self.arm_length, self.thrust_coeff,
                         self.torque_coeff, self.motor_time_const, self.max_rotor_speed,
                         self.gravity], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> QuadrotorParams:
        a = [float(x) for x in a]
        return cls(mass=a[0], inertia_diag=(a[1], a[2], a[3]), arm_length=a[4],
                   thrust_coeff=a[5], torque_coeff=a[6], motor_time_const=a[7],
                   max_rotor_speed=a[8], gravity=a[9])

    @property
    def hover_rotor_speed(self) -> float:
        return math.sqrt(self.mass * self.gravity / (4.0 * self.thrust_coeff))

    @property
    def hover_command(self) -> float:
        return self.hover_rotor_speed / self.max_rotor_speed


@dataclass(frozen=True)
class MotorFault:
    effectiveness: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    onset_time: float = 0.0

    def __post_init__(self):
        if len(self.effectiveness) != 4:
            raise ValueError("effectiveness needs four entries")
        if not all(0.0 <= e <= 1.0 for e in self.effectiveness):
            raise ValueError(f"effectiveness must lie in [0, 1]: {self.effectiveness}")
        if not self.onset_time >= 0.0:
            raise ValueError("onset_time must be >= 0")

    @classmethod
    def none(cls) -> MotorFault:
        return cls()


@dataclass
class RigidBodyState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attitude: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    body_rates: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotor_speeds: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity, self.attitude,
                               self.body_rates, self.rotor_speeds]).astype(np.float64)

    @classmethod
    def from_array(cls, a) -> RigidBodyState:
        a = np.asarray(a, dtype=np.float64)
        return cls(a[0:3].copy(), a[3:6].copy(), a[6:10].copy(), a[10:13].copy(), a[13:17].copy())

    @classmethod
    def hover(cls, params: QuadrotorParams, position=(0.0, 0.0, 0.0)) -> RigidBodyState:
        st = cls(position=np.asarray(position, dtype=np.float64))
        st.rotor_speeds = np.full(4, params.hover_rotor_speed)
        return st


def fault_at(fault: MotorFault, t: float) -> np.ndarray:
    """Effectiveness vector in force at time ``t`` (onset inclusive)."""
    if t >= fault.onset_time:
        return np.asarray(fault.effectiveness, dtype=np.float64)
    return np.ones(4)


def rotor_forces(rotor_speeds, effectiveness, params: QuadrotorParams):
    """Per-motor thrust (N) and drag-torque magnitude (N m)."""
    w = np.asarray(rotor_speeds, dtype=np.float64)
    eff = np.asarray(effectiveness, dtype=np.float64)
    thrust = eff * params.thrust_coeff * w * w
    drag = eff * params.torque_coeff * w * w
    return thrust, drag


def mixer_matrix(params: QuadrotorParams) -> np.ndarray:
    """Map from per-motor thrust to (collective, tau_x, tau_y, tau_z)."""
    d = params.arm_length * kernels.SQRT1_2
    c = params.torque_coeff / params.thrust_coeff
    return np.array([
        [1.0, 1.0, 1.0, 1.0],
        [-d, d, d, -d],
        [-d, d, -d, d],
        [-c, -c, c, c],
    ])


def mixer_wrench(thrusts, drag_torques, params: QuadrotorParams):
    """Returns (collective, torque[3]) in the body frame."""
    f1, f2, f3, f4 = (float(x) for x in thrusts)
    q1, q2, q3, q4 = (float(x) for x in drag_torques)
    d = params.arm_length * kernels.SQRT1_2
    collective = f1 + f2 + f3 + f4
    torque = np.array([
        d * (-f1 + f2 + f3 - f4),
        d * (-f1 + f2 - f3 + f4),
        -q1 - q2 + q3 + q4,
    ])
    return collective, torque


def quat_to_rotation(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def state_derivative(state: RigidBodyState, wrench, command, params: QuadrotorParams):
    """Newton-Euler derivative given an explicit body wrench.

    ``wrench`` is ``(collective, torque[3])``; rotor speeds relax toward
    ``command * max_rotor_speed`` with the motor time constant.
    """
    collective, torque = wrench
    q = state.attitude
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise ValueError("attitude quaternion is not unit norm")
    inertia = np.asarray(params.inertia_diag)
    w = state.body_rates
    accel = quat_to_rotation(q)[:, 2] * collective / params.mass - np.array([0.0, 0.0, params.gravity])
    ang_accel = (np.asarray(torque) - np.cross(w, inertia * w)) / inertia
    qdot = 0.5 * quat_multiply(q, np.array([0.0, *w]))
    u = np.clip(np.asarray(command, dtype=np.float64), 0.0, 1.0)
    wdot = (u * params.max_rotor_speed - state.rotor_speeds) / params.motor_time_const
    return RigidBodyState(state.velocity.copy(), accel, qdot, ang_accel, wdot)


def step_rk4(state: RigidBodyState, command, fault: MotorFault, params: QuadrotorParams,
             t: float, dt: float) -> RigidBodyState:
    """One classical RK4 step; effectiveness is held at its value at ``t``."""
    if not 0.0 < dt <= 0.02:
        raise ValueError(f"dt must lie in (0, 0.02], got {dt}")
    s = state.as_array()[None, :]
    eta = np.asarray(fault_at(fault, t), dtype=np.float64)[None, :]
    # effectiveness already resolved for t; onset 0 keeps it active in the kernel
    out, bad = kernels.step_batch(
        s, np.asarray(command, dtype=np.float64).reshape(1, 4), eta, np.zeros(1),
        params.as_array()[None, :], np.zeros(1, dtype=np.int64), float(dt), 1)
    if bad[0]:
        raise NonFiniteState("non-finite state after RK4 step")
    return RigidBodyState.from_array(out[0])


def simulate(state: RigidBodyState, commands, fault: MotorFault, params: QuadrotorParams,
             dt: float, t0: float = 0.0) -> np.ndarray:
    """Integrate a command sequence (one command per step); returns (N+1, 17) states."""
    commands = np.asarray(commands, dtype=np.float64)
    traj = np.empty((len(commands) + 1, STATE_DIM))
    traj[0] = state.as_array()
    p = params.as_array()[None, :]
    eta = np.asarray(fault.effectiveness, dtype=np.float64)[None, :]
    onset = np.array([fault.onset_time])
    k0 = int(round(t0 / dt))
    for k, u in enumerate(commands):
        out, bad = kernels.step_batch(traj[k][None, :], u[None, :], eta, onset, p,
                                      np.array([k0 + k], dtype=np.int64), float(dt), 1)
        if bad[0]:
            raise NonFiniteState(f"non-finite state at step {k}")
        traj[k + 1] = out[0]
    return traj

