"""Hover / waypoint MDP over the quadrotor model with domain randomization and LOE faults."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from quadftc import kernels
from quadftc.dynamics import MotorFault, QuadrotorParams, RigidBodyState

EXTRINSICS_DIM = 10
OBS_DIM = kernels.OBS_DIM
ACT_DIM = 4


class InvalidConfig(ValueError):
    pass


class Crash(enum.Enum):
    TILT = "tilt"
    OUT_OF_BOUNDS = "oob"
    NON_FINITE = "nonfinite"


@dataclass(frozen=True)
class EpisodeStatus:
    kind: str  # "running" | "crashed" | "time_limit"
    cause: Crash | None = None

    @property
    def done(self) -> bool:
        return self.kind != "running"

    @property
    def crashed(self) -> bool:
        return self.kind == "crashed"


_STATUS_FROM_CODE = {
    kernels.RUNNING: EpisodeStatus("running"),
    kernels.CRASH_TILT: EpisodeStatus("crashed", Crash.TILT),
    kernels.CRASH_OOB: EpisodeStatus("crashed", Crash.OUT_OF_BOUNDS),
    kernels.CRASH_NONFINITE: EpisodeStatus("crashed", Crash.NON_FINITE),
    kernels.TIME_LIMIT: EpisodeStatus("time_limit"),
}


def status_from_code(code: int) -> EpisodeStatus:
    return _STATUS_FROM_CODE[int(code)]


@dataclass
class EnvConfig:
    episode_length: float = 10.0
    control_rate: float = 100.0
    physics_dt: float = 0.002
    nominal: QuadrotorParams = field(default_factory=QuadrotorParams)
    # relative half-widths of the uniform randomization around nominal
    mass_range: float = 0.3
    arm_range: float = 0.2
    kf_range: float = 0.2
    inertia_range: float = 0.3
    motor_tau_range: float = 0.3
    eta_min: float = 0.3
    eta_max: float = 1.0
    num_faulted: int = 1
    onset_window: tuple[float, float] = (0.0, 5.0)
    # fraction of the faulted-episode draws; the rest run fault-free
    fault_probability: float = 1.0
    # OOD sampling: mass and arm_length drawn from bands this fraction of the
    # training half-width beyond each training bound (0 = in-distribution)
    ood_extension: float = 0.0
    target_mode: str = "hover"
    target: tuple[float, float, float] = (0.0, 0.0, 2.0)
    waypoint_side: float = 1.0
    init_pos_spread: float = 0.5
    init_vel_spread: float = 0.2
    init_rate_spread: float = 0.2
    w_p: float = 0.5
    w_v: float = 0.05
    w_omega: float = 0.05
    w_a: float = 0.2
    crash_penalty: float = 10.0
    pos_bound: float = 10.0
    pos_clip: float = 5.0
    rate_clip: float = 20.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        def bad(name, why):
            raise InvalidConfig(f"env.{name}: {why}")

        for name in ("mass_range", "arm_range", "kf_range", "inertia_range", "motor_tau_range"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                bad(name, "relative range must lie in [0, 1)")
        if not 0.0 <= self.eta_min <= self.eta_max <= 1.0:
            bad("eta_min", "need 0 <= eta_min <= eta_max <= 1")
        if not 0 <= self.num_faulted <= 4:
            bad("num_faulted", "must be in 0..4")
        lo, hi = self.onset_window
        if not 0.0 <= lo <= hi:
            bad("onset_window", "need 0 <= start <= end")
        if not 0.0 <= self.fault_probability <= 1.0:
            bad("fault_probability", "must lie in [0, 1]")
        if self.ood_extension < 0.0:
            bad("ood_extension", "must be >= 0")
        if self.target_mode not in ("hover", "waypoints"):
            bad("target_mode", "must be 'hover' or 'waypoints'")
        for name in ("w_p", "w_v", "w_omega", "w_a", "crash_penalty"):
            if getattr(self, name) < 0.0:
                bad(name, "weights must be >= 0")
        if self.episode_length <= 0 or self.control_rate <= 0:
            bad("episode_length", "must be positive")
        sub = self.substeps
        if sub < 1 or abs(sub * self.physics_dt * self.control_rate - 1.0) > 1e-9:
            bad("physics_dt", "control period must be an integer multiple of physics_dt")
        if not 0.0 < self.physics_dt <= 0.02:
            bad("physics_dt", "must lie in (0, 0.02]")

    @property
    def substeps(self) -> int:
        return int(round(1.0 / (self.control_rate * self.physics_dt)))

    @property
    def max_steps(self) -> int:
        return int(round(self.episode_length * self.control_rate))

    @property
    def reward_weights(self) -> np.ndarray:
        return np.array([self.w_p, self.w_v, self.w_omega, self.w_a, self.crash_penalty])

    def ranges(self) -> dict[str, tuple[float, float]]:
        """Absolute training ranges of the extrinsics components."""
        n = self.nominal
        ixx, iyy, _ = n.inertia_diag

        def rel(v, r):
            return (v * (1.0 - r), v * (1.0 + r))

        return {
            "eta": (self.eta_min, self.eta_max),
            "mass": rel(n.mass, self.mass_range),
            "arm_length": rel(n.arm_length, self.arm_range),
            "thrust_coeff": rel(n.thrust_coeff, self.kf_range),
            "ixx": rel(ixx, self.inertia_range),
            "iyy": rel(iyy, self.inertia_range),
            "motor_time_const": rel(n.motor_time_const, self.motor_tau_range),
        }


_EXT_KEYS = ("eta", "eta", "eta", "eta", "mass", "arm_length", "thrust_coeff", "ixx", "iyy",
             "motor_time_const")


def _extrinsics_bounds(config: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    r = config.ranges()
    lo = np.array([r[k][0] for k in _EXT_KEYS])
    hi = np.array([r[k][1] for k in _EXT_KEYS])
    return lo, hi


def extrinsics_raw(params: QuadrotorParams, effectiveness) -> np.ndarray:
    ixx, iyy, _ = params.inertia_diag
    return np.array([*np.asarray(effectiveness, dtype=np.float64), params.mass, params.arm_length,
                     params.thrust_coeff, ixx, iyy, params.motor_time_const])


def normalize_extrinsics(raw, config: EnvConfig) -> np.ndarray:
    """Affine map of each factor onto [-1, 1] over its training range.

    Collapsed ranges map to 0.
    """
    lo, hi = _extrinsics_bounds(config)
    raw = np.asarray(raw, dtype=np.float64)
    width = hi - lo
    safe = np.where(width > 0, width, 1.0)
    return np.where(width > 0, 2.0 * (raw - lo) / safe - 1.0, 0.0)


def denormalize_extrinsics(e, config: EnvConfig) -> np.ndarray:
    lo, hi = _extrinsics_bounds(config)
    return lo + (np.asarray(e, dtype=np.float64) + 1.0) * 0.5 * (hi - lo)


def extrinsics(params: QuadrotorParams, effectiveness, config: EnvConfig) -> np.ndarray:
    return normalize_extrinsics(extrinsics_raw(params, effectiveness), config)


def _uniform(rng, lo, hi):
    return lo if lo == hi else float(rng.uniform(lo, hi))


def _uniform_ood(rng, lo, hi, ext):
    """Draw from the two bands of width ext*(hi-lo)/2 just outside [lo, hi]."""
    w = ext * 0.5 * (hi - lo)
    if w == 0.0:
        return _uniform(rng, lo, hi)
    x = float(rng.uniform(0.0, 2.0 * w))
    return lo - w + x if x < w else hi + (x - w)


def sample_task(seed: int, config: EnvConfig):
    """Draw (params, fault, extrinsics) deterministically from ``seed``.

    The extrinsics describe the post-onset fault; before onset the
    environment reports effectiveness one for every motor.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    r = config.ranges()
    n = config.nominal
    if config.ood_extension > 0.0:
        mass = _uniform_ood(rng, *r["mass"], config.ood_extension)
        arm = _uniform_ood(rng, *r["arm_length"], config.ood_extension)
    else:
        mass = _uniform(rng, *r["mass"])
        arm = _uniform(rng, *r["arm_length"])
    kf = _uniform(rng, *r["thrust_coeff"])
    ixx = _uniform(rng, *r["ixx"])
    iyy = _uniform(rng, *r["iyy"])
    izz_nom = n.inertia_diag[2]
    izz = _uniform(rng, izz_nom * (1 - config.inertia_range), izz_nom * (1 + config.inertia_range))
    tau = _uniform(rng, *r["motor_time_const"])
    params = replace(n, mass=mass, arm_length=arm, thrust_coeff=kf,
                     inertia_diag=(ixx, iyy, izz), motor_time_const=tau)

    eta = np.ones(4)
    faulted = rng.permutation(4)[: config.num_faulted]
    levels = [_uniform(rng, config.eta_min, config.eta_max) for _ in range(config.num_faulted)]
    onset = _uniform(rng, *config.onset_window)
    if float(rng.uniform()) < config.fault_probability:
        for m, lv in zip(faulted, levels):
            eta[m] = lv
    fault = MotorFault(tuple(float(x) for x in eta), float(onset))
    return params, fault, extrinsics(params, eta, config)


def waypoints(config: EnvConfig) -> np.ndarray:
    c = np.asarray(config.target, dtype=np.float64)
    if config.target_mode == "hover":
        return c[None, :]
    h = 0.5 * config.waypoint_side
    return c + np.array([[h, h, 0.0], [-h, h, 0.0], [-h, -h, 0.0], [h, -h, 0.0]])


def target_at(config: EnvConfig, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Current waypoint and the unit direction toward the next (zero if none)."""
    wps = waypoints(config)
    k = min(int(t / config.episode_length * len(wps)), len(wps) - 1)
    if k + 1 < len(wps):
        d = wps[k + 1] - wps[k]
        d = d / np.linalg.norm(d)
    else:
        d = np.zeros(3)
    return wps[k], d


def initial_state(seed: int, params: QuadrotorParams, config: EnvConfig) -> RigidBodyState:
    rng = np.random.default_rng([seed, 1])
    wp0 = waypoints(config)[0]
    st = RigidBodyState.hover(params, wp0 + rng.uniform(-1, 1, 3) * config.init_pos_spread)
    st.velocity = rng.uniform(-1, 1, 3) * config.init_vel_spread
    st.body_rates = rng.uniform(-1, 1, 3) * config.init_rate_spread
    return st


def observe(state: RigidBodyState, target, prev_action, next_dir=(0.0, 0.0, 0.0),
            config: EnvConfig | None = None) -> np.ndarray:
    cfg = config or EnvConfig()
    return kernels.observe_batch(
        state.as_array()[None, :], np.asarray(target, dtype=np.float64)[None, :],
        np.asarray(next_dir, dtype=np.float64)[None, :],
        np.asarray(prev_action, dtype=np.float64)[None, :], cfg.pos_clip, cfg.rate_clip)[0]


def reward(state: RigidBodyState, action, prev_action, target, config: EnvConfig,
           crashed: bool = False) -> float:
    return float(kernels.reward_batch(
        state.as_array()[None, :], np.asarray(action, dtype=np.float64)[None, :],
        np.asarray(prev_action, dtype=np.float64)[None, :],
        np.asarray(target, dtype=np.float64)[None, :], config.reward_weights,
        np.array([crashed]))[0])


def status(state: RigidBodyState, t: float, config: EnvConfig, target=None) -> EpisodeStatus:
    tgt = np.asarray(config.target if target is None else target, dtype=np.float64)
    code = kernels.status_batch(state.as_array()[None, :], tgt[None, :], np.array([t]),
                                config.episode_length, config.pos_bound, np.zeros(1, dtype=bool))
    return status_from_code(code[0])


def episode_seed(master: int, env_index: int, episode: int) -> int:
    """Seed of the ``episode``-th task of env ``env_index`` in a run seeded by ``master``."""
    return int(np.random.SeedSequence([master, env_index, episode]).generate_state(1, np.uint64)[0])


class VecEnv:
    """N independent episodes stepped in lockstep; finished episodes auto-reset.

    Episode ``k`` of env ``i`` uses ``episode_seed(seed, i, k)``; alternatively an
    explicit ``task_seeds`` callable ``(i, k) -> seed`` can be supplied.
    """

    def __init__(self, config: EnvConfig, num_envs: int, seed: int, task_seeds=None):
        self.config = config
        self.n = num_envs
        self.seed = seed
        self._task_seeds = task_seeds or (lambda i, k: episode_seed(seed, i, k))
        self.substeps = config.substeps
        self.dt = config.physics_dt
        self.max_steps = config.max_steps
        self.weights = config.reward_weights
        self.states = np.zeros((num_envs, kernels.STATE_DIM))
        self.params = np.zeros((num_envs, kernels.PARAM_DIM))
        self.eta = np.ones((num_envs, 4))
        self.onset = np.zeros(num_envs)
        self.steps = np.zeros(num_envs, dtype=np.int64)
        self.episodes = np.zeros(num_envs, dtype=np.int64)
        self.targets = np.zeros((num_envs, 3))
        self.next_dir = np.zeros((num_envs, 3))
        self.prev_action = np.zeros((num_envs, 4))
        self.task_params: list[QuadrotorParams] = [None] * num_envs
        self.current_seeds = np.zeros(num_envs, dtype=np.uint64)
        self._wps = waypoints(config)
        self._ext_lo, self._ext_hi = _extrinsics_bounds(config)

    def _reset_one(self, i: int):
        seed = self._task_seeds(i, int(self.episodes[i]))
        self.current_seeds[i] = seed
        params, fault, _ = sample_task(seed, self.config)
        st = initial_state(seed, params, self.config)
        self.task_params[i] = params
        self.states[i] = st.as_array()
        self.params[i] = params.as_array()
        self.eta[i] = fault.effectiveness
        self.onset[i] = fault.onset_time
        self.steps[i] = 0
        self.prev_action[i] = params.hover_command
        self._set_targets(i)

    def _set_targets(self, i: int):
        if len(self._wps) == 1:
            self.targets[i] = self._wps[0]
            return
        t = self.steps[i] / self.config.control_rate
        tgt, d = target_at(self.config, t)
        self.targets[i] = tgt
        self.next_dir[i] = d

    def reset(self) -> np.ndarray:
        for i in range(self.n):
            self._reset_one(i)
        return self.observe()

    def observe(self) -> np.ndarray:
        return kernels.observe_batch(self.states, self.targets, self.next_dir, self.prev_action,
                                     self.config.pos_clip, self.config.rate_clip)

    def time(self) -> np.ndarray:
        return self.steps / self.config.control_rate

    def effectiveness(self) -> np.ndarray:
        t = self.steps * self.substeps * self.dt
        return np.where((t >= self.onset)[:, None], self.eta, 1.0)

    def extrinsics(self) -> np.ndarray:
        """Current normalized extrinsics (effectiveness as currently applied)."""
        ixx = self.params[:, kernels.P_IXX]
        iyy = self.params[:, kernels.P_IYY]
        raw = np.column_stack([self.effectiveness(), self.params[:, kernels.P_MASS],
                               self.params[:, kernels.P_ARM], self.params[:, kernels.P_KF],
                               ixx, iyy, self.params[:, kernels.P_TAU]])
        width = self._ext_hi - self._ext_lo
        safe = np.where(width > 0, width, 1.0)
        return np.where(width > 0, 2.0 * (raw - self._ext_lo) / safe - 1.0, 0.0)

    def step(self, actions):
        """Apply one control step.

        Returns (obs, rewards, dones, info).  ``info`` holds ``status`` codes,
        ``timeout`` flags and ``final_obs`` (pre-reset observations).
        """
        actions = np.asarray(actions, dtype=np.float64)
        new, bad = kernels.step_batch(self.states, actions, self.eta, self.onset, self.params,
                                      self.steps * self.substeps, self.dt, self.substeps)
        self.states = new
        self.steps += 1
        if len(self._wps) > 1:
            for i in range(self.n):
                self._set_targets(i)
        codes = kernels.status_batch(self.states, self.targets, self.time(),
                                     self.config.episode_length, self.config.pos_bound, bad)
        crashed = (codes == kernels.CRASH_TILT) | (codes == kernels.CRASH_OOB) | (
            codes == kernels.CRASH_NONFINITE)
        scored = np.nan_to_num(self.states, nan=0.0, posinf=0.0, neginf=0.0) if bad.any() else self.states
        rewards = kernels.reward_batch(scored, actions, self.prev_action, self.targets, self.weights,
                                       crashed)
        self.prev_action = np.clip(actions, 0.0, 1.0)
        dones = codes != kernels.RUNNING
        info = {"status": codes, "timeout": codes == kernels.TIME_LIMIT}
        if dones.any():
            obs_final = self.observe()
            if bad.any():
                obs_final = np.nan_to_num(obs_final, nan=0.0, posinf=0.0, neginf=0.0)
            info["final_obs"] = obs_final
            info["final_ext"] = self.extrinsics()
            for i in np.flatnonzero(dones):
                self.episodes[i] += 1
                self._reset_one(i)
        return self.observe(), rewards, dones, info
