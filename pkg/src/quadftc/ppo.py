"""Phase-1 training: PPO on a Gaussian motor-command policy conditioned on a privileged latent.

The privileged encoder ``mu`` maps the normalized extrinsics to the latent
``z`` and is trained end-to-end through the PPO loss (policy and value
terms).  Parameters are one flat dict with prefixes ``mu``, ``pi``, ``v`` and
the vector ``log_std``.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from quadftc import kernels
from quadftc.env import ACT_DIM, EXTRINSICS_DIM, OBS_DIM, EnvConfig, VecEnv
from quadftc.nn import autodiff as ad
from quadftc.nn import checkpoint
from quadftc.nn.autodiff import Tape
from quadftc.nn.layers import init_mlp, mlp_forward
from quadftc.nn.optim import AdamState, adam_step, clip_grad_norm

log = logging.getLogger(__name__)

LATENT_DIM = 8
LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
LOG_2PI = math.log(2.0 * math.pi)

# fixed input scaling: pos err, vel, rotation cols, body rates, prev action, waypoint dir
OBS_SCALE = np.array([0.5] * 3 + [0.5] * 3 + [1.0] * 6 + [0.2] * 3 + [1.0] * 4 + [1.0] * 3,
                     dtype=np.float32)

TRAIN_LOG_COLUMNS = ["iteration", "env_steps", "mean_return", "mean_episode_len", "crash_rate",
                     "policy_loss", "value_loss", "entropy", "clip_frac", "approx_kl"]


class NonFiniteLoss(ArithmeticError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 10
    minibatch_size: int = 256
    rollout_steps: int = 4096
    num_envs: int = 8
    entropy_coef: float = 0.002
    value_coef: float = 0.5
    total_steps: int = 2_000_000
    action_std_init: float = 0.3
    lr: float = 3e-4
    # "constant" or "linear" (decay to zero over total_steps)
    lr_schedule: str = "linear"
    max_grad_norm: float = 1.0
    # value head predicts return / value_scale
    value_scale: float = 20.0
    hidden: int = 128
    mu_hidden: int = 32

    def validate(self):
        from quadftc.env import InvalidConfig

        if not 0.0 < self.gamma <= 1.0:
            raise InvalidConfig(f"ppo.gamma: must lie in (0, 1], got {self.gamma}")
        if not 0.0 < self.gae_lambda <= 1.0:
            raise InvalidConfig(f"ppo.gae_lambda: must lie in (0, 1], got {self.gae_lambda}")
        if self.clip_eps <= 0:
            raise InvalidConfig("ppo.clip_eps: must be > 0")
        for k in ("epochs", "minibatch_size", "rollout_steps", "num_envs", "total_steps"):
            if getattr(self, k) < 1:
                raise InvalidConfig(f"ppo.{k}: must be >= 1")
        if self.rollout_steps % self.num_envs:
            raise InvalidConfig("ppo.rollout_steps: must be a multiple of num_envs")
        if self.action_std_init <= 0 or self.lr <= 0:
            raise InvalidConfig("ppo.action_std_init/lr: must be > 0")
        if self.lr_schedule not in ("constant", "linear"):
            raise InvalidConfig(f"ppo.lr_schedule: unknown schedule {self.lr_schedule!r}")


# ---------------------------------------------------------------------------
# policy
# ---------------------------------------------------------------------------


def init_policy(seed: int, config: PpoConfig | None = None, hover_command: float = 0.5) -> dict:
    cfg = config or PpoConfig()
    rng = np.random.default_rng(seed)
    h = cfg.hidden
    p = {}
    p.update(init_mlp(rng, [EXTRINSICS_DIM, cfg.mu_hidden, LATENT_DIM], "mu"))
    p.update(init_mlp(rng, [OBS_DIM + LATENT_DIM, h, h, ACT_DIM], "pi"))
    p.update(init_mlp(rng, [OBS_DIM + LATENT_DIM, h, h, 1], "v"))
    # small output layer; mean starts near the nominal hover command
    p["pi2.w"] *= np.float32(0.01)
    p["pi2.b"][:] = np.float32(np.arctanh(2.0 * hover_command - 1.0))
    p["v2.w"] *= np.float32(0.1)
    p["log_std"] = np.full(ACT_DIM, np.log(cfg.action_std_init), dtype=np.float32)
    return p


def _vars(tape: Tape, params: dict, grad: bool) -> dict:
    if grad:
        return tape.params(params)
    return {k: tape.const(v) for k, v in params.items()}


def _latent(P, e):
    return mlp_forward(P, e, "mu")


def _heads(P, obs_var, z_var):
    x = ad.concat([ad.mul(obs_var, OBS_SCALE), z_var], axis=-1)
    mean = ad.mul(ad.add(mlp_forward(P, x, "pi", final_activation="tanh"), 1.0), 0.5)
    value = mlp_forward(P, x, "v")
    return mean, value


def latent(params: dict, e) -> np.ndarray:
    t = Tape(record=False)
    P = {k: t.const(v) for k, v in params.items() if k.startswith("mu")}
    return _latent(P, t.const(np.asarray(e, dtype=np.float32))).value


def policy_forward(params: dict, obs, z):
    """Returns (mean action, log_std, value) as float32 arrays."""
    t = Tape(record=False)
    P = _vars(t, params, False)
    mean, value = _heads(P, t.const(np.asarray(obs, np.float32)), t.const(np.asarray(z, np.float32)))
    log_std = np.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX)
    return mean.value, log_std, value.value[..., 0]


def gaussian_log_prob(action, mean, log_std) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64)
    ls = np.asarray(log_std, dtype=np.float64)
    d = (a - mean) * np.exp(-ls)
    return -0.5 * np.sum(d * d, axis=-1) - np.sum(ls) - 0.5 * a.shape[-1] * LOG_2PI


def policy_sample(params: dict, obs, z, rng: np.random.Generator):
    """Sample (action, log_prob); log_prob is of the unclamped draw, the action is clamped."""
    mean, log_std, _ = policy_forward(params, obs, z)
    noise = rng.standard_normal(mean.shape).astype(np.float32)
    raw = mean + np.exp(log_std) * noise
    return np.clip(raw, 0.0, 1.0), gaussian_log_prob(raw, mean, log_std), raw


def policy_mean_action(params: dict, obs, z) -> np.ndarray:
    mean, _, _ = policy_forward(params, obs, z)
    return mean


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------


def gae(rewards, values, dones, gamma: float, lam: float, last_value=0.0):
    """Advantages and returns for one trajectory (or a (T, N) batch).

    ``dones[t]`` cuts bootstrapping from step t to t+1; ``last_value`` is
    V(s_T) used when the final step is not terminal.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    if r.shape != v.shape or r.shape != d.shape:
        raise LengthMismatch(f"rewards {r.shape}, values {v.shape}, dones {d.shape}")
    single = r.ndim == 1
    if single:
        r, v, d = r[:, None], v[:, None], d[:, None]
    lv = np.broadcast_to(np.asarray(last_value, dtype=np.float64), (r.shape[1],)).copy()
    adv = kernels.gae_kernel(np.ascontiguousarray(r), np.ascontiguousarray(v),
                             np.ascontiguousarray(d), lv, float(gamma), float(lam))
    ret = adv + v
    if single:
        return adv[:, 0], ret[:, 0]
    return adv, ret


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def clipped_surrogate(ratio, adv, eps: float) -> np.ndarray:
    """Per-sample min(r A, clip(r, 1-eps, 1+eps) A)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


# ---------------------------------------------------------------------------
# update
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    obs: np.ndarray
    ext: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.obs)

    def subset(self, idx) -> Batch:
        return Batch(*(getattr(self, k)[idx] for k in
                       ("obs", "ext", "actions", "log_probs", "advantages", "returns")))


def ppo_loss(params: dict, mb: Batch, cfg: PpoConfig, grad: bool = True):
    """Build the clipped PPO objective on a tape; returns (tape, vars, loss, stats)."""
    tape = Tape()
    P = _vars(tape, params, grad)
    z = _latent(P, tape.const(mb.ext.astype(np.float32)))
    mean, v_raw = _heads(P, tape.const(mb.obs.astype(np.float32)), z)
    log_std = ad.clip(P["log_std"], LOG_STD_MIN, LOG_STD_MAX)
    diff = ad.sub(tape.const(mb.actions.astype(np.float32)), mean)
    scaled = ad.mul(diff, ad.exp(ad.mul(log_std, -1.0)))
    logp = ad.sub(ad.mul(ad.sum(ad.square(scaled), axis=-1), -0.5),
                  ad.add(ad.sum(log_std), 0.5 * ACT_DIM * LOG_2PI))
    ratio = ad.exp(ad.sub(logp, tape.const(mb.log_probs.astype(np.float32))))
    adv = tape.const(mb.advantages.astype(np.float32))
    surr = ad.minimum(ad.mul(ratio, adv), ad.mul(ad.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps), adv))
    policy_loss = ad.mul(ad.mean(surr), -1.0)
    target = tape.const((mb.returns / cfg.value_scale).astype(np.float32))
    value_loss = ad.mean(ad.square(ad.sub(ad.reshape(v_raw, (-1,)), target)))
    entropy = ad.add(ad.sum(log_std), 0.5 * ACT_DIM * (1.0 + LOG_2PI))
    loss = ad.add(ad.add(policy_loss, ad.mul(value_loss, cfg.value_coef)),
                  ad.mul(entropy, -cfg.entropy_coef))
    r = ratio.value.astype(np.float64)
    stats = {
        "policy_loss": float(policy_loss.value),
        "value_loss": float(value_loss.value),
        "entropy": float(entropy.value),
        "clip_frac": float(np.mean(np.abs(r - 1.0) > cfg.clip_eps)),
        "approx_kl": float(np.mean((r - 1.0) - np.log(r))),
    }
    return tape, P, loss, stats


def ppo_update(batch: Batch, params: dict, opt: AdamState, cfg: PpoConfig, rng: np.random.Generator):
    """Run ``cfg.epochs`` passes of minibatch Adam over ``batch``; returns (params, opt, stats)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(batch.advantages)):
        raise NonFiniteLoss("non-finite advantages")
    acc = {k: [] for k in ("policy_loss", "value_loss", "entropy", "clip_frac", "approx_kl")}
    n = len(batch)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.minibatch_size):
            mb = batch.subset(perm[s: s + cfg.minibatch_size])
            tape, P, loss, stats = ppo_loss(params, mb, cfg)
            if not np.isfinite(loss.value):
                raise NonFiniteLoss(f"loss is {loss.value}")
            tape.backward(loss)
            grads = {k: v.zero_grad_if_unused() for k, v in P.items()}
            clip_grad_norm(grads, cfg.max_grad_norm)
            params, opt = adam_step(params, grads, opt)
            for k, v in stats.items():
                acc[k].append(v)
    return params, opt, {k: float(np.mean(v)) for k, v in acc.items()}


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    obs: np.ndarray        # (T, N, 22)
    ext: np.ndarray        # (T, N, 10)
    z: np.ndarray          # (T, N, 8)
    actions: np.ndarray    # (T, N, 4) unclamped draws
    log_probs: np.ndarray  # (T, N)
    rewards: np.ndarray    # (T, N)
    values: np.ndarray     # (T, N)
    dones: np.ndarray      # (T, N)
    last_values: np.ndarray  # (N,)
    episode_returns: list
    episode_lengths: list
    episode_crashed: list

    def __len__(self):
        return self.obs.shape[0] * self.obs.shape[1]


class Collector:
    """Owns the training environments and running episode statistics."""

    def __init__(self, env_config: EnvConfig, num_envs: int, seed: int):
        self.env = VecEnv(env_config, num_envs, seed)
        self.obs = self.env.reset()
        self._ret = np.zeros(num_envs)
        self._len = np.zeros(num_envs, dtype=np.int64)

    def collect(self, params: dict, steps: int, rng: np.random.Generator, gamma: float = 0.99,
                value_scale: float = 20.0) -> Trajectory:
        n = self.env.n
        T = steps // n
        if T * n != steps:
            raise ValueError("steps must be a multiple of the number of envs")
        obs_b = np.zeros((T, n, OBS_DIM), np.float32)
        ext_b = np.zeros((T, n, EXTRINSICS_DIM), np.float32)
        z_b = np.zeros((T, n, LATENT_DIM), np.float32)
        act_b = np.zeros((T, n, ACT_DIM), np.float32)
        lp_b = np.zeros((T, n))
        rew_b = np.zeros((T, n))
        val_b = np.zeros((T, n))
        done_b = np.zeros((T, n))
        ep_ret, ep_len, ep_crash = [], [], []
        for t in range(T):
            e = self.env.extrinsics().astype(np.float32)
            z = latent(params, e)
            mean, log_std, v_raw = policy_forward(params, self.obs, z)
            noise = rng.standard_normal(mean.shape).astype(np.float32)
            raw = mean + np.exp(log_std) * noise
            lp = gaussian_log_prob(raw, mean, log_std)
            obs_next, rew, done, info = self.env.step(np.clip(raw, 0.0, 1.0))
            rew = rew.copy()
            self._ret += rew
            self._len += 1
            if done.any():
                to = info["timeout"]
                if to.any():
                    zf = latent(params, info["final_ext"][to].astype(np.float32))
                    _, _, vf = policy_forward(params, info["final_obs"][to], zf)
                    rew[to] += gamma * vf * value_scale
                for i in np.flatnonzero(done):
                    ep_ret.append(float(self._ret[i]))
                    ep_len.append(int(self._len[i]))
                    ep_crash.append(bool(not info["timeout"][i]))
                    self._ret[i] = 0.0
                    self._len[i] = 0
            obs_b[t], ext_b[t], z_b[t], act_b[t] = self.obs, e, z, raw
            lp_b[t], rew_b[t], val_b[t], done_b[t] = lp, rew, v_raw * value_scale, done
            self.obs = obs_next
        z = latent(params, self.env.extrinsics().astype(np.float32))
        _, _, last_v = policy_forward(params, self.obs, z)
        return Trajectory(obs_b, ext_b, z_b, act_b, lp_b, rew_b, val_b, done_b,
                          last_v * value_scale, ep_ret, ep_len, ep_crash)


def collect(envs: Collector, params: dict, steps: int, rng: np.random.Generator) -> Trajectory:
    return envs.collect(params, steps, rng)


def make_batch(traj: Trajectory, cfg: PpoConfig) -> Batch:
    adv, ret = gae(traj.rewards, traj.values, traj.dones, cfg.gamma, cfg.gae_lambda, traj.last_values)
    flat = lambda a: a.reshape(-1, *a.shape[2:])  # noqa: E731
    return Batch(flat(traj.obs), flat(traj.ext), flat(traj.actions), flat(traj.log_probs),
                 normalize_advantages(flat(adv)), flat(ret))


def train_phase1(config: PpoConfig, env_config: EnvConfig, seed: int, out_dir, log_every: int = 1,
                 progress=None) -> Path:
    """PPO with privileged latent; writes ``policy.{json,bin}`` and ``train_phase1.csv``."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = init_policy(seed, config, env_config.nominal.hover_command)
    opt = AdamState.for_params(params, lr=config.lr)
    rng = np.random.default_rng([seed, 7])
    coll = Collector(env_config, config.num_envs, seed)
    iters = max(1, config.total_steps // config.rollout_steps)
    steps_done = 0
    recent_crash: list = []
    t0 = time.perf_counter()
    with open(out / "train_phase1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAIN_LOG_COLUMNS)
        for it in range(iters):
            traj = coll.collect(params, config.rollout_steps, rng, config.gamma, config.value_scale)
            steps_done += len(traj)
            batch = make_batch(traj, config)
            if config.lr_schedule == "linear":
                opt.lr = config.lr * (1.0 - it / iters)
            params, opt, stats = ppo_update(batch, params, opt, config, rng)
            recent_crash = (recent_crash + traj.episode_crashed)[-100:]
            row = [it, steps_done,
                   float(np.mean(traj.episode_returns)) if traj.episode_returns else float("nan"),
                   float(np.mean(traj.episode_lengths)) if traj.episode_lengths else float("nan"),
                   float(np.mean(traj.episode_crashed)) if traj.episode_crashed else float("nan"),
                   stats["policy_loss"], stats["value_loss"], stats["entropy"], stats["clip_frac"],
                   stats["approx_kl"]]
            w.writerow(row)
            fh.flush()
            if it % log_every == 0:
                log.info("phase1 it=%d steps=%d ret=%.1f len=%.0f crash=%.2f (last100 %.2f) "
                         "std=%.3f kl=%.4f %.0fs", it, steps_done, row[2], row[3], row[4],
                         float(np.mean(recent_crash)) if recent_crash else float("nan"),
                         float(np.exp(params["log_std"]).mean()), stats["approx_kl"],
                         time.perf_counter() - t0)
            if progress is not None:
                progress(it, params)
    meta = {"kind": "phase1", "seed": seed, "ppo": asdict(config), "latent_dim": LATENT_DIM,
            "env_steps": steps_done}
    return checkpoint.save(out / "policy", params, meta)
