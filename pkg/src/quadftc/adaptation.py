"""Online adaptation: history buffers, latent inference, and phase-2 regression of z from history.

Phase 2 freezes the policy and the privileged encoder and fits the sequence
encoder ``phi`` so that ``phi(history) ~ mu(e)``.  Rollouts are driven by the
policy's mean action fed with ``phi``'s own estimate, which is the input
distribution seen at deployment.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from quadftc.env import ACT_DIM, OBS_DIM, EnvConfig, VecEnv, episode_seed
from quadftc.nn import autodiff as ad
from quadftc.nn import checkpoint
from quadftc.nn.autodiff import ShapeMismatch, Tape
from quadftc.nn.layers import CnnConfig, TransformerConfig, encode, encoder_forward, init_encoder
from quadftc.nn.optim import AdamState, adam_step, clip_grad_norm
from quadftc.ppo import LATENT_DIM, OBS_SCALE, NonFiniteLoss, latent, policy_mean_action

log = logging.getLogger(__name__)

TOKEN_DIM = OBS_DIM + ACT_DIM
TOKEN_SCALE = np.concatenate([OBS_SCALE, np.ones(ACT_DIM, np.float32)])
PHASE2_LOG_COLUMNS = ["iteration", "env_steps", "train_mse", "holdout_mse"]


class EmptyHistory(LookupError):
    pass


class HistoryBuffer:
    """Ring buffer of the last ``capacity`` (observation, action) pairs."""

    def __init__(self, capacity: int = 50):
        self.capacity = capacity
        self._data = np.zeros((capacity, TOKEN_DIM), dtype=np.float32)
        self._next = 0
        self.valid_len = 0

    def push(self, observation, action) -> HistoryBuffer:
        obs = np.asarray(observation, dtype=np.float32).reshape(-1)
        act = np.asarray(action, dtype=np.float32).reshape(-1)
        if obs.shape != (OBS_DIM,) or act.shape != (ACT_DIM,):
            raise ShapeMismatch(f"expected ({OBS_DIM},) and ({ACT_DIM},), got {obs.shape} {act.shape}")
        self._data[self._next, :OBS_DIM] = obs
        self._data[self._next, OBS_DIM:] = act
        self._next = (self._next + 1) % self.capacity
        self.valid_len = min(self.valid_len + 1, self.capacity)
        return self

    def clear(self):
        self._data[:] = 0.0
        self._next = 0
        self.valid_len = 0

    def materialize(self) -> np.ndarray:
        """(capacity, 26) window: rows 0..valid_len-1 oldest to newest, zeros after."""
        out = np.zeros_like(self._data)
        n = self.valid_len
        if n:
            start = (self._next - n) % self.capacity
            idx = (start + np.arange(n)) % self.capacity
            out[:n] = self._data[idx]
        return out


class BatchHistory:
    """HistoryBuffer for N environments in lockstep."""

    def __init__(self, n: int, capacity: int = 50):
        self.n = n
        self.capacity = capacity
        self._data = np.zeros((n, capacity, TOKEN_DIM), dtype=np.float32)
        self._next = np.zeros(n, dtype=np.int64)
        self.valid_len = np.zeros(n, dtype=np.int64)

    def push(self, obs, actions):
        rows = np.arange(self.n)
        self._data[rows, self._next, :OBS_DIM] = obs
        self._data[rows, self._next, OBS_DIM:] = actions
        self._next = (self._next + 1) % self.capacity
        self.valid_len = np.minimum(self.valid_len + 1, self.capacity)

    def reset(self, i: int):
        self._data[i] = 0.0
        self._next[i] = 0
        self.valid_len[i] = 0

    def materialize(self) -> np.ndarray:
        H = self.capacity
        k = np.arange(H)[None, :]
        start = (self._next - self.valid_len) % H
        idx = (start[:, None] + k) % H
        out = np.take_along_axis(self._data, idx[:, :, None], axis=1)
        out[k.repeat(self.n, 0) >= self.valid_len[:, None]] = 0.0
        return out


def encoder_input(windows) -> np.ndarray:
    return (np.asarray(windows, dtype=np.float32) * TOKEN_SCALE).astype(np.float32)


def infer_latent(config, params: dict, buffer: HistoryBuffer) -> np.ndarray:
    """Latent estimate from the buffered history; pure in (params, buffer contents)."""
    if buffer.valid_len == 0:
        raise EmptyHistory("history is empty; use the zero latent")
    return encode(config, params, encoder_input(buffer.materialize())[None],
                  np.array([buffer.valid_len]))[0]


def infer_latent_batch(config, params: dict, windows, valid_len) -> np.ndarray:
    """Latents for (B, H, 26) windows; rows with valid_len == 0 get the zero latent."""
    valid_len = np.asarray(valid_len)
    out = np.zeros((len(valid_len), LATENT_DIM), dtype=np.float32)
    ok = valid_len > 0
    if ok.any():
        out[ok] = encode(config, params, encoder_input(np.asarray(windows)[ok]), valid_len[ok])
    return out


@dataclass
class AdaptationConfig:
    encoder: str = "transformer"
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    phase2_steps: int = 500_000
    lr: float = 1e-3
    batch_size: int = 512
    rollout_steps: int = 4096
    num_envs: int = 8
    updates_per_iter: int = 8
    window_stride: int = 10
    dataset_capacity: int = 60_000
    holdout_steps: int = 4096
    max_grad_norm: float = 1.0

    def validate(self):
        from quadftc.env import InvalidConfig

        if self.encoder not in ("transformer", "cnn"):
            raise InvalidConfig("adaptation.encoder: must be 'transformer' or 'cnn'")
        for k in ("phase2_steps", "batch_size", "rollout_steps", "num_envs", "updates_per_iter",
                  "window_stride", "dataset_capacity", "holdout_steps"):
            if getattr(self, k) < 1:
                raise InvalidConfig(f"adaptation.{k}: must be >= 1")
        if self.lr <= 0:
            raise InvalidConfig("adaptation.lr: must be > 0")
        if self.rollout_steps % self.num_envs or self.holdout_steps % self.num_envs:
            raise InvalidConfig("adaptation.rollout_steps: must be a multiple of num_envs")

    @property
    def encoder_config(self):
        return self.transformer if self.encoder == "transformer" else self.cnn


def encoder_config_from_meta(meta: dict):
    kind = meta.get("encoder", "transformer")
    cfg = dict(meta.get("encoder_config", {}))
    if kind == "cnn":
        if "strides" in cfg:
            cfg["strides"] = tuple(cfg["strides"])
        return CnnConfig(**cfg)
    return TransformerConfig(**cfg)


def _rollout_windows(env: VecEnv, hist: BatchHistory, params: dict, enc_cfg, steps: int,
                     stride: int, drive: str):
    """Run ``steps`` env steps; return (windows, valid_len, z_target) sampled every ``stride``.

    ``drive`` selects the latent fed to the policy: "phi" (estimate) or "mu" (privileged).
    """
    wins, lens, targets = [], [], []
    T = steps // env.n
    obs = env.observe()
    for _ in range(T):
        z_true = latent(params, env.extrinsics().astype(np.float32))
        windows = hist.materialize()
        vl = hist.valid_len.copy()
        if drive == "phi":
            z_in = infer_latent_batch(enc_cfg, params, windows, vl)
        else:
            z_in = z_true
        take = (env.steps % stride == 0) & (vl > 0)
        if take.any():
            wins.append(windows[take])
            lens.append(vl[take])
            targets.append(z_true[take])
        act = policy_mean_action(params, obs, z_in)
        hist.push(obs, act)
        obs, _, done, _ = env.step(act)
        for i in np.flatnonzero(done):
            hist.reset(i)
    if not wins:
        return (np.zeros((0, hist.capacity, TOKEN_DIM), np.float32), np.zeros(0, np.int64),
                np.zeros((0, LATENT_DIM), np.float32))
    return np.concatenate(wins), np.concatenate(lens), np.concatenate(targets)


def regression_mse(enc_cfg, params: dict, windows, valid_len, targets, batch: int = 512) -> float:
    if len(windows) == 0:
        return float("nan")
    se = 0.0
    for s in range(0, len(windows), batch):
        pred = encode(enc_cfg, params, encoder_input(windows[s: s + batch]), valid_len[s: s + batch])
        se += float(np.sum((pred.astype(np.float64) - targets[s: s + batch]) ** 2))
    return se / (len(windows) * targets.shape[1])


def r_squared(enc_cfg, params: dict, windows, valid_len, targets) -> float:
    """1 - MSE / MSE of the constant mean predictor."""
    mse = regression_mse(enc_cfg, params, windows, valid_len, targets)
    base = float(np.mean((targets - targets.mean(axis=0)) ** 2))
    return 1.0 - mse / base if base > 0 else float("nan")


def phi_grad_step(enc_cfg, phi: dict, opt: AdamState, windows, valid_len, targets, max_grad_norm):
    tape = Tape()
    P = tape.params(phi)
    pred = encoder_forward(enc_cfg, P, tape.const(encoder_input(windows)), valid_len)
    loss = ad.mean(ad.square(ad.sub(pred, tape.const(targets.astype(np.float32)))))
    if not np.isfinite(loss.value):
        raise NonFiniteLoss(f"phase-2 loss is {loss.value}")
    tape.backward(loss)
    grads = {k: v.zero_grad_if_unused() for k, v in P.items()}
    clip_grad_norm(grads, max_grad_norm)
    phi, opt = adam_step(phi, grads, opt)
    return phi, opt, float(loss.value)


def collect_holdout(params: dict, env_config: EnvConfig, acfg: AdaptationConfig, seed: int,
                    drive: str = "mu", steps: int | None = None):
    """Windows from task seeds disjoint from training (distinct seed-stream tag)."""
    env = VecEnv(env_config, acfg.num_envs, seed,
                 task_seeds=lambda i, k: episode_seed(seed, 10_000 + i, k))
    env.reset()
    hist = BatchHistory(acfg.num_envs, acfg.encoder_config.history_len)
    return _rollout_windows(env, hist, params, acfg.encoder_config, steps or acfg.holdout_steps,
                            acfg.window_stride, drive)


def train_phase2(phase1_checkpoint, env_config: EnvConfig, acfg: AdaptationConfig, seed: int,
                 out_dir, log_every: int = 1) -> Path:
    """Fit phi; writes ``<encoder>.{json,bin}`` and ``train_phase2_<encoder>.csv``."""
    acfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base, meta1 = checkpoint.load(phase1_checkpoint)
    frozen = {k: v for k, v in base.items() if not k.startswith("phi.")}
    enc_cfg = acfg.encoder_config
    rng = np.random.default_rng([seed, 11])
    phi = init_encoder(enc_cfg, np.random.default_rng([seed, 12]))
    opt = AdamState.for_params(phi, lr=acfg.lr)

    hold = collect_holdout(frozen, env_config, acfg, seed + 1)
    env = VecEnv(env_config, acfg.num_envs, seed)
    env.reset()
    hist = BatchHistory(acfg.num_envs, enc_cfg.history_len)
    cap = acfg.dataset_capacity
    data_w = np.zeros((cap, enc_cfg.history_len, TOKEN_DIM), np.float32)
    data_l = np.zeros(cap, np.int64)
    data_z = np.zeros((cap, LATENT_DIM), np.float32)
    size = 0
    head = 0
    steps = 0
    it = 0
    t0 = time.perf_counter()
    log_path = out / f"train_phase2_{acfg.encoder}.csv"
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PHASE2_LOG_COLUMNS)
        while steps < acfg.phase2_steps:
            current = {**frozen, **phi}
            wins, lens, zs = _rollout_windows(env, hist, current, enc_cfg, acfg.rollout_steps,
                                              acfg.window_stride, "phi")
            steps += acfg.rollout_steps
            for k in range(len(wins)):
                data_w[head], data_l[head], data_z[head] = wins[k], lens[k], zs[k]
                head = (head + 1) % cap
                size = min(size + 1, cap)
            losses = []
            for _ in range(acfg.updates_per_iter):
                idx = rng.integers(0, size, size=min(acfg.batch_size, size))
                phi, opt, lv = phi_grad_step(enc_cfg, phi, opt, data_w[idx], data_l[idx], data_z[idx],
                                             acfg.max_grad_norm)
                losses.append(lv)
            hold_mse = regression_mse(enc_cfg, phi, *hold)
            w.writerow([it, steps, float(np.mean(losses)), hold_mse])
            fh.flush()
            if it % log_every == 0:
                log.info("phase2[%s] it=%d steps=%d train_mse=%.5f holdout_mse=%.5f %.0fs",
                         acfg.encoder, it, steps, float(np.mean(losses)), hold_mse,
                         time.perf_counter() - t0)
            it += 1
    meta = {**meta1, "kind": "phase2", "encoder": acfg.encoder,
            "encoder_config": asdict(enc_cfg), "phase2_seed": seed, "phase2_steps": steps,
            "phase1_hash": checkpoint.content_hash(phase1_checkpoint)}
    return checkpoint.save(out / acfg.encoder, {**base, **phi}, meta)
