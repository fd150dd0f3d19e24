"""Closed-loop evaluation: scenarios, episode runner, metrics, sweeps and log replay.

Episodes run in lockstep batches.  A batch always evaluates every member on
every control step (finished members are frozen), so results depend only on
the scenario, the seed list and the models.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from quadftc import kernels
from quadftc.adaptation import BatchHistory, encoder_config_from_meta, infer_latent_batch
from quadftc.control import ControllerMode, MissingModel, PidController, PidGains
from quadftc.dynamics import MotorFault, QuadrotorParams, RigidBodyState
from quadftc.env import (EnvConfig, _extrinsics_bounds, extrinsics_raw, initial_state, sample_task,
                         status_from_code, target_at)
from quadftc.nn import checkpoint
from quadftc.ppo import LATENT_DIM, LengthMismatch, latent, policy_mean_action

LOG_FORMAT = "quadftc-trajectory"
SWEEP_COLUMNS_HEAD = ["cell_id", "mode"]
SWEEP_COLUMNS_TAIL = ["episodes", "success_rate", "rmse_mean_success", "rmse_std_success",
                      "crash_tilt", "crash_oob", "crash_nonfinite", "rmse_mean_all", "errors"]


@dataclass(frozen=True)
class SuccessCriteria:
    window: float = 2.0
    threshold: float = 0.25


@dataclass(frozen=True)
class Scenario:
    """Task distribution plus controller; explicit ``params``/``fault`` override sampling."""

    env: EnvConfig = field(default_factory=EnvConfig)
    mode: ControllerMode = ControllerMode.PRIVILEGED
    params: QuadrotorParams | None = None
    fault: MotorFault | None = None
    label: str = "in-distribution"

    def task(self, seed: int):
        params, fault, _ = sample_task(seed, self.env)
        params = self.params or params
        fault = self.fault or fault
        return params, fault, initial_state(seed, params, self.env)


@dataclass
class Models:
    """Network weights for one controller mode (None for PID)."""

    params: dict | None = None
    encoder_config: object = None
    hashes: dict = field(default_factory=dict)


def load_models(model_dir, mode: ControllerMode) -> Models:
    stem = mode.checkpoint
    if stem is None:
        return Models()
    path = Path(model_dir) / stem
    try:
        params, meta = checkpoint.load(path)
    except FileNotFoundError as exc:
        raise MissingModel(f"mode {mode.value}: {exc}") from None
    enc = None
    if mode in (ControllerMode.TRANSFORMER, ControllerMode.CNN):
        if "encoder_config" not in meta:
            raise MissingModel(f"mode {mode.value}: {path} has no phase-2 encoder")
        enc = encoder_config_from_meta(meta)
    return Models(params, enc, {stem: checkpoint.content_hash(path)})


@dataclass
class EpisodeLog:
    seed: int
    t: np.ndarray            # (T,) time of each row
    state: np.ndarray        # (T, 17) state before the action
    action: np.ndarray       # (T, 4)
    effectiveness: np.ndarray
    target: np.ndarray
    reward: np.ndarray
    z: np.ndarray | None
    z_hat: np.ndarray | None
    final_state: np.ndarray
    final_t: float
    status: int
    params: QuadrotorParams
    fault: MotorFault

    def positions(self):
        """Positions and targets including the terminal state, with their times."""
        tgt_final, _ = (self.target[-1], None) if len(self.target) else (np.zeros(3), None)
        p = np.vstack([self.state[:, 0:3], self.final_state[None, 0:3]])
        ref = np.vstack([self.target, tgt_final[None]])
        t = np.append(self.t, self.final_t)
        return t, p, ref


@dataclass
class EpisodeMetrics:
    success: bool
    crash: str | None
    rmse: float
    mean_error: float
    final_error: float
    steps: int
    seed: int
    onset_time: float
    log_path: str | None = None


def rmse(positions, reference) -> float:
    p = np.asarray(positions, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if p.shape != r.shape:
        raise LengthMismatch(f"positions {p.shape} vs reference {r.shape}")
    if len(p) == 0:
        raise LengthMismatch("need at least one sample")
    return float(np.sqrt(np.mean(np.sum((p - r) ** 2, axis=-1))))


def success(errors, times, crashed: bool, episode_length: float,
            criteria: SuccessCriteria = SuccessCriteria()) -> bool:
    """No crash and mean position error over the final window strictly below threshold."""
    if crashed:
        return False
    times = np.asarray(times)
    sel = times >= episode_length - criteria.window - 1e-9
    if not sel.any():
        return False
    return bool(np.mean(np.asarray(errors)[sel]) < criteria.threshold)


def episode_metrics(log: EpisodeLog, env: EnvConfig, criteria: SuccessCriteria = SuccessCriteria()):
    st = status_from_code(log.status)
    t, p, ref = log.positions()
    err = np.linalg.norm(p - ref, axis=1)
    faulty = min(log.fault.effectiveness) < 1.0
    t0 = log.fault.onset_time if faulty else 0.0
    sel = t >= t0 - 1e-9
    if not sel.any():
        sel[-1] = True
    r = rmse(p[sel], ref[sel])
    finite = np.isfinite(err)
    return EpisodeMetrics(
        success=success(err, t, st.crashed, env.episode_length, criteria),
        crash=st.cause.value if st.crashed else None,
        rmse=r if math.isfinite(r) else math.inf,
        mean_error=float(np.mean(err[finite])) if finite.any() else math.inf,
        final_error=float(err[-1]) if finite[-1] else math.inf,
        steps=len(log.t), seed=log.seed, onset_time=log.fault.onset_time)


def _normalized_ext(raw, train_env: EnvConfig):
    lo, hi = _extrinsics_bounds(train_env)
    width = hi - lo
    safe = np.where(width > 0, width, 1.0)
    return np.where(width > 0, 2.0 * (raw - lo) / safe - 1.0, 0.0)


def run_episodes(scenario: Scenario, seeds, models: Models | None = None,
                 train_env: EnvConfig | None = None, gains: PidGains | None = None,
                 criteria: SuccessCriteria = SuccessCriteria()):
    """Run one episode per seed in lockstep; returns [(EpisodeMetrics, EpisodeLog)].

    ``train_env`` supplies the ranges used to normalize the true extrinsics
    (defaults to the stock training distribution).
    """
    env = scenario.env
    env.validate()
    mode = scenario.mode
    models = models or Models()
    train_env = train_env or EnvConfig()
    if mode is not ControllerMode.PID and models.params is None:
        raise MissingModel(f"mode {mode.value} needs a policy checkpoint")
    if mode in (ControllerMode.TRANSFORMER, ControllerMode.CNN) and models.encoder_config is None:
        raise MissingModel(f"mode {mode.value} needs a phase-2 checkpoint")
    seeds = [int(s) for s in seeds]
    n = len(seeds)
    tasks = [scenario.task(s) for s in seeds]
    qp = [tk[0] for tk in tasks]
    faults = [tk[1] for tk in tasks]
    states = np.stack([tk[2].as_array() for tk in tasks])
    params = np.stack([p.as_array() for p in qp])
    eta = np.array([f.effectiveness for f in faults], dtype=np.float64)
    onset = np.array([f.onset_time for f in faults], dtype=np.float64)
    raw_static = np.array([extrinsics_raw(p, np.ones(4))[4:] for p in qp])
    prev = np.array([[p.hover_command] * 4 for p in qp], dtype=np.float64)
    alive = np.ones(n, dtype=bool)
    codes = np.zeros(n, dtype=np.int64)
    nsub, dt = env.substeps, env.physics_dt
    hist = BatchHistory(n, models.encoder_config.history_len) if models.encoder_config else None
    pids = None
    if mode is ControllerMode.PID:
        pids = [PidController(gains or PidGains(), env.nominal, 1.0 / env.control_rate) for _ in range(n)]
    rec = {k: [[] for _ in range(n)] for k in ("t", "state", "action", "eff", "target", "reward", "z", "zh")}
    final_t = np.zeros(n)

    for k in range(env.max_steps):
        if not alive.any():
            break
        t = k / env.control_rate
        tgt, nd = target_at(env, t)
        tgts = np.broadcast_to(tgt, (n, 3)).copy()
        eff = np.where((k * nsub * dt >= onset)[:, None], eta, 1.0)
        safe_states = np.where(alive[:, None], states, 0.0) if not np.isfinite(states).all() else states
        obs = kernels.observe_batch(safe_states, tgts, np.broadcast_to(nd, (n, 3)).copy(), prev,
                                    env.pos_clip, env.rate_clip)
        z = zh = None
        if models.params is not None:
            z = latent(models.params, _normalized_ext(np.hstack([eff, raw_static]), train_env))
        if mode is ControllerMode.PID:
            act = np.zeros((n, 4))
            for i in np.flatnonzero(alive):
                act[i] = pids[i](RigidBodyState.from_array(states[i]), tgt)
        else:
            if mode is ControllerMode.PRIVILEGED:
                zin = z
            elif mode is ControllerMode.ZERO_LATENT:
                zin = np.zeros((n, LATENT_DIM), np.float32)
            else:
                zh = infer_latent_batch(models.encoder_config, models.params, hist.materialize(),
                                        hist.valid_len)
                zin = zh
            act = policy_mean_action(models.params, obs.astype(np.float32), zin).astype(np.float64)
            if hist is not None:
                hist.push(obs.astype(np.float32), act.astype(np.float32))
        idx = np.flatnonzero(alive)
        for i in idx:
            rec["t"][i].append(t)
            rec["state"][i].append(states[i].copy())
            rec["action"][i].append(act[i].copy())
            rec["eff"][i].append(eff[i])
            rec["target"][i].append(tgt)
            if z is not None:
                rec["z"][i].append(z[i])
            if zh is not None:
                rec["zh"][i].append(zh[i])
        steps_idx = np.full(len(idx), k * nsub, dtype=np.int64)
        new, bad = kernels.step_batch(states[idx], act[idx], eta[idx], onset[idx], params[idx],
                                      steps_idx, dt, nsub)
        states[idx] = new
        t_next = np.full(len(idx), (k + 1) / env.control_rate)
        c = kernels.status_batch(new, tgts[idx], t_next, env.episode_length, env.pos_bound, bad)
        crashed = (c == kernels.CRASH_TILT) | (c == kernels.CRASH_OOB) | (c == kernels.CRASH_NONFINITE)
        scored = np.nan_to_num(new, nan=0.0, posinf=0.0, neginf=0.0)
        r = kernels.reward_batch(scored, act[idx], prev[idx], tgts[idx], env.reward_weights, crashed)
        prev[idx] = np.clip(act[idx], 0.0, 1.0)
        for j, i in enumerate(idx):
            rec["reward"][i].append(float(r[j]))
            if c[j] != kernels.RUNNING:
                alive[i] = False
                codes[i] = c[j]
                final_t[i] = t_next[j]

    out = []
    for i in range(n):
        log = EpisodeLog(
            seed=seeds[i], t=np.array(rec["t"][i]), state=np.array(rec["state"][i]).reshape(-1, 17),
            action=np.array(rec["action"][i]).reshape(-1, 4),
            effectiveness=np.array(rec["eff"][i]).reshape(-1, 4),
            target=np.array(rec["target"][i]).reshape(-1, 3), reward=np.array(rec["reward"][i]),
            z=np.array(rec["z"][i]) if rec["z"][i] else None,
            z_hat=np.array(rec["zh"][i]) if rec["zh"][i] else None,
            final_state=states[i].copy(), final_t=float(final_t[i]), status=int(codes[i]),
            params=qp[i], fault=faults[i])
        out.append((episode_metrics(log, env, criteria), log))
    return out


def run_episode(scenario: Scenario, models: Models | None, seed: int, log_path=None, **kw):
    """Single episode; optionally writes the JSONL trajectory log and its sidecar."""
    metrics, log = run_episodes(scenario, [seed], models, **kw)[0]
    if log_path is not None:
        write_log(log_path, log, scenario)
        metrics.log_path = str(log_path)
    return metrics, log


# ---------------------------------------------------------------------------
# trajectory logs
# ---------------------------------------------------------------------------


def _floats(a):
    return [float(x) for x in a]


def write_log(path, log: EpisodeLog, scenario: Scenario):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for k in range(len(log.t)):
            s = log.state[k]
            row = {"t": float(log.t[k]), "position": _floats(s[0:3]), "velocity": _floats(s[3:6]),
                   "quaternion": _floats(s[6:10]), "body_rates": _floats(s[10:13]),
                   "rotor_speeds": _floats(s[13:17]), "action": _floats(log.action[k]),
                   "effectiveness": _floats(log.effectiveness[k])}
            if log.z is not None:
                row["z"] = _floats(log.z[k])
            if log.z_hat is not None:
                row["z_hat"] = _floats(log.z_hat[k])
            row["reward"] = float(log.reward[k])
            fh.write(json.dumps(row) + "\n")
    env = scenario.env
    meta = {"format": LOG_FORMAT, "version": 1, "seed": log.seed, "mode": scenario.mode.value,
            "label": scenario.label, "params": _floats(log.params.as_array()),
            "fault": {"effectiveness": list(log.fault.effectiveness), "onset_time": log.fault.onset_time},
            "physics_dt": env.physics_dt, "substeps": env.substeps, "control_rate": env.control_rate,
            "final_t": log.final_t, "final_state": _floats(log.final_state), "status": log.status}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1))
    return path


def replay(path) -> tuple[int, float]:
    """Re-simulate a trajectory log from its logged actions.

    Returns (rows checked, max absolute state deviation); 0.0 means bit-identical.
    """
    path = Path(path)
    meta = json.loads(Path(str(path) + ".meta.json").read_text())
    if meta.get("format") != LOG_FORMAT:
        raise ValueError(f"{path}: not a trajectory log")
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    states = [np.array(r["position"] + r["velocity"] + r["quaternion"] + r["body_rates"]
                       + r["rotor_speeds"], dtype=np.float64) for r in rows]
    states.append(np.array(meta["final_state"], dtype=np.float64))
    params = np.array(meta["params"], dtype=np.float64)[None]
    eta = np.array(meta["fault"]["effectiveness"], dtype=np.float64)[None]
    onset = np.array([meta["fault"]["onset_time"]], dtype=np.float64)
    nsub, dt = int(meta["substeps"]), float(meta["physics_dt"])
    cur = states[0][None].copy()
    dev = 0.0
    for k, r in enumerate(rows):
        act = np.array(r["action"], dtype=np.float64)[None]
        cur, _ = kernels.step_batch(cur, act, eta, onset, params, np.array([k * nsub], dtype=np.int64),
                                    dt, nsub)
        ref = states[k + 1]
        same = (cur[0] == ref) | (np.isnan(cur[0]) & np.isnan(ref))
        if not same.all():
            d = np.abs(cur[0] - ref)
            dev = max(dev, float(np.nanmax(np.where(same, 0.0, np.where(np.isnan(d), np.inf, d)))))
    return len(rows), dev


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def expand_grid(grid: dict) -> list[dict]:
    """``{"axes": {name: [values]}}`` (cartesian product) or ``{"cells": [{...}]}``.

    An optional ``"base"`` dict is merged into every cell.
    """
    base = dict(grid.get("base", {}))
    if "cells" in grid:
        cells = [dict(c) for c in grid["cells"]]
    else:
        axes = grid.get("axes", {})
        names = list(axes)
        cells = [dict(zip(names, combo)) for combo in itertools.product(*(axes[k] for k in names))]
    if not cells:
        raise ValueError("grid: no cells")
    return [{**base, **c} for c in cells]


def cell_env(base: EnvConfig, cell: dict) -> EnvConfig:
    """Apply a grid cell to ``base``.  ``eta`` pins the faulted level, ``onset`` the onset time."""
    kw = {}
    for k, v in cell.items():
        if k == "eta":
            kw["eta_min"] = kw["eta_max"] = float(v)
        elif k == "onset":
            kw["onset_window"] = (float(v), float(v))
        elif k in EnvConfig.__dataclass_fields__:
            kw[k] = tuple(v) if isinstance(v, list) else v
        else:
            raise ValueError(f"grid: unknown cell parameter {k!r}")
    env = replace(base, **kw)
    env.validate()
    return env


def sweep_seeds(master: int, cells: int, episodes: int) -> np.ndarray:
    """Episode seeds indexed (cell, episode); shared across modes so comparisons are matched."""
    s = np.array([[int(np.random.SeedSequence([master, 0x5EE9, c, e]).generate_state(1, np.uint64)[0])
                   for e in range(episodes)] for c in range(cells)], dtype=np.uint64)
    if len(np.unique(s)) != s.size:
        raise ValueError("seed collision in sweep grid")
    return s


def _summary(cell_id, mode, cell, metrics: list, errors: int, names):
    ok = [m for m in metrics if m.success]
    r_ok = np.array([m.rmse for m in ok])
    r_all = np.array([m.rmse for m in metrics if math.isfinite(m.rmse)])
    n = len(metrics) + errors
    causes = [m.crash for m in metrics]
    return ([cell_id, mode.value] + [json.dumps(cell[k]) if isinstance(cell.get(k), (list, tuple))
                                     else cell.get(k, "") for k in names]
            + [n, len(ok) / n if n else float("nan"),
               float(r_ok.mean()) if len(ok) else float("nan"),
               float(r_ok.std()) if len(ok) else float("nan"),
               causes.count("tilt"), causes.count("oob"), causes.count("nonfinite"),
               float(r_all.mean()) if len(r_all) else float("nan"), errors])


def sweep(cells: list[dict], modes, episodes: int, master_seed: int, models: dict, base_env=None,
          train_env=None, gains=None, out_csv=None, log_dir=None, batch: int = 100,
          criteria: SuccessCriteria = SuccessCriteria(), progress=None):
    """Evaluate every (cell, mode) on the same per-cell episode seeds.

    ``models`` maps ControllerMode to Models.  Returns (rows, per-cell metric lists).
    """
    if not cells:
        raise ValueError("grid: no cells")
    base_env = base_env or EnvConfig()
    seeds = sweep_seeds(master_seed, len(cells), episodes)
    names = sorted({k for c in cells for k in c})
    header = SWEEP_COLUMNS_HEAD + names + SWEEP_COLUMNS_TAIL
    rows, details = [], {}
    for ci, cell in enumerate(cells):
        env = cell_env(base_env, cell)
        for mode in modes:
            scen = Scenario(env, mode, label=str(cell))
            metrics, errors = [], 0
            for lo in range(0, episodes, batch):
                chunk = seeds[ci, lo: lo + batch]
                try:
                    res = run_episodes(scen, chunk, models.get(mode), train_env, gains, criteria)
                except MissingModel:
                    raise
                except Exception:
                    res = []
                    for s in chunk:
                        try:
                            res.extend(run_episodes(scen, [s], models.get(mode), train_env, gains,
                                                    criteria))
                        except Exception:
                            errors += 1
                for j, (m, log) in enumerate(res):
                    if log_dir is not None:
                        p = Path(log_dir) / f"cell{ci:03d}_{mode.value}_ep{lo + j:04d}.jsonl"
                        write_log(p, log, scen)
                        m.log_path = str(p)
                    metrics.append(m)
            rows.append(_summary(ci, mode, cell, metrics, errors, names))
            details[(ci, mode)] = metrics
            if progress is not None:
                progress(rows[-1])
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    return [dict(zip(header, r)) for r in rows], details


def latent_shift(log: EpisodeLog, at_step: int, delay: int) -> float:
    """max over k in [0, delay] of ‖ẑ[at_step + k] − ẑ[at_step − 1]‖, truncated at the log end.

    NaN if there is no estimate before ``at_step`` or none at or after it.
    """
    if log.z_hat is None or at_step < 1 or at_step >= len(log.z_hat):
        return float("nan")
    ref = log.z_hat[at_step - 1]
    seg = log.z_hat[at_step: at_step + delay + 1]
    return float(np.max(np.linalg.norm(seg - ref, axis=1)))


def metrics_dict(m: EpisodeMetrics) -> dict:
    return asdict(m)
