import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from quadftc.control import ControllerMode, MissingModel
from quadftc.dynamics import MotorFault, QuadrotorParams
from quadftc.env import EnvConfig
from quadftc.evaluation import (Models, Scenario, SuccessCriteria, cell_env, expand_grid,
                                latent_shift, load_models, replay, rmse, run_episode, run_episodes, success,
                                sweep, sweep_seeds)
from quadftc.ppo import LengthMismatch, init_policy

NOMINAL = QuadrotorParams()
SHORT = EnvConfig(episode_length=3.0)
PID = ControllerMode.PID


def test_rmse_examples():
    p = np.random.default_rng(0).normal(size=(5, 3))
    assert rmse(p, p) == 0.0
    assert rmse(p + [0.1, 0, 0], p) == pytest.approx(0.1)
    assert rmse([[0.3, 0, 0], [0, 0.4, 0]], np.zeros((2, 3))) == pytest.approx(0.35355, abs=1e-5)
    with pytest.raises(LengthMismatch):
        rmse(np.zeros((3, 3)), np.zeros((2, 3)))


def test_success_definition():
    t = np.arange(0, 10, 0.01)
    assert not success(np.zeros_like(t), t, True, 10.0)
    assert success(np.zeros_like(t), t, False, 10.0)
    # exactly at the threshold is a failure
    assert not success(np.full_like(t, 0.25), t, False, 10.0)
    assert success(np.full_like(t, 0.2499), t, False, 10.0)
    # only the final window counts
    err = np.where(t < 7.9, 5.0, 0.0)
    assert success(err, t, False, 10.0)
    assert not success(err, t, False, 10.0, SuccessCriteria(window=2.5))


def test_nominal_pid_succeeds_and_is_deterministic(tmp_path):
    scen = Scenario(SHORT, PID, params=NOMINAL, fault=MotorFault.none())
    m1, l1 = run_episode(scen, None, 11, log_path=tmp_path / "a.jsonl")
    m2, l2 = run_episode(scen, None, 11, log_path=tmp_path / "b.jsonl")
    assert m1.success and m1.crash is None and m1.rmse >= 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    rows, dev = replay(tmp_path / "a.jsonl")
    assert rows == m1.steps == 300 and dev == 0.0
    row = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert set(row) >= {"t", "position", "velocity", "quaternion", "body_rates", "action",
                        "effectiveness", "reward"}


def test_replay_detects_tampering(tmp_path):
    scen = Scenario(SHORT, PID, params=NOMINAL, fault=MotorFault.none())
    run_episode(scen, None, 3, log_path=tmp_path / "a.jsonl")
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    row = json.loads(lines[10])
    row["action"][0] += 0.01
    lines[10] = json.dumps(row)
    (tmp_path / "a.jsonl").write_text("\n".join(lines) + "\n")
    assert replay(tmp_path / "a.jsonl")[1] > 0


def test_total_motor_failure_is_handled():
    scen = Scenario(SHORT, PID, params=NOMINAL, fault=MotorFault((0.0, 1, 1, 1), 0.5))
    m, log = run_episode(scen, None, 0)
    assert not m.success and m.crash in ("tilt", "oob", "nonfinite")
    assert m.onset_time == 0.5 and m.steps == len(log.t) < 300


def test_batched_equals_single():
    scen = Scenario(SHORT, PID)
    seeds = [5, 6, 7]
    batched = run_episodes(scen, seeds)
    for s, (m, log) in zip(seeds, batched):
        m1, l1 = run_episode(scen, None, s)
        assert m == m1 and np.array_equal(log.state, l1.state)


def test_hybrid_modes_log_latents():
    models = Models(init_policy(0, hover_command=NOMINAL.hover_command))
    m, log = run_episode(Scenario(SHORT, ControllerMode.ZERO_LATENT), models, 2)
    assert log.z is not None and log.z.shape[1] == 8
    assert log.z_hat is None  # only encoder modes produce an estimate
    with pytest.raises(MissingModel):
        run_episode(Scenario(SHORT, ControllerMode.PRIVILEGED), None, 2)


def test_load_models_missing(tmp_path):
    assert load_models(tmp_path, PID).params is None
    with pytest.raises(MissingModel):
        load_models(tmp_path, ControllerMode.TRANSFORMER)


def test_grid_helpers():
    cells = expand_grid({"axes": {"eta": [1.0, 0.5], "mass_range": [0.1, 0.2]},
                         "base": {"onset_window": [1.0, 2.0]}})
    assert len(cells) == 4 and all(c["onset_window"] == [1.0, 2.0] for c in cells)
    env = cell_env(EnvConfig(), {"eta": 0.5, "onset": 1.5})
    assert env.eta_min == env.eta_max == 0.5 and env.onset_window == (1.5, 1.5)
    with pytest.raises(ValueError):
        cell_env(EnvConfig(), {"wind": 3})
    with pytest.raises(ValueError):
        expand_grid({"cells": []})


def test_sweep_seeds_distinct_and_reproducible():
    s = sweep_seeds(0, 16, 100)
    assert s.shape == (16, 100) and len(np.unique(s)) == s.size
    assert np.array_equal(s, sweep_seeds(0, 16, 100))
    assert not np.array_equal(s, sweep_seeds(1, 16, 100))


def test_sweep_counting_and_rates(tmp_path):
    models = {m: Models(init_policy(0, hover_command=NOMINAL.hover_command))
              for m in (ControllerMode.PRIVILEGED, ControllerMode.ZERO_LATENT)}
    models[PID] = Models()
    modes = [PID, ControllerMode.PRIVILEGED, ControllerMode.ZERO_LATENT, PID]
    cells = expand_grid({"axes": {"eta": [1.0, 0.7, 0.5, 0.3]}, "base": {"episode_length": 0.2}})
    rows, details = sweep(cells, modes, 25, 0, models, out_csv=tmp_path / "s.csv", batch=10)
    assert len(rows) == 16
    assert sum(r["episodes"] for r in rows) == 400
    for r in rows:
        ms = details[(r["cell_id"], ControllerMode(r["mode"]))]
        assert r["success_rate"] == sum(m.success for m in ms) / r["episodes"]
    with open(tmp_path / "s.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:3] == ["cell_id", "mode", "episode_length"]
    assert header[4:11] == ["episodes", "success_rate", "rmse_mean_success", "rmse_std_success",
                            "crash_tilt", "crash_oob", "crash_nonfinite"]
    assert "rmse_mean_all" in header
    rows2, _ = sweep(cells[:1], [PID], 25, 0, models, batch=7)
    assert rows2[0] == {**rows[0]}


def test_sweep_single_cell_matches_run_episode():
    cells = [{"eta": 0.5, "episode_length": 2.0}]
    rows, details = sweep(cells, [PID], 1, 4, {PID: Models()})
    seed = int(sweep_seeds(4, 1, 1)[0, 0])
    m, _ = run_episode(Scenario(cell_env(EnvConfig(), cells[0]), PID, label=str(cells[0])), None, seed)
    assert details[(0, PID)][0] == m
    assert rows[0]["success_rate"] == float(m.success)


def test_rmse_window_starts_at_onset():
    env = replace(SHORT, onset_window=(1.0, 1.0), eta_min=0.9, eta_max=0.9)
    m, log = run_episode(Scenario(env, PID), None, 1)
    t, p, ref = log.positions()
    sel = t >= 1.0 - 1e-9
    assert m.rmse == pytest.approx(rmse(p[sel], ref[sel]))


def test_latent_shift_window():
    models = Models(init_policy(0, hover_command=NOMINAL.hover_command))
    _, log = run_episode(Scenario(SHORT, ControllerMode.ZERO_LATENT), models, 2)
    zh = np.zeros((10, 2))
    zh[5] = [3.0, 4.0]
    zh[8] = [0.0, 10.0]
    log = replace(log, z_hat=zh)
    assert latent_shift(log, 3, 2) == 5.0   # steps 3..5 against step 2
    assert latent_shift(log, 3, 1) == 0.0
    assert latent_shift(log, 7, 50) == 10.0  # truncated at the log end
    assert np.isnan(latent_shift(log, 0, 5)) and np.isnan(latent_shift(log, 10, 5))
    assert np.isnan(latent_shift(replace(log, z_hat=None), 3, 2))
