import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

from quadftc.cli import main
from quadftc.config import (SCHEMA_VERSION, ParseError, RunConfig, ValidationError, apply_overrides,
                            from_dict, load_config, resolve, to_dict)
from quadftc.nn import TransformerConfig, checkpoint, init_encoder
from quadftc.ppo import init_policy


# ---- config ----------------------------------------------------------------

def test_defaults_roundtrip(tmp_path):
    cfg = from_dict({"version": SCHEMA_VERSION})
    assert cfg == RunConfig()
    p = tmp_path / "c.json"
    p.write_text(json.dumps(to_dict(cfg)))
    assert load_config(p) == cfg
    assert to_dict(cfg)["ppo"]["gamma"] == 0.99 and to_dict(cfg)["env"]["control_rate"] == 100.0


def test_unknown_field_named():
    with pytest.raises(ValidationError) as ei:
        from_dict({"version": 1, "foo": 1})
    assert ei.value.field == "foo"
    with pytest.raises(ValidationError) as ei:
        from_dict({"version": 1, "ppo": {"gama": 0.9}})
    assert ei.value.field == "ppo.gama"


def test_out_of_range_named():
    with pytest.raises(ValidationError) as ei:
        from_dict({"version": 1, "ppo": {"gamma": 1.5}})
    assert ei.value.field == "ppo.gamma" and "(0, 1]" in str(ei.value)
    with pytest.raises(ValidationError) as ei:
        from_dict({"version": 1, "ppo": {"epochs": "ten"}})
    assert ei.value.field == "ppo.epochs"


def test_version_checks():
    with pytest.raises(ValidationError, match="version"):
        from_dict({})
    with pytest.raises(ValidationError, match="version"):
        from_dict({"version": 99})


def test_parse_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ParseError):
        load_config(p)


def test_overrides():
    d = apply_overrides({"version": 1}, ["ppo.lr=0.001", "eval.mode=cnn", "seed=4"])
    assert d == {"version": 1, "ppo": {"lr": 0.001}, "eval": {"mode": "cnn"}, "seed": 4}
    assert resolve(None, ["env.mass_range=0.1"]).env.mass_range == 0.1
    with pytest.raises(ParseError):
        apply_overrides({}, ["novalue"])


# ---- commands --------------------------------------------------------------

TINY = ["--set", "ppo.total_steps=256", "--set", "ppo.rollout_steps=256", "--set", "ppo.num_envs=2",
        "--set", "ppo.minibatch_size=128", "--set", "ppo.epochs=1"]


def _run_dir(root: Path, prefix: str) -> Path:
    (d,) = [p for p in root.iterdir() if p.name.startswith(prefix)]
    return d


def _models(tmp_path):
    md = tmp_path / "models"
    params = init_policy(0, hover_command=0.5)
    checkpoint.save(md / "policy", params, {"kind": "phase1"})
    cfg = TransformerConfig(model_dim=16, num_heads=2, num_layers=1, feedforward_dim=16)
    params.update(init_encoder(cfg, np.random.default_rng(0)))
    checkpoint.save(md / "transformer", params, {"kind": "phase2", "encoder": "transformer",
                                                 "encoder_config": asdict(cfg)})
    return md


def test_train_phase1_smoke_reproducible(tmp_path, capsys):
    for k in ("a", "b"):
        assert main(["train-phase1", "-q", "--out", str(tmp_path / k), *TINY]) == 0
    ha = checkpoint.content_hash(_run_dir(tmp_path / "a", "train-phase1") / "policy")
    hb = checkpoint.content_hash(_run_dir(tmp_path / "b", "train-phase1") / "policy")
    assert ha == hb
    run = json.loads((_run_dir(tmp_path / "a", "train-phase1") / "run.json").read_text())
    assert run["checkpoints"]["policy"] == ha and run["seed"] == 0
    assert (_run_dir(tmp_path / "a", "train-phase1") / "config.json").exists()


def test_eval_and_replay(tmp_path, capsys):
    md = _models(tmp_path)
    args = ["eval", "-q", "--mode", "transformer", "--models", str(md), "--episodes", "3",
            "--out", str(tmp_path / "runs"), "--set", "env.episode_length=1.0"]
    assert main(args) == 0
    summary = json.loads(capsys.readouterr().out.splitlines()[0])
    assert summary["episodes"] == 3 and summary["mode"] == "transformer"
    d = _run_dir(tmp_path / "runs", "eval-transformer")
    assert json.loads((d / "run.json").read_text())["checkpoints"]["transformer"]
    assert main(["replay", "-q", str(d / "logs")]) == 0
    out = capsys.readouterr().out
    assert "replay OK logs=3" in out and "max_deviation=0.0" in out
    # same seed, same logs
    assert main(args) == 0
    d2 = sorted((tmp_path / "runs").iterdir())[-1]
    for f in (d / "logs").glob("*.jsonl"):
        assert f.read_bytes() == (d2 / "logs" / f.name).read_bytes()


def test_replay_mismatch_exit_code(tmp_path, capsys):
    md = _models(tmp_path)
    assert main(["eval", "-q", "--mode", "pid", "--models", str(md), "--episodes", "1",
                 "--out", str(tmp_path / "runs"), "--set", "env.episode_length=0.5"]) == 0
    log = next((_run_dir(tmp_path / "runs", "eval-pid") / "logs").glob("*.jsonl"))
    lines = log.read_text().splitlines()
    row = json.loads(lines[3])
    row["action"] = [1.0, 0.0, 1.0, 0.0]
    lines[3] = json.dumps(row)
    log.write_text("\n".join(lines) + "\n")
    assert main(["replay", "-q", str(log)]) == 4
    assert capsys.readouterr().err.startswith("error[numerical]:")


def test_sweep_writes_rows(tmp_path, capsys):
    md = _models(tmp_path)
    grid = tmp_path / "faults.json"
    grid.write_text(json.dumps({"axes": {"eta": [1.0, 0.5, 0.3]}, "base": {"episode_length": 0.3}}))
    assert main(["sweep", "-q", "--grid", str(grid), "--modes", "pid,transformer", "--models", str(md),
                 "--episodes", "2", "--out", str(tmp_path / "runs")]) == 0
    with open(_run_dir(tmp_path / "runs", "sweep") / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 2
    assert {r["mode"] for r in rows} == {"pid", "transformer"}


def test_missing_phase2_checkpoint_exit_code(tmp_path, capsys):
    md = tmp_path / "only_policy"
    checkpoint.save(md / "policy", init_policy(0), {"kind": "phase1"})
    rc = main(["eval", "-q", "--mode", "transformer", "--models", str(md), "--out", str(tmp_path)])
    assert rc == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error[missing-artifact]:")


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["eval", "-q", "--set", "ppo.gamma=1.5", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error[config]:") and "ppo.gamma" in err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"version": 1, "foo": 3}))
    assert main(["eval", "-q", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "foo" in capsys.readouterr().err


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as ei:
        main(["fly"])
    assert ei.value.code == 2
