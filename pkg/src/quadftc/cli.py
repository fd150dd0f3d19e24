"""Command-line entry point: ``quadftc {train-phase1,train-phase2,eval,sweep,replay}``.

Exit codes: 0 ok, 2 configuration error, 3 missing artifact, 4 numerical failure.
Failures print a single ``error[<category>]: <message>`` line on stderr.
"""

from __future__ import annotations

import os

_threads = os.environ.get("FTC_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import shutil  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import asdict, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from quadftc import __version__  # noqa: E402
from quadftc._backend import BACKEND  # noqa: E402
from quadftc.config import ParseError, RunConfig, ValidationError, resolve, to_dict  # noqa: E402

log = logging.getLogger("quadftc")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class ReplayMismatch(ArithmeticError):
    pass


def run_dir(cfg: RunConfig, command: str, out: str | None) -> Path:
    root = Path(out or cfg.output_dir)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{command}-{stamp}-s{cfg.seed}"
    path, k = base, 1
    while path.exists():
        path = Path(f"{base}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def write_provenance(path: Path, cfg: RunConfig, argv, checkpoints: dict):
    (path / "config.json").write_text(json.dumps(to_dict(cfg), indent=1))
    prov = {"tool": "quadftc", "version": __version__, "schema_version": cfg.version,
            "seed": cfg.seed, "backend": BACKEND, "argv": list(argv),
            "checkpoints": checkpoints}
    (path / "run.json").write_text(json.dumps(prov, indent=1))


def _copy_ckpt(src_stem: Path, dst_dir: Path, name: str):
    for ext in (".json", ".bin"):
        shutil.copyfile(src_stem.with_suffix(ext), dst_dir / (name + ext))


def _stem(p) -> Path:
    p = Path(p)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def cmd_train_phase1(args, cfg: RunConfig) -> int:
    from quadftc.nn import checkpoint
    from quadftc.ppo import train_phase1

    out = run_dir(cfg, "train-phase1", args.out)
    write_provenance(out, cfg, sys.argv, {})
    path = train_phase1(cfg.ppo, cfg.env, cfg.seed, out)
    h = checkpoint.content_hash(path)
    write_provenance(out, cfg, sys.argv, {"policy": h})
    print(f"phase1 checkpoint {path.with_suffix('')} sha1={h}")
    print(f"run directory {out}")
    return EXIT_OK


def cmd_train_phase2(args, cfg: RunConfig) -> int:
    from quadftc.adaptation import train_phase2
    from quadftc.nn import checkpoint

    acfg = cfg.adaptation
    if args.encoder:
        acfg = replace(acfg, encoder=args.encoder)
    src = _stem(args.policy) if args.policy else Path(cfg.model_dir) / "policy"
    if not src.with_suffix(".json").exists():
        raise FileNotFoundError(f"phase-1 checkpoint {src} not found")
    out = run_dir(cfg, f"train-phase2-{acfg.encoder}", args.out)
    h_in = checkpoint.content_hash(src)
    write_provenance(out, replace(cfg, adaptation=acfg), sys.argv, {"policy": h_in})
    _copy_ckpt(src, out, "policy")
    path = train_phase2(src, cfg.env, acfg, cfg.seed, out)
    h = checkpoint.content_hash(path)
    write_provenance(out, replace(cfg, adaptation=acfg), sys.argv, {"policy": h_in, acfg.encoder: h})
    print(f"phase2 checkpoint {path.with_suffix('')} sha1={h}")
    print(f"run directory {out}")
    return EXIT_OK


def _criteria(cfg: RunConfig):
    from quadftc.evaluation import SuccessCriteria

    return SuccessCriteria(cfg.eval.success_window, cfg.eval.success_threshold)


def cmd_eval(args, cfg: RunConfig) -> int:
    from quadftc.control import ControllerMode
    from quadftc.evaluation import Scenario, cell_env, load_models, run_episodes, write_log

    mode = ControllerMode.parse(args.mode or cfg.eval.mode)
    models = load_models(args.models or cfg.model_dir, mode)
    episodes = args.episodes or cfg.eval.episodes
    env = cell_env(cfg.env, cfg.eval.cell)
    scen = Scenario(env, mode, label="eval")
    seeds = [int(s) for s in np.random.SeedSequence([cfg.seed, 0xE7A1]).generate_state(episodes, np.uint64)]
    out = run_dir(cfg, f"eval-{mode.value}", args.out)
    write_provenance(out, cfg, sys.argv, models.hashes)
    results = []
    for lo in range(0, episodes, cfg.eval.batch):
        results.extend(run_episodes(scen, seeds[lo: lo + cfg.eval.batch], models, cfg.env, cfg.pid,
                                    _criteria(cfg)))
    fields = ["episode", "seed", "success", "crash", "rmse", "mean_error", "final_error", "steps",
              "onset_time", "log_path"]
    with open(out / "episodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for k, (m, lg) in enumerate(results):
            if cfg.eval.write_logs:
                p = write_log(out / "logs" / f"ep{k:04d}.jsonl", lg, scen)
                m.log_path = str(p)
            d = asdict(m)
            w.writerow([k] + [d[f] for f in fields[1:]])
    ms = [m for m, _ in results]
    ok = [m.rmse for m in ms if m.success]
    summary = {"mode": mode.value, "episodes": len(ms),
               "success_rate": sum(m.success for m in ms) / len(ms),
               "crash_rate": sum(m.crash is not None for m in ms) / len(ms),
               "rmse_mean_success": float(np.mean(ok)) if ok else None,
               "rmse_std_success": float(np.std(ok)) if ok else None}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    print(f"run directory {out}")
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    from quadftc.control import ControllerMode
    from quadftc.evaluation import expand_grid, load_models, sweep

    grid = json.loads(Path(args.grid).read_text()) if args.grid else cfg.eval.grid
    try:
        cells = expand_grid(grid)
    except ValueError as exc:
        raise ValidationError("grid", str(exc)) from None
    modes = [ControllerMode.parse(m) for m in (args.modes.split(",") if args.modes else cfg.eval.modes)]
    model_dir = args.models or cfg.model_dir
    models = {m: load_models(model_dir, m) for m in modes}
    hashes = {k: v for m in models.values() for k, v in m.hashes.items()}
    out = run_dir(cfg, "sweep", args.out)
    write_provenance(out, cfg, sys.argv, hashes)
    (out / "grid.json").write_text(json.dumps(grid, indent=1))
    episodes = args.episodes or cfg.eval.episodes
    rows, _ = sweep(cells, modes, episodes, cfg.seed, models, base_env=cfg.env, train_env=cfg.env,
                    gains=cfg.pid, out_csv=out / "sweep.csv",
                    log_dir=(out / "logs") if args.logs else None, batch=cfg.eval.batch,
                    criteria=_criteria(cfg),
                    progress=lambda r: log.info("cell %s %s success=%.2f", r[0], r[1], r[-8]))
    print(f"sweep rows={len(rows)} csv={out / 'sweep.csv'}")
    return EXIT_OK


def cmd_replay(args, cfg: RunConfig | None) -> int:
    from quadftc.evaluation import replay

    paths = []
    for p in args.logs:
        p = Path(p)
        paths.extend(sorted(p.rglob("*.jsonl")) if p.is_dir() else [p])
    if not paths:
        raise FileNotFoundError("no trajectory logs given")
    worst, rows = 0.0, 0
    for p in paths:
        if not p.exists() or not Path(str(p) + ".meta.json").exists():
            raise FileNotFoundError(f"{p} (or its .meta.json sidecar) not found")
        n, dev = replay(p)
        rows += n
        worst = max(worst, dev)
        if dev != 0.0:
            raise ReplayMismatch(f"{p}: max state deviation {dev!r}")
    print(f"replay OK logs={len(paths)} rows={rows} max_deviation={worst!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quadftc", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"quadftc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry by dot path (repeatable)")
        p.add_argument("--out", help="root for the per-run output directory")
        p.add_argument("-q", "--quiet", action="store_true")

    p = sub.add_parser("train-phase1", help="PPO with the privileged latent")
    common(p)
    p = sub.add_parser("train-phase2", help="fit the adaptation encoder")
    common(p)
    p.add_argument("--policy", help="phase-1 checkpoint stem (default: <model_dir>/policy)")
    p.add_argument("--encoder", choices=["transformer", "cnn"])
    p = sub.add_parser("eval", help="evaluate one controller mode")
    common(p)
    p.add_argument("--mode")
    p.add_argument("--models", help="directory holding policy/transformer/cnn checkpoints")
    p.add_argument("--episodes", type=int)
    p = sub.add_parser("sweep", help="grid x modes evaluation table")
    common(p)
    p.add_argument("--grid", help="grid JSON ({'axes': {...}} or {'cells': [...]})")
    p.add_argument("--modes", help="comma-separated controller modes")
    p.add_argument("--models")
    p.add_argument("--episodes", type=int)
    p.add_argument("--logs", action="store_true", help="also write per-episode trajectory logs")
    p = sub.add_parser("replay", help="re-simulate trajectory logs and verify states")
    p.add_argument("logs", nargs="+", help="JSONL logs or directories")
    p.add_argument("-q", "--quiet", action="store_true")
    return ap


COMMANDS = {"train-phase1": cmd_train_phase1, "train-phase2": cmd_train_phase2, "eval": cmd_eval,
            "sweep": cmd_sweep, "replay": cmd_replay}


def _fail(category: str, msg, code: int) -> int:
    print(f"error[{category}]: {msg}".replace("\n", " "), file=sys.stderr)
    return code


def main(argv=None) -> int:
    from quadftc.control import MissingModel
    from quadftc.dynamics import NonFiniteState
    from quadftc.env import InvalidConfig
    from quadftc.nn.checkpoint import CheckpointError
    from quadftc.ppo import NonFiniteLoss

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", datefmt="%H:%M:%S")
    try:
        cfg = None
        if args.command != "replay":
            cfg = resolve(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except ParseError as exc:
        return _fail("config", f"parse: {exc}", EXIT_CONFIG)
    except ValidationError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except InvalidConfig as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (MissingModel, FileNotFoundError, CheckpointError) as exc:
        return _fail("missing-artifact", exc, EXIT_MISSING)
    except (NonFiniteLoss, NonFiniteState, ReplayMismatch, FloatingPointError) as exc:
        return _fail("numerical", exc, EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())
