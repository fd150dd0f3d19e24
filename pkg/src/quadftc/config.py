"""Run configuration: one JSON document covering every module, plus dot-path overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from quadftc.adaptation import AdaptationConfig
from quadftc.control import PidGains
from quadftc.env import EnvConfig, InvalidConfig
from quadftc.ppo import PpoConfig

SCHEMA_VERSION = 1


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    def __init__(self, field_name: str, why: str):
        super().__init__(f"{field_name}: {why}")
        self.field = field_name


@dataclass
class EvalConfig:
    mode: str = "transformer"
    episodes: int = 100
    # env overrides for `eval` (same keys as a sweep grid cell)
    cell: dict = field(default_factory=lambda: {"eta_min": 0.3, "eta_max": 0.7,
                                                "onset_window": [3.0, 5.0]})
    grid: dict = field(default_factory=lambda: {"axes": {"eta": [1.0, 0.7, 0.5, 0.3]},
                                                "base": {"onset_window": [3.0, 5.0]}})
    modes: tuple = ("pid", "transformer", "cnn", "privileged")
    success_window: float = 2.0
    success_threshold: float = 0.25
    batch: int = 100
    write_logs: bool = True

    def validate(self):
        from quadftc.control import ControllerMode

        for m in (self.mode, *self.modes):
            try:
                ControllerMode.parse(m)
            except ValueError:
                raise InvalidConfig(f"eval.mode: unknown controller mode {m!r}") from None
        if self.episodes < 1 or self.batch < 1:
            raise InvalidConfig("eval.episodes: must be >= 1")
        if self.success_window <= 0 or self.success_threshold <= 0:
            raise InvalidConfig("eval.success_threshold: must be > 0")


@dataclass
class RunConfig:
    version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "runs"
    model_dir: str = "artifacts/models"
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    pid: PidGains = field(default_factory=PidGains)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.version != SCHEMA_VERSION:
            raise ValidationError("version", f"schema version {self.version} != {SCHEMA_VERSION}")
        for part in (self.env, self.ppo, self.adaptation, self.pid, self.eval):
            try:
                part.validate()
            except InvalidConfig as exc:
                name, _, why = str(exc).partition(": ")
                raise ValidationError(name, why) from None


def _coerce(default, value, path: str):
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ValidationError(path, "expected an object")
        return _build(type(default), value, path + ".", base=default)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(path, f"expected a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            if float(value) != int(value):
                raise ValidationError(path, f"expected an integer, got {value!r}")
            return int(value)
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValidationError(path, "expected a list")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValidationError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ValidationError(path, "expected an object")
        return value
    return value


def _build(cls, data: dict, prefix: str = "", base=None):
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ValidationError(prefix + k, "unknown field")
    kw = {}
    for f in dataclasses.fields(cls):
        cur = getattr(base, f.name)
        kw[f.name] = _coerce(cur, data[f.name], prefix + f.name) if f.name in data else cur
    try:
        return cls(**kw)
    except InvalidConfig as exc:
        name, _, why = str(exc).partition(": ")
        raise ValidationError(name, why) from None
    except ValueError as exc:
        raise ValidationError(prefix.rstrip(".") or cls.__name__, str(exc)) from None


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ParseError("config must be a JSON object")
    if "version" not in data:
        raise ValidationError("version", "missing schema version")
    cfg = _build(RunConfig, data)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return from_dict(data)


def to_dict(cfg: RunConfig) -> dict:
    def conv(x):
        if dataclasses.is_dataclass(x):
            return {f.name: conv(getattr(x, f.name)) for f in dataclasses.fields(x)}
        if isinstance(x, tuple):
            return [conv(v) for v in x]
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        return x

    return conv(cfg)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key.path=value`` strings; values parse as JSON, falling back to plain strings."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ParseError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p, {}), dict):
                raise ValidationError(key, "not an object path")
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return data


def resolve(path=None, overrides=()) -> RunConfig:
    """Config file (or defaults) with overrides, fully validated."""
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None
    else:
        data = {"version": SCHEMA_VERSION}
    return from_dict(apply_overrides(data, overrides))
