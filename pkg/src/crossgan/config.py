"""Run configuration: one structured file, validated as a whole."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import AugmentConfig
from .evaluation import EvalConfig
from .trainer import TrainingConfig


class ConfigError(ValueError):
    """Raised with every validation problem found, not just the first."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class DataPaths:
    mono_root: str | None = None
    stereo_root: str | None = None


@dataclass
class RunConfig:
    training: TrainingConfig = field(default_factory=TrainingConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataPaths = field(default_factory=DataPaths)
    out_dir: str | None = None

    def to_dict(self) -> dict:
        d = {"training": asdict(self.training), "augment": asdict(self.augment), "eval": asdict(self.eval),
             "data": asdict(self.data), "out_dir": self.out_dir}
        d["augment"]["intensity_jitter"] = list(self.augment.intensity_jitter)
        return d

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_SECTIONS = {"training": TrainingConfig, "augment": AugmentConfig, "eval": EvalConfig, "data": DataPaths}


def _collect(section: str, cls, raw, errors: list[str]):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{section}: expected a mapping")
        return cls()
    known = {f.name: f for f in fields(cls)}
    for k in sorted(set(raw) - set(known)):
        errors.append(f"{section}.{k}: unknown key")
    defaults = cls()
    values = {}
    for name in known:
        if name not in raw:
            continue
        v, want = raw[name], getattr(defaults, name)
        if name == "intensity_jitter":
            if not (isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(x, (int, float)) for x in v)):
                errors.append(f"{section}.{name}: expected [low, high]")
                continue
            v = (float(v[0]), float(v[1]))
        elif isinstance(want, bool):
            if not isinstance(v, bool):
                errors.append(f"{section}.{name}: expected a boolean, got {v!r}")
                continue
        elif isinstance(want, int) and not isinstance(want, bool):
            if isinstance(v, bool) or not isinstance(v, int):
                errors.append(f"{section}.{name}: expected an integer, got {v!r}")
                continue
        elif isinstance(want, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                errors.append(f"{section}.{name}: expected a number, got {v!r}")
                continue
            v = float(v)
        elif isinstance(want, str):
            if not isinstance(v, str):
                errors.append(f"{section}.{name}: expected a string, got {v!r}")
                continue
        values[name] = v
    # per-field checks of each section, reported together
    if cls is TrainingConfig:
        trial = TrainingConfig.__new__(TrainingConfig)
        for name in known:
            setattr(trial, name, values.get(name, getattr(defaults, name)))
        errors.extend(f"{section}: {e}" for e in trial.validate())
        return trial
    try:
        return cls(**values)
    except (ValueError, TypeError) as e:
        errors.append(f"{section}: {e}")
        return defaults


def build_config(raw: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge ``overrides`` (``{"section.key": value}``) over ``raw`` and validate."""
    raw = dict(raw or {})
    errors: list[str] = []
    for k in sorted(set(raw) - set(_SECTIONS) - {"out_dir"}):
        errors.append(f"{k}: unknown key")
    merged = {s: dict(raw.get(s) or {}) if isinstance(raw.get(s) or {}, dict) else raw.get(s) for s in _SECTIONS}
    out_dir = raw.get("out_dir")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "out_dir":
            out_dir = value
            continue
        section, name = key.split(".", 1)
        if isinstance(merged[section], dict):
            merged[section][name] = value
    parts = {s: _collect(s, cls, merged[s], errors) for s, cls in _SECTIONS.items()}
    if out_dir is not None and not isinstance(out_dir, str):
        errors.append("out_dir: expected a string")
    if not errors:
        a = parts["augment"]
        if a.crop_height < 32 or a.crop_width < 32:
            errors.append("augment: crop must be at least 32x32 for the discriminator")
    if errors:
        raise ConfigError(errors)
    return RunConfig(parts["training"], parts["augment"], parts["eval"], parts["data"], out_dir)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError([f"{path}: not valid YAML/JSON ({e})"]) from e
        if not isinstance(raw, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
    return build_config(raw, overrides)
