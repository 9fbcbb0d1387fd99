"""Flat ``key = value`` run configuration with desk and paper profiles.

Every model field and every run field is a top-level key. ``profile``
picks the defaults and may appear anywhere in the file; the remaining keys
override it. Tuples are written comma-separated, booleans as true/false and
unset paths as an empty value.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .grid import ConfigError
from .model import ModelConfig
from .train import TrainSettings

SEED_ENV = "BEFUNET_SEED"
DTYPES = ("float32", "float64")


class ConfigParseError(ConfigError):
    """A config file line or value is invalid; ``key`` names the offending entry."""

    def __init__(self, msg: str, key: str | None = None, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{msg}")
        self.key = key
        self.line = line


PROFILES: dict[str, dict] = {
    "desk": dict(
        model=dict(image_size=(64, 64), base_dim=16, window=2, lca_window=(2, 2), heads=(1, 2, 4, 8), num_classes=3),
        run=dict(batch_size=8, epochs=30, lr=1e-3),
    ),
    "paper": dict(
        model=dict(image_size=(224, 224), base_dim=96, window=7, lca_window=(7, 7), heads=(3, 6, 12, 24),
                   num_classes=9),
        run=dict(batch_size=24, epochs=80, lr=0.01),
    ),
}


@dataclass
class RunConfig:
    profile: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    seed: int = 42
    dtype: str = "float32"
    train_manifest: str = ""
    val_manifest: str = ""
    synthetic_samples: int = 200
    val_fraction: float = 0.2
    out_dir: str = "runs/befunet"

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigParseError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}", "profile")
        positive = ("epochs", "batch_size", "lr", "synthetic_samples", "plateau_patience")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigParseError(f"{name} must be positive, got {getattr(self, name)}", name)
        if self.weight_decay < 0:
            raise ConfigParseError("weight_decay must be non-negative", "weight_decay")
        if not 0 < self.plateau_factor < 1:
            raise ConfigParseError("plateau_factor must lie in (0, 1)", "plateau_factor")
        if not 0 <= self.val_fraction < 1:
            raise ConfigParseError("val_fraction must lie in [0, 1)", "val_fraction")
        if self.dtype not in DTYPES:
            raise ConfigParseError(f"dtype must be one of {DTYPES}, got {self.dtype!r}", "dtype")
        self.model.validate()

    def settings(self) -> TrainSettings:
        return TrainSettings(self.epochs, self.batch_size, self.lr, self.weight_decay,
                             self.plateau_factor, self.plateau_patience, self.seed)

    def serialize(self) -> str:
        lines = [f"profile = {self.profile}"]
        lines += [f"{f.name} = {_format(getattr(self.model, f.name))}" for f in fields(ModelConfig)]
        lines += [f"{name} = {_format(getattr(self, name))}" for name in RUN_KEYS]
        return "\n".join(lines) + "\n"


MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
RUN_KEYS = [f.name for f in fields(RunConfig) if f.name not in ("profile", "model")]


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(key: str, raw: str, like):
    """Parse ``raw`` into the type of the default value ``like``."""
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return low == "true"
        if isinstance(like, tuple):
            return tuple(int(x) for x in raw.split(","))
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigParseError(f"{key}: {e}", key) from None


def defaults(profile: str = "desk") -> RunConfig:
    if profile not in PROFILES:
        raise ConfigParseError(f"profile must be one of {sorted(PROFILES)}, got {profile!r}", "profile")
    p = PROFILES[profile]
    return RunConfig(profile=profile, model=ModelConfig(**p["model"]), **p["run"])


def parse(text: str, env: dict | None = None) -> RunConfig:
    """Parse config text; ``BEFUNET_SEED`` in ``env`` (default os.environ) overrides ``seed``."""
    entries: dict[str, tuple[str, int]] = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected 'key = value', got {line!r}", line=no)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in entries:
            raise ConfigParseError(f"duplicate key {key!r}", key, no)
        if key != "profile" and key not in MODEL_KEYS and key not in RUN_KEYS:
            raise ConfigParseError(f"unknown key {key!r}", key, no)
        entries[key] = (value, no)

    base = defaults(entries.pop("profile", ("desk", 0))[0])
    model_over, run_over = {}, {}
    for key, (value, no) in entries.items():
        try:
            if key in MODEL_KEYS:
                model_over[key] = _convert(key, value, getattr(base.model, key))
            else:
                run_over[key] = _convert(key, value, getattr(base, key))
        except ConfigParseError as e:
            raise ConfigParseError(str(e), key, no) from None

    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        run_over["seed"] = _convert(SEED_ENV, env[SEED_ENV], 0)

    try:
        model = replace(base.model, **model_over)
    except ConfigError as e:
        raise ConfigParseError(f"{e} (keys: {', '.join(sorted(model_over)) or 'profile defaults'})",
                               next(iter(model_over), None)) from None
    cfg = replace(base, model=model, **run_over)
    cfg.validate()
    return cfg


def load(path, env: dict | None = None) -> RunConfig:
    return parse(Path(path).read_text(encoding="utf-8"), env)
