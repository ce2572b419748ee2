"""Run configuration: a flat key=value file (TOML subset) around TrainConfig.

One line per key, ``key = value``, ``#`` comments, blank lines ignored.
Values are typed from the dataclass fields; unknown keys are rejected so a
typo cannot silently fall back to a default. ``format_run_config`` emits
every key in canonical order with ``repr`` floats, which makes the frozen
copy written next to a run reparse to an equal RunConfig.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .training import LossWeights, TrainConfig


@dataclass
class RunConfig:
    """Everything a training run needs beyond the math: data, paths, variant."""

    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "arl"            # 'arl' | 'baseline'
    data: str = ""                  # manifest path; empty = synthetic spec below
    out: str = "run"
    threads: int = 1
    synthetic_classes: int = 30
    synthetic_per_class: int = 12
    synthetic_side: int = 32
    synthetic_seed: int = 7
    split_seed: int = 0

    def __post_init__(self):
        if self.variant not in ("arl", "baseline"):
            raise ConfigError(f"unknown variant '{self.variant}'")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")


def _type_name(t) -> str:
    return t if isinstance(t, str) else t.__name__


_TRAIN_FIELDS = {f.name: _type_name(f.type) for f in fields(TrainConfig)
                 if f.name != "weights"}
_WEIGHT_FIELDS = {f.name: _type_name(f.type) for f in fields(LossWeights)}
_RUN_FIELDS = {f.name: _type_name(f.type) for f in fields(RunConfig)
               if f.name != "train"}

_KEY_ORDER = (list(_TRAIN_FIELDS) + list(_WEIGHT_FIELDS) + list(_RUN_FIELDS))


def _parse_value(key: str, text: str, typ: str):
    base = {"int": int, "float": float, "str": str, "bool": bool}[typ]
    if base is bool:
        if text == "true":
            return True
        if text == "false":
            return False
        raise ConfigError(f"key '{key}' expects true/false, got '{text}'")
    if base is str:
        if len(text) >= 2 and text[0] == '"' and text[-1] == '"':
            text = text[1:-1]
        return text
    try:
        return base(text)
    except ValueError as exc:
        raise ConfigError(f"key '{key}' expects {typ}, got '{text}'") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    return repr(value)


def parse_run_config(text: str, env_seed: str | None = None) -> RunConfig:
    """Parse a flat key=value config; unknown keys raise ConfigError.

    ``env_seed`` (the ARL_SEED environment value, if any) applies only
    when the file does not set ``seed`` itself.
    """
    train_kw: dict = {}
    weight_kw: dict = {}
    run_kw: dict = {}
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got '{raw.strip()}'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        seen.add(key)
        if key in _TRAIN_FIELDS:
            train_kw[key] = _parse_value(key, value, _TRAIN_FIELDS[key])
        elif key in _WEIGHT_FIELDS:
            weight_kw[key] = _parse_value(key, value, _WEIGHT_FIELDS[key])
        elif key in _RUN_FIELDS:
            run_kw[key] = _parse_value(key, value, _RUN_FIELDS[key])
        else:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
    if "seed" not in seen and env_seed is not None:
        try:
            train_kw["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"ARL_SEED must be an integer, got '{env_seed}'") from exc
    train = TrainConfig(weights=LossWeights(**weight_kw), **train_kw)
    return RunConfig(train=train, **run_kw)


def format_run_config(cfg: RunConfig) -> str:
    """Canonical full serialization; reparses to an equal RunConfig."""
    values = {}
    for name in _TRAIN_FIELDS:
        values[name] = getattr(cfg.train, name)
    for name in _WEIGHT_FIELDS:
        values[name] = getattr(cfg.train.weights, name)
    for name in _RUN_FIELDS:
        values[name] = getattr(cfg, name)
    lines = [f"{key} = {_format_value(values[key])}" for key in _KEY_ORDER]
    return "\n".join(lines) + "\n"


def load_run_config(path, env_seed: str | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run_config(fh.read(), env_seed=env_seed)


def baseline_copy(cfg: RunConfig) -> RunConfig:
    """The paired control: feedback off, all auxiliary weights zero."""
    train = dataclasses.replace(cfg.train, absolute_feedback=False,
                                relative_feedback=False,
                                weights=LossWeights(0.0, 0.0, 0.0))
    return dataclasses.replace(cfg, train=train, variant="baseline")
