"""Flat ``section.key = value`` configuration files.

Every key the harness understands is declared in :data:`SCHEMA` with its type
and default. Anything else in a file is rejected, so a typo never silently
falls back to a default.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _optional(kind: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(s: str):
        return None if s.strip().lower() in ("", "none", "null") else kind(s)
    parse.__name__ = f"optional {kind.__name__}"
    return parse


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _str(s: str) -> str:
    return s.strip().strip('"').strip("'")


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


SCHEMA: dict[str, Key] = {
    "data.per_class": Key(int, 64, "prior images per class"),
    "data.n_subject": Key(int, 4, "subject renders used for personalization"),
    "data.n_templates": Key(int, 16, "held-out templates per prior class"),
    "data.seed": Key(int, 0, "dataset seed (independent of the run seed)"),

    "model.channels": Key(int, 32),
    "model.time_bins": Key(int, 32),
    "model.lora_rank": Key(int, 4, "0 fine-tunes the full network"),
    "model.schedule": Key(_str, "scaled_linear", "linear | scaled_linear"),
    "model.t_max": Key(int, 1000),

    "pretrain.steps": Key(int, 3000),
    "pretrain.batch": Key(int, 8),
    "pretrain.lr": Key(float, 3e-3, "Adam peak learning rate"),
    "pretrain.warmup": Key(int, 100),
    "pretrain.target_loss": Key(float, 0.03, "final 500-step mean loss must be below this"),
    "pretrain.min_structure": Key(float, 0.8, "per-class structure score floor"),
    "pretrain.checkpoint": Key(_str, "", "reuse this base checkpoint instead of training"),

    "train.i_max": Key(int, 400),
    "train.t_lo": Key(int, 0),
    "train.t_hi": Key(_optional(int), None, "exclusive; defaults to model.t_max"),
    "train.warmup_fraction": Key(float, 0.0, "leading share of steps forced to BP-low"),
    "train.eval_every": Key(int, 0, "0 evaluates only at the end"),
    "train.max_abort_fraction": Key(float, 0.01),
    "train.token_noise": Key(float, 0.5, "init of the subject token: prior row + noise"),
    "train.train_token": Key(_bool, False, "also train the subject token embedding row"),

    "selector.mode": Key(_str, "DTAP"),
    "selector.k": Key(float, 0.05),
    "selector.t_mid": Key(float, 750.0),

    "bp.eta": Key(float, 0.01),
    "bp.resize_ratio": Key(float, 0.5),
    "bp.grad_clip": Key(_optional(float), None),

    "zo.epsilon": Key(float, 1e-3),
    "zo.alpha": Key(float, 1e-2),
    "zo.num_perturbations": Key(int, 4),

    "eval.n_samples": Key(int, 8),
    "eval.steps": Key(int, 50),
    "eval.seed": Key(int, 1234),
    "eval.prior_samples": Key(int, 4),

    "ablate.preset": Key(_str, "grid", "observation1 | observation2 | main | grid"),
    "ablate.seeds": Key(_ints, (0, 1, 2, 3, 4)),
    "ablate.ratios": Key(_floats, (0.5, 0.625, 0.75)),

    "probe.i_points": Key(int, 11, "evenly spaced training steps in [0, i_max]"),
    "probe.t_stride": Key(int, 10),
    "probe.i_max": Key(int, 1000),

    "mem.ratios": Key(_floats, (0.5, 0.625, 0.75, 1.0)),
}


class Config(dict):
    """Mapping of dotted keys to typed values, always holding every schema key."""

    def section(self, name: str) -> dict[str, Any]:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.items() if k.startswith(pre)}

    def canonical(self) -> str:
        return json.dumps({k: _jsonable(v) for k, v in sorted(self.items())}, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in sorted(self.items()))


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    return str(v)


def defaults() -> Config:
    return Config({k: spec.default for k, spec in SCHEMA.items()})


def _unknown(key: str) -> ConfigError:
    valid = "\n  ".join(sorted(SCHEMA))
    return ConfigError(f"unknown config key {key!r}; valid keys are:\n  {valid}")


def parse(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines on top of ``base`` (defaults if omitted).

    Blank lines and ``#`` comments are ignored.
    """
    cfg = Config(base if base is not None else defaults())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg[key] = coerce(key, value, lineno)
    return cfg


def coerce(key: str, value: str, lineno: int | None = None):
    if key not in SCHEMA:
        raise _unknown(key)
    try:
        return SCHEMA[key].parse(value)
    except ValueError as exc:
        where = f"line {lineno}: " if lineno else ""
        raise ConfigError(f"{where}bad value for {key}: {exc}") from None


def load(path: str | Path | None, overrides: dict[str, Any] | None = None) -> Config:
    cfg = defaults() if path is None else parse(Path(path).read_text())
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise _unknown(key)
        cfg[key] = coerce(key, value) if isinstance(value, str) else value
    return cfg
