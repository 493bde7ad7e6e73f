"""Timestep-aware choice between low-res backprop and high-res zeroth-order steps."""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np


class Mode(str, enum.Enum):
    TAP = "TAP"
    DTAP = "DTAP"
    ALWAYS_BP = "ALWAYS_BP"
    ALWAYS_ZO = "ALWAYS_ZO"
    UNIFORM_RANDOM = "UNIFORM_RANDOM"
    REVERSED = "REVERSED"


class Branch(str, enum.Enum):
    BP_LOW = "BP_LOW"
    ZO_HIGH = "ZO_HIGH"


@dataclass(frozen=True)
class SelectorConfig:
    k: float = 0.05
    t_mid: float = 750.0
    t_max: int = 1000
    i_max: int = 1000
    mode: Mode = Mode.DTAP

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.t_max <= 0 or self.i_max <= 0:
            raise ValueError("t_max and i_max must be positive")
        if not 0 < self.t_mid < self.t_max:
            raise ValueError(f"t_mid must lie in (0, t_max), got {self.t_mid}")
        if self.t_end < 0:
            warnings.warn(f"t_mid={self.t_mid} < t_max/2 makes the final DTAP midpoint negative "
                          f"({self.t_end}); allowed, but outside the tested regime", stacklevel=3)

    @property
    def t_start(self) -> float:
        return float(self.t_max)

    @property
    def t_end(self) -> float:
        return 2.0 * self.t_mid - self.t_max


def sigmoid(z: float) -> float:
    """Logistic function, split so neither branch overflows."""
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def tap_probability(t: float, cfg: SelectorConfig) -> float:
    return sigmoid(cfg.k * (t - cfg.t_mid))


def t_dyn(i: float, cfg: SelectorConfig) -> float:
    """Midpoint sliding linearly from ``t_max`` (i = 0) to ``2 t_mid - t_max`` (i = i_max)."""
    return cfg.t_start + (i / cfg.i_max) * (cfg.t_end - cfg.t_start)


def dtap_probability(i: float, t: float, cfg: SelectorConfig) -> float:
    return sigmoid(cfg.k * (t - t_dyn(i, cfg)))


def zo_probability(i: float, t: float, cfg: SelectorConfig) -> float:
    """Probability of taking the ZO-high branch at step ``i``, timestep ``t``."""
    mode = cfg.mode
    if mode is Mode.DTAP:
        return dtap_probability(i, t, cfg)
    if mode is Mode.TAP:
        return tap_probability(t, cfg)
    if mode is Mode.REVERSED:
        return sigmoid(-cfg.k * (t - t_dyn(i, cfg)))
    if mode is Mode.UNIFORM_RANDOM:
        return 0.5
    return 1.0 if mode is Mode.ALWAYS_ZO else 0.0


def select_branch(i: float, t: float, cfg: SelectorConfig, rng: np.random.Generator) -> Branch:
    if cfg.mode is Mode.ALWAYS_BP:
        return Branch.BP_LOW
    if cfg.mode is Mode.ALWAYS_ZO:
        return Branch.ZO_HIGH
    p = zo_probability(i, t, cfg)
    # ties go to ZO: only a draw strictly above p selects BP
    return Branch.BP_LOW if rng.random() > p else Branch.ZO_HIGH


def probability_grid(cfg: SelectorConfig, steps, timesteps) -> list[tuple[int, int, float, float]]:
    """Rows ``(i, t, p_tap, p_dtap)`` over the product of ``steps`` and ``timesteps``."""
    rows = []
    for i in steps:
        for t in timesteps:
            rows.append((int(i), int(t), tap_probability(t, cfg), dtap_probability(i, t, cfg)))
    return rows
