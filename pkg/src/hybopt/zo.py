"""Two-point zeroth-order (MeZO-style) updates with in-place seed replay.

A perturbation ``z`` is never stored. It is regenerated from its 64-bit seed,
tensor by tensor in the parameter set's flattening order, each time it is
needed: once to probe ``theta + eps z``, once to move to ``theta - eps z``,
once to restore, and once more during the update sweep.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteValue
from .params import ParameterSet

LossFn = Callable[[ParameterSet], float]


@dataclass
class ZoConfig:
    epsilon: float = 1e-3
    alpha: float = 1e-4
    num_perturbations: int = 1
    weights: Sequence[float] | None = None
    scale_by_rms: bool = True

    def __post_init__(self):
        if self.epsilon <= 0 or self.alpha < 0 or self.num_perturbations < 1:
            raise ValueError("need epsilon > 0, alpha >= 0, num_perturbations >= 1")
        if self.weights is not None:
            if len(self.weights) != self.num_perturbations:
                raise ValueError("one weight per perturbation required")
            if abs(sum(self.weights) - 1.0) > 1e-9:
                raise ValueError("perturbation weights must sum to 1")

    def weight(self, n: int) -> float:
        return 1.0 / self.num_perturbations if self.weights is None else float(self.weights[n])


@dataclass
class ZoStep:
    seeds: list[int]
    projected_grads: list[float]
    epsilon: float
    losses: list[tuple[float, float]] = field(default_factory=list)

    @property
    def loss(self) -> float:
        """Mean of the probe losses; an estimate of the loss at theta."""
        return float(np.mean([0.5 * (a + b) for a, b in self.losses]))


def perturbation(seed: int, shapes) -> list[np.ndarray]:
    """Materialize ``z`` for ``seed`` (tests and dense references only)."""
    gen = np.random.Generator(np.random.Philox(seed))
    return [gen.standard_normal(s, dtype=np.float32) for s in shapes]


CHUNK = 4096


def perturb(params: ParameterSet, seed: int, scale: float) -> None:
    """``theta += scale * z(seed)`` over trainable tensors, in place.

    ``z`` is drawn in fixed-size chunks (the normal stream is the same however
    it is split), so the extra memory is one chunk whatever the model size.
    """
    gen = np.random.Generator(np.random.Philox(seed))
    buf = np.empty(CHUNK, dtype=np.float32)
    for t in params.trainable():
        flat = t.data.reshape(-1)
        s = flat.dtype.type(scale)
        for a in range(0, flat.size, CHUNK):
            z = buf[:min(CHUNK, flat.size - a)]
            gen.standard_normal(out=z, dtype=np.float32)
            if flat.dtype == np.float32:
                np.multiply(z, s, out=z)
                flat[a:a + z.size] += z
            else:
                flat[a:a + z.size] += s * z.astype(flat.dtype)


def parameter_rms(params: ParameterSet) -> float:
    total, count = 0.0, 0
    for t in params.trainable():
        flat = t.data.reshape(-1)
        for a in range(0, flat.size, CHUNK):
            v = flat[a:a + CHUNK].astype(np.float64)
            total += float(np.dot(v, v))
        count += t.size
    return float(np.sqrt(total / count)) if count else 0.0


def effective_epsilon(params: ParameterSet, cfg: ZoConfig) -> float:
    if not cfg.scale_by_rms:
        return cfg.epsilon
    rms = parameter_rms(params)
    return cfg.epsilon * rms if rms > 0 else cfg.epsilon


def _probe(params: ParameterSet, loss_fn: LossFn, seed: int, eps: float) -> tuple[float, float]:
    offset = 0.0
    try:
        perturb(params, seed, eps)
        offset = eps
        plus = float(loss_fn(params))
        perturb(params, seed, -2.0 * eps)
        offset = -eps
        minus = float(loss_fn(params))
    finally:
        if offset:
            perturb(params, seed, -offset)
    if not (np.isfinite(plus) and np.isfinite(minus)):
        raise NonFiniteValue("zo_probe")
    return plus, minus


def estimate_projected_grad(params: ParameterSet, loss_fn: LossFn, seed: int, epsilon: float) -> float:
    """``[L(theta + eps z) - L(theta - eps z)] / (2 eps)``; ``params`` are restored on exit."""
    plus, minus = _probe(params, loss_fn, seed, epsilon)
    return (plus - minus) / (2.0 * epsilon)


def accumulate_step(params: ParameterSet, loss_fn: LossFn, cfg: ZoConfig,
                    rng: np.random.Generator) -> ZoStep:
    """One ZO update ``theta -= alpha * sum_n w_n g_n z_n``.

    Only the N scalar coefficients are kept; each ``z_n`` is replayed from its
    seed during the update sweep. If any probe fails the step raises with the
    parameters untouched.
    """
    eps = effective_epsilon(params, cfg)
    seeds = [int(s) for s in rng.integers(0, 2**63, size=cfg.num_perturbations)]
    step = ZoStep(seeds, [], eps)
    for seed in seeds:
        plus, minus = _probe(params, loss_fn, seed, eps)
        step.losses.append((plus, minus))
        step.projected_grads.append((plus - minus) / (2.0 * eps))
    if cfg.alpha:
        for n, (seed, g) in enumerate(zip(seeds, step.projected_grads)):
            perturb(params, seed, -cfg.alpha * cfg.weight(n) * g)
    return step
