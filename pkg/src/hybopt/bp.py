"""First-order branch: plain SGD on a downsampled copy of the image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffusion as dm
from .errors import NonFiniteValue
from .params import ParameterSet
from .tensor import ActivationLedger, backward


@dataclass
class BpConfig:
    eta: float = 1e-2
    resize_ratio: float = 0.5
    grad_clip: float | None = None

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if not 0 < self.resize_ratio <= 1:
            raise ValueError("resize_ratio must be in (0, 1]")


def clip_by_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; return the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def apply_gradients(params: ParameterSet, grads: dict[str, np.ndarray], eta: float) -> None:
    for g in grads.values():
        if not np.isfinite(g).all():
            raise NonFiniteValue("backward")
    if eta == 0:
        return
    updates = {}
    for name, g in grads.items():
        new = params[name].data - np.float32(eta) * g.astype(np.float32)
        if not np.isfinite(new).all():
            raise NonFiniteValue("sgd_update")
        updates[name] = new
    for name, new in updates.items():
        params[name].data[...] = new


def bp_step(params: ParameterSet, x: np.ndarray, c, t, cfg: BpConfig, eps_rng: np.random.Generator,
            model: dm.DenoiserConfig, schedule: dm.NoiseSchedule
            ) -> tuple[ParameterSet, float, ActivationLedger]:
    """Downsample ``x`` by ``cfg.resize_ratio``, backprop the loss, take one SGD step.

    The noise target is drawn at the low resolution. Nothing is updated if the
    forward or backward pass hits a non-finite value.
    """
    x_low = dm.downsample(np.asarray(x, dtype=np.float32), cfg.resize_ratio)
    if x_low.ndim == 2:
        x_low = x_low[None, None]
    eps = eps_rng.standard_normal(x_low.shape, dtype=np.float32)
    value, tape, ledger = dm.loss(params, x_low, c, t, eps, model, schedule, mode="record")
    grads = backward(tape, 1.0)
    if cfg.grad_clip:
        clip_by_norm(grads, cfg.grad_clip)
    apply_gradients(params, grads, cfg.eta)
    return params, value, ledger
