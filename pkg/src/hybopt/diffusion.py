"""Pixel-space DDPM pieces: noise schedule, denoiser, loss, resampling, sampler.

The denoiser is a small fully convolutional U-Net (two pooling levels, four
conv blocks) conditioned on a bucketed timestep embedding and a condition
embedding. It has no parameter tied to the spatial extent, so one parameter
set trains at 16x16, 20x20, 24x24 and 32x32 alike (any extent divisible by 4).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tc
from .errors import InvalidTimestep, ShapeError
from .params import ParameterSet
from .tensor import Tensor

HIGH_RES = 32
N_BLOCKS = 4
BLOCK_LEVELS = (0, 1, 2, 1)


@dataclass(frozen=True)
class NoiseSchedule:
    t_max: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, t_max: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
        alphas = 1.0 - betas
        return cls(t_max, betas, alphas, np.cumprod(alphas))

    @classmethod
    def scaled_linear(cls, t_max: int = 1000, beta_start: float = 0.00085,
                      beta_end: float = 0.012) -> "NoiseSchedule":
        """Betas linear in sqrt-space (the latent-diffusion default)."""
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, t_max, dtype=np.float64) ** 2
        alphas = 1.0 - betas
        return cls(t_max, betas, alphas, np.cumprod(alphas))

    @classmethod
    def named(cls, kind: str, t_max: int = 1000) -> "NoiseSchedule":
        if kind == "linear":
            return cls.linear(t_max)
        if kind == "scaled_linear":
            return cls.scaled_linear(t_max)
        raise ValueError(f"unknown noise schedule {kind!r}")

    def check(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.min(initial=0) < 0 or t.max(initial=0) >= self.t_max:
            raise InvalidTimestep(f"timestep outside [0, {self.t_max}): {t}")
        return t


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 16
    time_bins: int = 32
    n_tokens: int = 5
    lora_rank: int = 0
    t_max: int = 1000


def noisify(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` scalar or one per batch row."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = schedule.check(t)
    ab = schedule.alpha_bars[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    out = np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * eps.astype(np.float64)
    return out.astype(x0.dtype if x0.dtype.kind == "f" else np.float32)


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape).astype(np.float32) * np.float32(np.sqrt(2.0 / fan_in))


def init_params(cfg: DenoiserConfig, seed: int = 0) -> ParameterSet:
    rng = np.random.default_rng(seed)
    c = cfg.channels
    p = ParameterSet()
    p.add("in.w", _he(rng, (c, 1, 3, 3), 9))
    p.add("in.b", np.zeros(c))
    p.add("temb", rng.standard_normal((cfg.time_bins, c)) * 0.5)
    p.add("cemb", rng.standard_normal((cfg.n_tokens, c)) * 0.5)
    for b in range(N_BLOCKS):
        p.add(f"blk{b}.conv.w", _he(rng, (c, c, 3, 3), 9 * c))
        p.add(f"blk{b}.conv.b", np.zeros(c))
        p.add(f"blk{b}.proj.w", _he(rng, (c, c, 1, 1), c))
        p.add(f"blk{b}.proj.b", np.zeros(c))
    p.add("out.w", _he(rng, (1, c, 3, 3), 9 * c) * np.float32(0.1))
    p.add("out.b", np.zeros(1))
    if cfg.lora_rank:
        add_lora(p, cfg, seed + 1)
    return p


def lora_names(params: ParameterSet) -> list[str]:
    return [n for n in params if ".lora_" in n]


def add_lora(params: ParameterSet, cfg: DenoiserConfig, seed: int = 0, rank: int | None = None) -> ParameterSet:
    """Attach rank-``r`` adapters to every 1x1 projection and freeze the base.

    ``lora_A`` (d_out x r) starts at zero and ``lora_B`` (r x d_in) is random,
    so the adapted model initially equals the base model exactly. Factors are
    stored with trailing 1x1 kernel axes so they feed ``conv2d`` directly.
    """
    r = rank or cfg.lora_rank or 4
    rng = np.random.default_rng(seed)
    c = cfg.channels
    for b in range(N_BLOCKS):
        params.add(f"blk{b}.proj.lora_A", np.zeros((c, r, 1, 1)))
        params.add(f"blk{b}.proj.lora_B", _he(rng, (r, c, 1, 1), c))
    params.set_trainable(lora_names(params))
    return params


def merged_projection(params: ParameterSet, block: int) -> np.ndarray:
    """Effective 1x1 projection weight ``base + A @ B`` as a (d_out, d_in) matrix."""
    w = params[f"blk{block}.proj.w"].data[:, :, 0, 0].astype(np.float64)
    a_name = f"blk{block}.proj.lora_A"
    if a_name in params:
        a = params[a_name].data[:, :, 0, 0].astype(np.float64)
        b = params[f"blk{block}.proj.lora_B"].data[:, :, 0, 0].astype(np.float64)
        w = w + a @ b
    return w


def _bias(h: Tensor, b: Tensor) -> Tensor:
    n, c, hh, ww = h.shape
    return tc.add(h, tc.broadcast_to(tc.reshape(b, (1, c, 1, 1)), (n, c, hh, ww)))


def _proj(params: ParameterSet, blk: int, u: Tensor) -> Tensor:
    pre = f"blk{blk}.proj"
    v = tc.conv2d(u, params[pre + ".w"])
    if pre + ".lora_A" in params:
        low = tc.conv2d(u, params[pre + ".lora_B"])
        v = tc.add(v, tc.conv2d(low, params[pre + ".lora_A"]))
    return _bias(v, params[pre + ".b"])


def _block(params: ParameterSet, blk: int, h: Tensor, emb: Tensor) -> Tensor:
    n, c, hh, ww = h.shape
    u = _bias(tc.conv2d(h, params[f"blk{blk}.conv.w"]), params[f"blk{blk}.conv.b"])
    u = tc.silu(tc.add(u, tc.broadcast_to(emb, (n, c, hh, ww))))
    return tc.silu(_proj(params, blk, u))


def time_bin(t, cfg: DenoiserConfig) -> np.ndarray:
    return (np.asarray(t, dtype=np.int64) * cfg.time_bins) // cfg.t_max


def denoise(params: ParameterSet, x_t: Tensor, t, c, cfg: DenoiserConfig) -> Tensor:
    """Predict the noise in ``x_t`` (N, 1, H, W); H and W must be divisible by 4."""
    n, _, h, w = x_t.shape
    if h % 4 or w % 4:
        raise ShapeError(f"denoiser needs extents divisible by 4, got {h}x{w}")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    ch = cfg.channels
    emb = tc.add(tc.embedding(params["temb"], time_bin(t, cfg)), tc.embedding(params["cemb"], c))
    emb = tc.reshape(emb, (n, ch, 1, 1))

    h0 = _bias(tc.conv2d(x_t, params["in.w"]), params["in.b"])
    s0 = _block(params, 0, h0, emb)
    s1 = _block(params, 1, tc.avg_pool2x2(s0), emb)
    s2 = _block(params, 2, tc.avg_pool2x2(s1), emb)
    s3 = _block(params, 3, tc.add(tc.upsample2x(s2), s1), emb)
    y = tc.add(tc.upsample2x(s3), s0)
    return _bias(tc.conv2d(y, params["out.w"]), params["out.b"])


Denoiser = Callable[[ParameterSet, Tensor, np.ndarray, np.ndarray], Tensor]


def loss(params: ParameterSet, x: np.ndarray, c, t, eps: np.ndarray, cfg: DenoiserConfig,
         schedule: NoiseSchedule, mode: str = "forward_only", denoiser: Denoiser | None = None):
    """Noise-prediction MSE at timestep ``t``.

    Returns ``(loss_value, tape, ledger)``; ``tape`` is None in forward-only mode.
    ``denoiser`` replaces the network (used to stub it out in tests).
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    eps = np.asarray(eps, dtype=np.float32).reshape(x.shape)
    x_t = noisify(x, t, eps, schedule)
    net = denoiser or (lambda p, xt, tt, cc: denoise(p, xt, tt, cc, cfg))

    def graph(xt, target):
        return tc.mse(net(params, xt, t, c), target)

    out, tape, ledger = tc.forward(graph, Tensor(x_t), Tensor(eps), mode=mode)
    return out.item(), tape, ledger


def _overlap_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row j holds the fraction of output cell j covered by each input cell."""
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, n_in + 1)[None, :])
    return np.clip(hi - lo, 0.0, None) * (n_out / n_in)


def resized_extent(n: int, r: float) -> int:
    return max(1, int(np.floor(n * r + 0.5)))


def downsample(x: np.ndarray, r: float) -> np.ndarray:
    """Area-weighted resampling of the last two axes by ratio ``r`` in (0, 1]."""
    if not 0 < r <= 1:
        raise ValueError(f"resize ratio must be in (0, 1], got {r}")
    x = np.asarray(x)
    h, w = x.shape[-2:]
    ho, wo = resized_extent(h, r), resized_extent(w, r)
    if (ho, wo) == (h, w):
        return x.copy()
    mh, mw = _overlap_matrix(h, ho), _overlap_matrix(w, wo)
    out = np.einsum("ih,...hw,jw->...ij", mh, x.astype(np.float64), mw)
    return out.astype(x.dtype if x.dtype.kind == "f" else np.float32)


def sample_timesteps(t_max: int, steps: int) -> np.ndarray:
    """Strictly decreasing integer timesteps from ``t_max - 1`` down to 0."""
    steps = max(1, min(steps, t_max))
    ts = np.unique(np.round(np.linspace(0, t_max - 1, steps)).astype(np.int64))
    return ts[::-1]


def sample(params: ParameterSet, c, cfg: DenoiserConfig, schedule: NoiseSchedule, steps: int = 50,
           seed: int = 0, n: int = 1, size: int = HIGH_RES, clip_denoised: bool = True) -> np.ndarray:
    """Ancestral DDPM sampling on a strided timestep grid, always at ``size``.

    Returns ``(n, 1, size, size)`` float32 images clamped to [-3, 3]. The final
    step (t = 0) returns the denoised estimate without adding noise.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    x = rng.standard_normal((n, 1, size, size), dtype=np.float32)
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    ts = sample_timesteps(schedule.t_max, steps)
    abar = schedule.alpha_bars
    for k, t in enumerate(ts):
        eps_hat, _, _ = tc.forward(lambda xt: denoise(params, xt, t, c, cfg), Tensor(x), mode="forward_only")
        ab_t = abar[t]
        x64 = x.astype(np.float64)
        x0 = (x64 - np.sqrt(1 - ab_t) * eps_hat.data) / np.sqrt(ab_t)
        if clip_denoised:
            x0 = np.clip(x0, -1.0, 1.0)
        if k == len(ts) - 1:
            x = x0
            break
        ab_prev = abar[ts[k + 1]]
        a_eff = ab_t / ab_prev
        b_eff = 1.0 - a_eff
        mean = (np.sqrt(ab_prev) * b_eff * x0 + np.sqrt(a_eff) * (1 - ab_prev) * x64) / (1 - ab_t)
        var = b_eff * (1 - ab_prev) / (1 - ab_t)
        x = mean + np.sqrt(var) * rng.standard_normal(x.shape)
        x = x.astype(np.float32)
    return np.clip(x, -3.0, 3.0).astype(np.float32)
