"""Closed-form memory model for one training step of the denoiser.

BP memory = weights + activations saved for backward + one gradient buffer per
trainable tensor. ZO memory = weights + the working set of the largest single
primitive (no saved activations, no parameter-sized buffers thanks to seed
replay). Counts follow the rules of :mod:`hybopt.tensor`:

* a primitive is recorded only if one of its inputs requires a gradient;
* a recorded primitive retains the operands listed for its kind below;
* parameters are never counted as activations.

Bytes are elements x 4. Allocator overhead is ignored.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .diffusion import BLOCK_LEVELS, HIGH_RES, DenoiserConfig, resized_extent
from .errors import ShapeError, UnknownLayer

BYTES_PER_ELEMENT = 4
MIB = 1024 * 1024
DEFAULT_RATIOS = (0.5, 0.625, 0.75, 1.0)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    level: int = 0
    rank: int = 0


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[LayerSpec, ...]
    channels: int
    time_bins: int
    n_tokens: int
    lora_rank: int = 0
    base_trainable: bool = True
    name: str = "denoiser"

    def weight_elements(self) -> int:
        return sum(_weights(l, self) for l in self.layers)

    def trainable_elements(self) -> int:
        total = 0
        for l in self.layers:
            if self.base_trainable:
                total += _weights(l, self) - _lora_weights(l)
            total += _lora_weights(l)
        return total


def arch_spec(cfg: DenoiserConfig, base_trainable: bool | None = None, name: str = "denoiser") -> ArchSpec:
    """Descriptor list for :func:`hybopt.diffusion.denoise` under ``cfg``.

    With adapters (``cfg.lora_rank > 0``) the base is frozen unless
    ``base_trainable`` says otherwise.
    """
    c, r = cfg.channels, cfg.lora_rank
    layers = [LayerSpec("embed", out_ch=c), LayerSpec("conv_in", 1, c, 3, 0)]
    for b, level in enumerate(BLOCK_LEVELS):
        if b in (1, 2):
            layers.append(LayerSpec("pool", c, c, 2, level - 1))
        if b == 3:
            layers.append(LayerSpec("up_add", c, c, 2, level))
        layers.append(LayerSpec("block", c, c, 3, level, r))
    layers += [LayerSpec("up_add", c, c, 2, 0), LayerSpec("conv_out", c, 1, 3, 0), LayerSpec("mse", 1, 1, 0, 0)]
    if base_trainable is None:
        base_trainable = r == 0
    return ArchSpec(tuple(layers), c, cfg.time_bins, cfg.n_tokens, r, base_trainable, name)


def _lora_weights(layer: LayerSpec) -> int:
    return 2 * layer.rank * layer.in_ch if layer.kind == "block" else 0


def _weights(layer: LayerSpec, arch: ArchSpec) -> int:
    k = layer.kind
    if k == "embed":
        return (arch.time_bins + arch.n_tokens) * layer.out_ch
    if k in ("conv_in", "conv_out"):
        return layer.out_ch * layer.in_ch * layer.kernel ** 2 + layer.out_ch
    if k == "block":
        c = layer.in_ch
        return c * c * layer.kernel ** 2 + c + c * c + c + _lora_weights(layer)
    if k in ("pool", "up_add", "mse"):
        return 0
    raise UnknownLayer(f"unsupported layer kind {k!r}")


@dataclass
class _Op:
    stored: int
    transient: int


def _ops(arch: ArchSpec, height: int, width: int) -> Iterator[_Op]:
    """Yield one entry per primitive, in execution order."""
    if height % 4 or width % 4:
        raise ShapeError(f"extents must be divisible by 4, got {height}x{width}")
    base = arch.base_trainable
    c = arch.channels
    pix = [(height >> l) * (width >> l) for l in range(3)]
    grad = False          # does the running activation require a gradient?
    skips: list[bool] = []
    n_up = 0

    def rec(needs: bool, saved: int, transient: int) -> _Op:
        return _Op(saved if needs else 0, transient)

    for layer in arch.layers:
        k = layer.kind
        if k == "embed":
            yield rec(base, 0, c)               # time lookup
            yield rec(base, 0, c)               # condition lookup
            yield rec(base, 0, 3 * c)           # add
            yield rec(base, 0, 2 * c)           # reshape to (N, C, 1, 1)
        elif k == "conv_in":
            p = pix[0]
            yield rec(base, p, p + c * p)
            yield from _bias_ops(base, c, p)
            grad = base
        elif k == "block":
            p, r = pix[layer.level], layer.rank
            g1 = grad or base
            yield rec(g1, c * p, 2 * c * p)     # 3x3 conv saves its input
            yield from _bias_ops(g1, c, p)
            yield rec(base, 0, c + c * p)       # broadcast embedding
            yield rec(g1, 0, 3 * c * p)         # add embedding
            yield rec(g1, c * p, 2 * c * p)     # silu
            yield rec(g1, c * p, 2 * c * p)     # 1x1 projection
            if r:
                yield rec(True, c * p, c * p + r * p)   # u -> low rank
                yield rec(True, r * p, r * p + c * p)   # low rank -> out
                yield rec(True, 0, 3 * c * p)           # add
            g2 = g1 or r > 0
            yield from _bias_ops(g2, c, p)
            yield rec(g2, c * p, 2 * c * p)     # silu
            grad = g2
            if n_up == 0 and layer.level < 2:
                skips.append(grad)
        elif k == "pool":
            p = pix[layer.level]
            yield rec(grad, 0, c * p + c * p // 4)
        elif k == "up_add":
            hi = pix[layer.level]
            yield rec(grad, 0, 2 * c * hi // 4)  # reshape
            yield rec(grad, 0, c * hi // 4 + c * hi)  # broadcast
            yield rec(grad, 0, 2 * c * hi)       # reshape
            n_up += 1
            skip = skips.pop()
            grad = grad or skip
            yield rec(grad, 0, 3 * c * hi)
        elif k == "conv_out":
            p = pix[0]
            g = grad or base
            yield rec(g, c * p, c * p + p)
            yield from _bias_ops(g, 1, p)
            grad = g
        elif k == "mse":
            p = pix[0]
            yield rec(grad, 2 * p, 2 * p + 1)
        else:
            raise UnknownLayer(f"unsupported layer kind {k!r}")


def _bias_ops(needs: bool, c: int, p: int) -> Iterator[_Op]:
    yield _Op(0, c)                 # reshape bias to (1, C, 1, 1)
    yield _Op(0, c + c * p)         # broadcast
    yield _Op(0, 3 * c * p)         # add


@dataclass(frozen=True)
class MemoryEstimate:
    branch: str
    resolution: tuple[int, int]
    activation_elements: int
    parameter_buffers: int
    transient_elements: int
    weight_elements: int
    total_bytes: int = field(default=0)

    @property
    def total_mib(self) -> float:
        return self.total_bytes / MIB


def _extent(resolution) -> tuple[int, int]:
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    h, w = (int(v) for v in resolution)
    if h < 1 or w < 1:
        raise ShapeError("resolution must be at least 1 in each dimension")
    return h, w


def predict(arch: ArchSpec, resolution, branch: str) -> MemoryEstimate:
    """Per-step memory for ``branch`` ('BP' or 'ZO') at ``resolution``."""
    h, w = _extent(resolution)
    ops = list(_ops(arch, h, w))
    weights = arch.weight_elements()
    branch = branch.upper()
    if branch.startswith("BP"):
        act = sum(o.stored for o in ops)
        buffers = arch.trainable_elements()
        total = weights + act + buffers
        return MemoryEstimate("BP", (h, w), act, buffers, 0, weights, total * BYTES_PER_ELEMENT)
    if branch.startswith("ZO"):
        transient = max(o.transient for o in ops)
        return MemoryEstimate("ZO", (h, w), 0, 0, transient, weights, (weights + transient) * BYTES_PER_ELEMENT)
    raise ValueError(f"branch must be BP or ZO, got {branch!r}")


def step_elements(estimate: MemoryEstimate) -> int:
    """Non-weight elements of one step; comparable with trainer records."""
    return estimate.activation_elements + estimate.parameter_buffers + estimate.transient_elements


BENCHMARK_CONFIGS = {
    "tiny-lora": DenoiserConfig(channels=8, lora_rank=4),
    "small-lora": DenoiserConfig(channels=16, lora_rank=4),
    "wide-lora": DenoiserConfig(channels=32, lora_rank=4),
    "small-full": DenoiserConfig(channels=16),
}


def benchmark_archs() -> dict[str, ArchSpec]:
    """Architectures every memory claim is checked on."""
    return {name: arch_spec(cfg, name=name) for name, cfg in BENCHMARK_CONFIGS.items()}


REPORT_COLUMNS = ("arch", "method", "ratio", "bp_resolution", "bp_activation_elements",
                  "bp_mib", "zo_mib", "peak_mib")


def report(archs: dict[str, ArchSpec] | Iterable[ArchSpec], ratios=DEFAULT_RATIOS,
           high_res: int = HIGH_RES) -> list[dict]:
    """Table rows: BP-high baseline, then the hybrid at each ratio below 1.

    Peak is the larger of the BP and ZO figures; the baseline has no ZO branch.
    """
    if not isinstance(archs, dict):
        archs = {a.name: a for a in archs}
    rows = []
    for name, arch in archs.items():
        zo = predict(arch, high_res, "ZO")
        for r in sorted(set(ratios), reverse=True):
            res = resized_extent(high_res, r)
            bp = predict(arch, res, "BP")
            hybrid = r < 1.0
            rows.append({
                "arch": name,
                "method": f"hybrid(r={r:g})" if hybrid else "BP-high",
                "ratio": r,
                "bp_resolution": res,
                "bp_activation_elements": bp.activation_elements,
                "bp_mib": bp.total_mib,
                "zo_mib": zo.total_mib if hybrid else None,
                "peak_mib": max(bp.total_mib, zo.total_mib) if hybrid else bp.total_mib,
            })
    return rows


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row[k] is None else (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]))
                         for k in REPORT_COLUMNS})
    return buf.getvalue()
