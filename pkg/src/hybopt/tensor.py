"""Dense tensors with a small tape-based reverse-mode engine.

Every primitive runs eagerly on numpy arrays. When a ``forward`` call is in
``"record"`` mode, primitives whose inputs require a gradient append a node to
the active :class:`Tape`, together with the operands their backward rule needs.
The :class:`ActivationLedger` counts those retained operands (the activations a
caching framework would keep alive) and, separately, the working set touched by
each primitive.

Named tensors are parameters. They are excluded from both ledger counts:
parameter storage is accounted for by :mod:`hybopt.memory`.

Model state is float32; dot products and means accumulate in float64. float64
tensors are accepted too and stay float64, which the finite-difference tests
rely on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteValue, ShapeError, TapeCorrupt

__all__ = [
    "Tensor", "Tape", "ActivationLedger", "forward", "backward",
    "add", "mul", "matmul", "conv2d", "relu", "silu", "mean", "mse",
    "avg_pool2x2", "broadcast_to", "reshape", "embedding", "upsample2x",
]


class Tensor:
    """A dense array plus the bookkeeping the tape needs."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None, _checked: bool = False):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        arr = np.asarray(data, dtype=dtype)
        if not _checked and not np.isfinite(arr).all():
            raise NonFiniteValue(name or "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class ActivationLedger:
    """Counts of activation elements retained for backward.

    ``live_elements``/``peak_elements`` track operands saved on the tape.
    ``transient_peak`` is the largest working set (non-parameter inputs plus
    output) of any single primitive, and is what a forward-only pass costs.
    """

    live_elements: int = 0
    peak_elements: int = 0
    transient_peak: int = 0

    def store(self, n: int) -> None:
        self.live_elements += n
        self.peak_elements = max(self.peak_elements, self.live_elements)

    def release(self, n: int) -> None:
        self.live_elements -= n

    def touch(self, n: int) -> None:
        self.transient_peak = max(self.transient_peak, n)


@dataclass(eq=False)
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable
    saved_elements: int


@dataclass(eq=False)
class Tape:
    nodes: list = field(default_factory=list)
    output: Tensor | None = None

    def __len__(self):
        return len(self.nodes)

    def parameters(self) -> dict[str, Tensor]:
        found: dict[str, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if isinstance(t, Tensor) and t.name is not None and t.requires_grad:
                    if found.setdefault(t.name, t) is not t:
                        raise TapeCorrupt(f"two distinct tensors share the name {t.name!r}")
        return found


@dataclass
class _Context:
    tape: Tape | None
    ledger: ActivationLedger


_STACK: list[_Context] = []


def forward(graph_fn: Callable, *inputs, mode: str = "record"):
    """Run ``graph_fn(*inputs)``; return ``(output, tape_or_None, ledger)``."""
    if mode not in ("record", "forward_only"):
        raise ValueError(f"mode must be 'record' or 'forward_only', got {mode!r}")
    for x in inputs:
        if isinstance(x, Tensor) and not np.isfinite(x.data).all():
            raise NonFiniteValue(x.name or "input")
    tape = Tape() if mode == "record" else None
    ctx = _Context(tape, ActivationLedger())
    _STACK.append(ctx)
    try:
        out = graph_fn(*inputs)
    finally:
        _STACK.pop()
    if tape is not None:
        tape.output = out
    return out, tape, ctx.ledger


def _count(t) -> int:
    if isinstance(t, Tensor) and t.name is None:
        return t.size
    return 0


def _emit(op: str, out: np.ndarray, inputs: tuple, grad_fn: Callable, saved: tuple = ()) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteValue(op)
    result = Tensor(out, dtype=out.dtype, _checked=True)
    if not _STACK:
        return result
    ctx = _STACK[-1]
    ctx.ledger.touch(sum(_count(t) for t in inputs) + result.size)
    if ctx.tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        result.requires_grad = True
        n_saved = sum(_count(t) for t in saved)
        ctx.tape.nodes.append(_Node(op, inputs, result, grad_fn, n_saved))
        ctx.ledger.store(n_saved)
    return result


def backward(tape: Tape, output_grad) -> dict[str, np.ndarray]:
    """Reverse sweep over ``tape``; gradients keyed by parameter name."""
    if tape is None or tape.output is None:
        raise TapeCorrupt("tape has no recorded output (was it produced in forward_only mode?)")
    out = tape.output
    g0 = np.asarray(output_grad.data if isinstance(output_grad, Tensor) else output_grad,
                    dtype=out.dtype)
    if g0.shape != out.shape:
        g0 = g0.reshape(out.shape) if g0.size == out.size else None
        if g0 is None:
            raise TapeCorrupt(f"output_grad shape does not match tape output {out.shape}")
    params = tape.parameters()
    produced = {id(n.output) for n in tape.nodes}
    if tape.nodes and id(out) not in produced:
        raise TapeCorrupt("tape output was not produced by any recorded node")

    grads: dict[int, np.ndarray] = {id(out): g0}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise TapeCorrupt(f"{node.op}: gradient shape {gi.shape} != operand shape {inp.shape}")
            gi = gi.astype(inp.dtype, copy=False)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {}
    for name, p in params.items():
        g = grads.get(id(p))
        result[name] = np.zeros_like(p.data) if g is None else g
    return result


# ---------------------------------------------------------------------------
# primitives

def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x), dtype=like.dtype)


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (use broadcast_to)")


def add(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim:
            raise ShapeError("mul: constant factor must be a scalar")
        return _emit("mul", a.data * c, (a,), lambda g: (g * c,))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad), saved=(a, b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    dt = np.result_type(ad, bd)
    out = (ad.astype(np.float64) @ bd.astype(np.float64)).astype(dt)

    def grad(g):
        g64 = g.astype(np.float64)
        return g64 @ bd.T.astype(np.float64), ad.T.astype(np.float64) @ g64

    return _emit("matmul", out, (a, b), grad, saved=(a, b))


def conv2d(x: Tensor, w: Tensor, padding: int | None = None) -> Tensor:
    """Stride-1 cross-correlation, NCHW input, (out, in, kh, kw) kernel.

    ``padding`` defaults to ``kh // 2`` (same-size output for odd kernels).
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} * {w.shape}")
    kh, kw = w.shape[2:]
    p = kh // 2 if padding is None else padding
    xd, wd = x.data, w.data
    dt = np.result_type(xd, wd)
    w64 = wd.astype(np.float64)
    if kh == kw == 1 and p == 0:
        out = np.tensordot(w64[:, :, 0, 0], xd.astype(np.float64), axes=([1], [1]))
        out = out.transpose(1, 0, 2, 3).astype(dt)

        def grad(g):
            g64 = g.astype(np.float64)
            gw = np.tensordot(g64, xd.astype(np.float64), axes=([0, 2, 3], [0, 2, 3]))
            gx = np.tensordot(g64, w64[:, :, 0, 0], axes=([1], [0])).transpose(0, 3, 1, 2)
            return gx, gw[:, :, None, None]

        return _emit("conv2d", out, (x, w), grad, saved=(x, w))

    xp = np.pad(xd.astype(np.float64), ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, kh, kw
    out = np.tensordot(win, w64, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2).astype(dt)
    n, c, h, wd_ = xd.shape
    ho, wo = out.shape[2:]

    def grad(g):
        g64 = g.astype(np.float64)
        xp_ = np.pad(xd.astype(np.float64), ((0, 0), (0, 0), (p, p), (p, p)))
        win_ = sliding_window_view(xp_, (kh, kw), axis=(2, 3))
        gw = np.tensordot(g64, win_, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw
        gwin = np.tensordot(g64, w64, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
        gxp = np.zeros_like(xp_)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, p:p + h, p:p + wd_], gw

    return _emit("conv2d", out, (x, w), grad, saved=(x, w))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _emit("relu", out, (x,), lambda g: (g * (out > 0),), saved=(x,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def grad(g):
        return (g * (s * (1 + xd * (1 - s))),)

    return _emit("silu", xd * s, (x,), grad, saved=(x,))


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.astype(np.float64).mean(), dtype=x.dtype)
    return _emit("mean", out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences, accumulated in float64."""
    _same_shape("mse", a, b)
    ad, bd = a.data, b.data
    diff = ad.astype(np.float64) - bd.astype(np.float64)
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=np.result_type(ad, bd))

    def grad(g):
        d = (2.0 / n) * float(g) * (ad.astype(np.float64) - bd.astype(np.float64))
        return d, -d

    return _emit("mse", out, (a, b), grad, saved=(a, b))


def avg_pool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial extents, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).astype(np.float64).mean(axis=(3, 5)).astype(x.dtype)

    def grad(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return _emit("avg_pool", out, (x,), grad)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if x.data.ndim != len(shape):
        raise ShapeError("broadcast_to: rank must match (reshape first)")
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a == 1 and b != 1)

    def grad(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _emit("broadcast", out, (x,), grad)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape).copy()
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),))


def embedding(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]``; ``index`` is an integer array."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= table.shape[0]:
        raise IndexError(f"embedding index out of range for table of {table.shape[0]} rows")
    out = table.data[idx]

    def grad(g):
        gt = np.zeros(table.shape, dtype=np.float64)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit("embedding", out, (table,), grad)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling, composed from reshape and broadcast."""
    n, c, h, w = x.shape
    y = reshape(x, (n, c, h, 1, w, 1))
    y = broadcast_to(y, (n, c, h, 2, w, 2))
    return reshape(y, (n, c, 2 * h, 2 * w))
