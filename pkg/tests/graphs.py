"""Random small graphs and a central finite-difference oracle for gradient checks."""
from __future__ import annotations

import numpy as np

from hybopt import tensor as tc
from hybopt.params import ParameterSet
from hybopt.tensor import Tensor

H = 1e-3


def numeric_grad(loss_of_flat, theta: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences, everything in float64."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (loss_of_flat(theta + e) - loss_of_flat(theta - e)) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Max over components of ``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps components that are zero up to FD noise from dominating.
    """
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


class RandomGraph:
    """A random composition of the supported primitives ending in a scalar.

    Parameters are float64 so the oracle is not limited by float32 rounding.
    ``kinks`` collects every relu input so callers can reject draws that sit
    within a finite-difference step of the non-smooth point.
    """

    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        self.rng = rng
        self.kind = ("mlp", "conv", "mixed")[seed % 3]
        n, c, s = 2, int(rng.integers(1, 3)), 4
        p = self.params = ParameterSet()
        f64 = dict(dtype=np.float64)
        if self.kind == "mlp":
            d_in, d_h = int(rng.integers(2, 5)), int(rng.integers(2, 5))
            self.x = rng.standard_normal((n, d_in))
            p.add("w1", rng.standard_normal((d_in, d_h)), **f64)
            p.add("w2", rng.standard_normal((d_h, 1)), **f64)
            p.add("b1", rng.standard_normal((1, d_h)) * 0.1, **f64)
        elif self.kind == "conv":
            self.x = rng.standard_normal((n, c, s, s))
            p.add("k1", rng.standard_normal((c, c, 3, 3)) * 0.5, **f64)
            p.add("k2", rng.standard_normal((1, c, 1, 1)), **f64)
            p.add("emb", rng.standard_normal((3, c)), **f64)
            self.idx = rng.integers(0, 3, size=n)
        else:
            self.x = rng.standard_normal((n, c, s, s))
            p.add("k1", rng.standard_normal((c, c, 3, 3)) * 0.5, **f64)
            p.add("gain", rng.standard_normal((n, c, s // 2, s // 2)), **f64)
            self.target = rng.standard_normal((n, c, s, s))
        self.kinks: list[np.ndarray] = []

    def __call__(self, params: ParameterSet) -> Tensor:
        self.kinks = []
        x = Tensor(self.x, dtype=np.float64)
        if self.kind == "mlp":
            n, d_h = x.shape[0], params["w1"].shape[1]
            h = tc.add(tc.matmul(x, params["w1"]), tc.broadcast_to(params["b1"], (n, d_h)))
            self.kinks.append(h.data.copy())
            h = tc.relu(h)
            y = tc.matmul(tc.silu(h), params["w2"])
            return tc.mean(tc.mul(y, y))
        if self.kind == "conv":
            n, c = x.shape[:2]
            e = tc.reshape(tc.embedding(params["emb"], self.idx), (n, c, 1, 1))
            h = tc.add(tc.conv2d(x, params["k1"]), tc.broadcast_to(e, x.shape))
            h = tc.silu(h)
            y = tc.conv2d(tc.avg_pool2x2(h), params["k2"])
            return tc.mse(y, Tensor(np.zeros(y.shape), dtype=np.float64))
        h = tc.silu(tc.conv2d(x, params["k1"]))
        pooled = tc.mul(tc.avg_pool2x2(h), params["gain"])
        up = tc.upsample2x(pooled)
        self.kinks.append(up.data.copy() + 0.3)
        out = tc.relu(tc.add(up, 0.3))
        return tc.mse(tc.add(out, h), Tensor(self.target, dtype=np.float64))

    def loss_of_flat(self, theta: np.ndarray) -> float:
        p = self.params.copy()
        p.assign_flat(theta)
        out, _, _ = tc.forward(lambda: self(p), mode="forward_only")
        return float(out.data)

    def near_kink(self, h: float = H) -> bool:
        out, _, _ = tc.forward(lambda: self(self.params), mode="forward_only")
        scale = 10 * h * max(1.0, float(np.abs(self.params.flatten()).max()))
        return any(np.abs(k).min() < scale for k in self.kinks)

    def check(self) -> float:
        out, tape, _ = tc.forward(lambda: self(self.params), mode="record")
        grads = tc.backward(tape, 1.0)
        analytic = np.concatenate([grads[n].ravel() for n in self.params.trainable_names()])
        numeric = numeric_grad(self.loss_of_flat, self.params.flatten().astype(np.float64))
        return relative_error(analytic, numeric)


def smooth_graphs(count: int, start: int = 0):
    """``count`` random graphs, skipping draws that sit near a relu kink."""
    seed = start
    out = []
    while len(out) < count:
        g = RandomGraph(seed)
        if not g.near_kink():
            out.append(g)
        seed += 1
    return out
