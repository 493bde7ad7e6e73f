"""Zeroth-order steps without storing the perturbation.

A MeZO-style step needs z three times (probe +, probe -, update). Instead of
keeping z around, we keep its seed and regenerate it. This script checks the
result against a version that does keep z, and measures what the step
allocates on a 1M-parameter set.
"""
import tracemalloc

import numpy as np

from hybopt import zo
from hybopt.params import ParameterSet


def loss(p):
    # a shifted quadratic, cheap and allocation free
    return sum(float(np.dot(t.data.ravel() - 0.5, t.data.ravel() - 0.5)) for t in p.trainable())


rng = np.random.default_rng(0)
theta = rng.standard_normal(2000).astype(np.float32)
p = ParameterSet({"w": theta.reshape(40, 50)})
cfg = zo.ZoConfig(epsilon=1e-3, alpha=1e-3, num_perturbations=4)
gen = np.random.Generator(np.random.Philox(1))
step = zo.accumulate_step(p, loss, cfg, gen)

# dense version: materialize every z
ref = theta.astype(np.float64)
for seed, g in zip(step.seeds, step.projected_grads):
    z = zo.perturbation(seed, [(40, 50)])[0].ravel()
    ref -= cfg.alpha * g / cfg.num_perturbations * z
print("projected grads:", np.round(step.projected_grads, 3))
print("max |replay - dense|:", float(np.abs(p.flatten() - ref).max()))

big = ParameterSet({"a": np.zeros(1_000_000)})
tracemalloc.start()
zo.accumulate_step(big, lambda q: float(np.dot(q["a"].data, q["a"].data)), cfg, gen)
peak = tracemalloc.get_traced_memory()[1]
tracemalloc.stop()
print(f"parameters: {big.n_elements() * 4 / 2**20:.1f} MiB, step allocated at most {peak / 2**10:.0f} KiB")
