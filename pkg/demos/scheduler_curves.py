"""How often does each branch run?

Prints TAP and DTAP probabilities of picking the zeroth-order branch for a few
points in training, with k=0.05, t_mid=750, t_max=i_max=1000. Halfway through
training the two curves coincide; early on DTAP sends almost everything to
backprop, late in training it hands the upper half of the timesteps to ZO.
"""
import numpy as np

from hybopt.scheduler import SelectorConfig, dtap_probability, tap_probability, t_dyn

cfg = SelectorConfig(k=0.05, t_mid=750, t_max=1000, i_max=1000)
ts = [0, 250, 500, 625, 750, 875, 1000]

print("t      " + "".join(f"{t:>8d}" for t in ts))
print("TAP    " + "".join(f"{tap_probability(t, cfg):8.3f}" for t in ts))
for i in (0, 250, 500, 750, 1000):
    row = "".join(f"{dtap_probability(i, t, cfg):8.3f}" for t in ts)
    print(f"i={i:<5d}{row}   (midpoint {t_dyn(i, cfg):.0f})")

# expected share of ZO steps over a whole run, t uniform
grid_t = np.arange(1000)
share = np.mean([np.mean([dtap_probability(i, t, cfg) for t in grid_t[::10]]) for i in range(1, 1001, 10)])
print(f"\nexpected ZO share over a DTAP run: {share:.3f}")
