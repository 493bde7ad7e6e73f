import numpy as np
import pytest

from hybopt import diffusion as dm
from hybopt import tensor as tc
from hybopt.bp import BpConfig, apply_gradients, bp_step, clip_by_norm
from hybopt.errors import NonFiniteValue
from hybopt.params import ParameterSet

CFG = dm.DenoiserConfig(channels=8, lora_rank=4)
SCHEDULE = dm.NoiseSchedule.scaled_linear()


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


def image(seed, size=32):
    return np.random.default_rng(seed).uniform(-1, 1, (1, 1, size, size)).astype(np.float32)


def test_half_square_norm_stub():
    p = ParameterSet({"theta": np.array([1.0, 1.0])})
    # mean of two squares is half the squared norm
    _, tape, _ = tc.forward(lambda: tc.mean(tc.mul(p["theta"], p["theta"])))
    apply_gradients(p, tc.backward(tape, 1.0), 0.1)
    np.testing.assert_allclose(p["theta"].data, [0.9, 0.9], rtol=1e-7)


def test_zero_rate_leaves_parameters_bit_exact():
    p = dm.init_params(CFG, 0)
    for n in dm.lora_names(p):
        p[n].data[...] = np.random.default_rng(1).standard_normal(p[n].shape) * 0.1
    before = p.copy()
    _, value, _ = bp_step(p, image(0), 1, 500, BpConfig(eta=0.0), rng(), CFG, SCHEDULE)
    assert np.isfinite(value)
    assert p.equal(before)


def test_only_adapters_move():
    p = dm.init_params(CFG, 0)
    before = p.copy()
    bp_step(p, image(1), 1, 900, BpConfig(eta=0.05), rng(), CFG, SCHEDULE)
    moved = {n for n in p if not np.array_equal(p[n].data, before[n].data)}
    assert moved and moved <= set(dm.lora_names(p))


def _low_res_loss(p, x, c, t, r, noise_seed):
    x_low = dm.downsample(x, r)
    eps = rng(noise_seed).standard_normal(x_low.shape, dtype=np.float32)
    return dm.loss(p, x_low, c, t, eps, CFG, SCHEDULE)[0]


def test_small_steps_descend():
    descended = 0
    for trial in range(100):
        r = np.random.default_rng(trial)
        base = dm.init_params(CFG, trial)
        for n in dm.lora_names(base):
            base[n].data[...] = r.standard_normal(base[n].shape).astype(np.float32) * 0.1
        x, c, t = image(trial), int(r.integers(CFG.n_tokens)), int(r.integers(1000))
        before = _low_res_loss(base, x, c, t, 0.5, trial)
        eta = BpConfig().eta
        for _ in range(12):
            p = base.copy()
            bp_step(p, x, c, t, BpConfig(eta=eta), rng(trial), CFG, SCHEDULE)
            if _low_res_loss(p, x, c, t, 0.5, trial) <= before:
                descended += 1
                break
            eta /= 2
    assert descended >= 95


def test_half_resolution_stores_a_quarter():
    peaks = {}
    for r in (0.5, 1.0):
        _, _, ledger = bp_step(dm.init_params(CFG, 0), image(2), 0, 300, BpConfig(resize_ratio=r), rng(),
                               CFG, SCHEDULE)
        peaks[r] = ledger.peak_elements
    assert 0.24 <= peaks[0.5] / peaks[1.0] <= 0.26


@pytest.mark.parametrize("r", [0.5, 0.625, 0.75, 1.0])
def test_same_parameter_set_at_every_ratio(r):
    p = dm.init_params(CFG, 0)
    census = p.census()
    bp_step(p, image(3), 2, 700, BpConfig(resize_ratio=r), rng(), CFG, SCHEDULE)
    assert p.census() == census


def test_noise_is_drawn_at_low_resolution():
    p = dm.init_params(CFG, 0)
    g = rng(5)
    bp_step(p, image(4), 0, 100, BpConfig(resize_ratio=0.5), g, CFG, SCHEDULE)
    ref = rng(5)
    ref.standard_normal((1, 1, 16, 16), dtype=np.float32)
    assert g.random() == ref.random()


def test_non_finite_aborts_without_update():
    p = dm.init_params(CFG, 0)
    p["blk0.proj.lora_B"].data[...] = 1e30
    p["blk0.proj.lora_A"].data[...] = 1e30
    before = p.copy()
    with pytest.raises(NonFiniteValue), np.errstate(all="ignore"):
        bp_step(p, image(0), 0, 500, BpConfig(), rng(), CFG, SCHEDULE)
    assert p.equal(before)


def test_update_overflow_leaves_parameters_untouched():
    p = ParameterSet({"a": np.ones(2), "b": np.array([3e38, 1.0])})
    grads = {"a": np.ones(2, np.float32), "b": np.array([-3e38, 0.0], np.float32)}
    with pytest.raises(NonFiniteValue), np.errstate(over="ignore"):
        apply_gradients(p, grads, 1.0)
    np.testing.assert_array_equal(p["a"].data, [1, 1])


def test_clip_by_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    assert clip_by_norm(grads, 1.0) == 5.0
    np.testing.assert_allclose(np.concatenate([grads["a"], grads["b"]]), [0.6, 0, 0.8])
    assert clip_by_norm(grads, 10.0) == pytest.approx(1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        BpConfig(eta=-1)
    with pytest.raises(ValueError):
        BpConfig(resize_ratio=0)
    with pytest.raises(ValueError):
        BpConfig(resize_ratio=1.5)
