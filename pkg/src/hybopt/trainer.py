"""The selective training loop and toy-benchmark evaluation.

Each step samples an image and a timestep, asks the scheduler for a branch,
then runs either a low-resolution backprop step or a high-resolution ZO step.
The master seed feeds four independent streams (data, timestep, selection,
noise). The noise stream is re-derived per step from ``(seed, step)``, so every
ablation sees the same images, timesteps and noise whichever branch runs.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffusion as dm
from .bp import BpConfig, bp_step
from .errors import NonFiniteValue, TrainingAborted
from .params import ParameterSet
from .scheduler import Branch, SelectorConfig, select_branch, zo_probability
from .zo import ZoConfig, accumulate_step

RECORD_COLUMNS = ("step", "timestep", "image", "branch", "p_zo", "loss",
                  "bp_peak_elements", "zo_peak_elements", "status")


@dataclass
class TrainConfig:
    i_max: int = 400
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    bp: BpConfig = field(default_factory=BpConfig)
    zo: ZoConfig = field(default_factory=ZoConfig)
    seed: int = 0
    t_range: tuple[int, int] | None = None
    warmup_bp_steps: int = 0
    eval_every: int | None = None
    max_abort_fraction: float = 0.01


@dataclass
class TrainRecord:
    step: int
    timestep: int
    image: int
    branch: str
    p_zo: float
    loss: float
    bp_peak_elements: int
    zo_peak_elements: int
    status: str = "ok"
    wall_time: float = 0.0


@dataclass
class TrainResult:
    params: ParameterSet
    records: list[TrainRecord]
    evaluations: list[tuple[int, dict]] = field(default_factory=list)

    @property
    def aborted(self) -> int:
        return sum(r.status != "ok" for r in self.records)

    def branch_counts(self) -> dict[str, int]:
        counts = {b.value: 0 for b in Branch}
        for r in self.records:
            if r.status == "ok":
                counts[r.branch] += 1
        return counts

    def peak_elements(self) -> int:
        return max((max(r.bp_peak_elements, r.zo_peak_elements) for r in self.records), default=0)


class Streams:
    """Independent generators derived from one master seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self.data = self._gen(0)
        self.timestep = self._gen(1)
        self.selection = self._gen(2)

    def _gen(self, *key) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=key)))

    def noise(self, step: int) -> np.random.Generator:
        return self._gen(3, step)


def train(cfg: TrainConfig, params: ParameterSet, images: np.ndarray, token: int,
          model: dm.DenoiserConfig, schedule: dm.NoiseSchedule, eval_spec=None) -> TrainResult:
    """Run ``cfg.i_max`` selective steps on ``params`` in place."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[:, None]
    streams = Streams(cfg.seed)
    lo, hi = cfg.t_range or (0, schedule.t_max)
    n_trainable = params.n_elements(trainable_only=True)
    every = cfg.eval_every if cfg.eval_every is not None else max(1, cfg.i_max // 10)
    result = TrainResult(params, [])

    for i in range(1, cfg.i_max + 1):
        start = time.perf_counter()
        idx = int(streams.data.integers(len(images)))
        t = int(streams.timestep.integers(lo, hi))
        x = images[idx:idx + 1]
        noise = streams.noise(i)
        if i <= cfg.warmup_bp_steps:
            p, branch = 0.0, Branch.BP_LOW
        else:
            p = zo_probability(i, t, cfg.selector)
            branch = select_branch(i, t, cfg.selector, streams.selection)
        rec = TrainRecord(i, t, idx, branch.value, p, float("nan"), 0, 0)
        try:
            if branch is Branch.BP_LOW:
                _, value, ledger = bp_step(params, x, token, t, cfg.bp, noise, model, schedule)
                rec.loss = value
                rec.bp_peak_elements = ledger.peak_elements + n_trainable
            else:
                rec.loss, rec.zo_peak_elements = _zo_step(params, x, token, t, cfg.zo, noise, model, schedule)
        except NonFiniteValue:
            rec.status = "aborted"
            rec.bp_peak_elements = rec.zo_peak_elements = 0
        rec.wall_time = time.perf_counter() - start
        result.records.append(rec)
        if eval_spec is not None and every and i % every == 0 and i < cfg.i_max:
            result.evaluations.append((i, evaluate(params, eval_spec)))

    if eval_spec is not None:
        result.evaluations.append((cfg.i_max, evaluate(params, eval_spec)))
    if result.aborted > cfg.max_abort_fraction * cfg.i_max:
        raise TrainingAborted(f"{result.aborted} of {cfg.i_max} steps aborted")
    return result


def _zo_step(params, x, token, t, zo_cfg: ZoConfig, noise: np.random.Generator,
             model, schedule) -> tuple[float, int]:
    eps = noise.standard_normal(x.shape, dtype=np.float32)
    peak = 0

    def loss_fn(p):
        nonlocal peak
        value, _, ledger = dm.loss(p, x, token, t, eps, model, schedule, mode="forward_only")
        peak = max(peak, ledger.transient_peak)
        return value

    step = accumulate_step(params, loss_fn, zo_cfg, noise)
    return step.loss, peak


def records_csv(records: list[TrainRecord]) -> str:
    """Metrics CSV: fixed header and column order, no wall-clock values."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([r.step, r.timestep, r.image, r.branch, repr(float(r.p_zo)), repr(float(r.loss)),
                    r.bp_peak_elements, r.zo_peak_elements, r.status])
    return buf.getvalue()


def timing_csv(records: list[TrainRecord]) -> str:
    return "step,wall_time\n" + "".join(f"{r.step},{r.wall_time:.6f}\n" for r in records)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalSpec:
    subject_templates: np.ndarray
    class_templates: dict[int, np.ndarray]
    subject_token: int
    model: dm.DenoiserConfig
    schedule: dm.NoiseSchedule
    base_params: ParameterSet | None = None
    n_samples: int = 8
    steps: int = 50
    seed: int = 1234
    prior_samples: int = 4
    _base_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def base_samples(self, token: int) -> np.ndarray:
        if token not in self._base_cache:
            self._base_cache[token] = self.generate(self.base_params, token, self.prior_samples, 1 + token)
        return self._base_cache[token]

    def generate(self, params, token: int, n: int, offset: int = 0) -> np.ndarray:
        return dm.sample(params, token, self.model, self.schedule, steps=self.steps,
                         seed=self.seed + offset, n=n)


def coarse(images: np.ndarray, factor: int = 4) -> np.ndarray:
    """Area-average by ``factor``; keeps the global layout, drops texture."""
    return dm.downsample(np.asarray(images, dtype=np.float32), 1.0 / factor)


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel().astype(np.float64) - a.mean()
    b = b.ravel().astype(np.float64) - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    return float(np.dot(a, b) / den) if den > 0 else 0.0


def subject_fidelity(samples: np.ndarray, templates: np.ndarray) -> float:
    """Negative mean (over samples) of the MSE to the nearest template."""
    s = samples.reshape(len(samples), -1).astype(np.float64)
    t = templates.reshape(len(templates), -1).astype(np.float64)
    d = ((s[:, None, :] - t[None, :, :]) ** 2).mean(axis=2)
    return -float(d.min(axis=1).mean())


def structure_score(samples: np.ndarray, templates: np.ndarray) -> float:
    """Mean (over samples) of the best correlation between 4x-coarsened images."""
    cs, ct = coarse(samples), coarse(templates)
    return float(np.mean([max(_corr(a, b) for b in ct) for a in cs]))


def evaluate(params: ParameterSet, spec: EvalSpec) -> dict[str, float]:
    gen = spec.generate(params, spec.subject_token, spec.n_samples)
    drift = 0.0
    if spec.base_params is not None:
        diffs = []
        for token in sorted(spec.class_templates):
            mine = spec.generate(params, token, spec.prior_samples, 1 + token)
            diffs.append(float(np.mean((mine.astype(np.float64) - spec.base_samples(token)) ** 2)))
        drift = float(np.mean(diffs))
    return {
        "subject_fidelity": subject_fidelity(gen, spec.subject_templates),
        "structure_score": structure_score(gen, spec.subject_templates),
        "prior_drift": drift,
    }


def config_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["selector"]["mode"] = cfg.selector.mode.value
    return d
