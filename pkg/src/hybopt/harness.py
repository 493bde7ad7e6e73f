"""Experiment plumbing: pretraining, personalization runs and ablation presets.

Everything here is driven by a :class:`hybopt.config.Config`. The functions
return plain rows (lists of dicts) so callers can write CSV or inspect them.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from . import data as toy
from . import diffusion as dm
from . import memory
from . import tensor as tc
from .bp import BpConfig
from .config import Config
from .errors import HybOptError
from .params import ParameterSet
from .scheduler import Mode, SelectorConfig
from .trainer import EvalSpec, TrainConfig, TrainResult, evaluate, structure_score, train
from .zo import ZoConfig

TIMESTEP_RANGES = ((0, 250), (250, 500), (500, 750), (750, 1000))


def model_config(cfg: Config, lora: bool = False) -> dm.DenoiserConfig:
    return dm.DenoiserConfig(channels=cfg["model.channels"], time_bins=cfg["model.time_bins"],
                             n_tokens=len(toy.CLASSES) + 1,
                             lora_rank=cfg["model.lora_rank"] if lora else 0,
                             t_max=cfg["model.t_max"])


def noise_schedule(cfg: Config) -> dm.NoiseSchedule:
    return dm.NoiseSchedule.named(cfg["model.schedule"], cfg["model.t_max"])


def dataset(cfg: Config) -> toy.ToyDataset:
    return toy.generate(cfg["data.seed"], per_class=cfg["data.per_class"],
                        n_subject=cfg["data.n_subject"], n_templates=cfg["data.n_templates"])


# ---------------------------------------------------------------------------
# pretraining

class PretrainFailed(HybOptError):
    pass


@dataclass
class PretrainResult:
    params: ParameterSet
    losses: np.ndarray
    class_structure: dict[int, float]
    seconds: float

    def final_loss(self, window: int = 500) -> float:
        return float(np.mean(self.losses[-window:]))

    def moving_average(self, n_checkpoints: int = 10) -> np.ndarray:
        """Mean loss over ``n_checkpoints`` equal, consecutive chunks of the run."""
        chunks = np.array_split(self.losses, min(n_checkpoints, max(1, len(self.losses))))
        return np.array([c.mean() for c in chunks])

    def summary(self) -> dict:
        return {"final_loss": self.final_loss(), "seconds": round(self.seconds, 1),
                "checkpoint_losses": [float(v) for v in self.moving_average()],
                "class_structure": {toy.CLASSES[k]: v for k, v in self.class_structure.items()}}


def pretrain(cfg: Config, ds: toy.ToyDataset, seed: int, log=None) -> PretrainResult:
    """Fit the base denoiser on the prior classes with Adam and a cosine decay.

    Adam is used only here, to get a usable base model inside the time budget;
    personalization itself is plain SGD / ZO.
    """
    model = model_config(cfg)
    schedule = noise_schedule(cfg)
    params = dm.init_params(model, seed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(7,))))
    steps, batch, lr = cfg["pretrain.steps"], cfg["pretrain.batch"], cfg["pretrain.lr"]
    warm = max(1, cfg["pretrain.warmup"])
    m = {n: np.zeros(t.shape) for n, t in params.items()}
    v = {n: np.zeros(t.shape) for n, t in params.items()}
    b1, b2 = 0.9, 0.999
    losses = np.zeros(steps)
    start = time.perf_counter()
    for it in range(1, steps + 1):
        idx = rng.integers(len(ds.prior_images), size=batch)
        x, c = ds.prior_images[idx], ds.prior_labels[idx]
        t = rng.integers(0, schedule.t_max, size=batch)
        eps = rng.standard_normal(x.shape, dtype=np.float32)
        value, tape, _ = dm.loss(params, x, c, t, eps, model, schedule, mode="record")
        grads = tc.backward(tape, 1.0)
        losses[it - 1] = value
        step = lr * min(1.0, it / warm) * (0.1 + 0.45 * (1 + np.cos(np.pi * it / steps)))
        for name, g in grads.items():
            m[name] = b1 * m[name] + (1 - b1) * g
            v[name] = b2 * v[name] + (1 - b2) * g * g
            mh = m[name] / (1 - b1 ** it)
            vh = v[name] / (1 - b2 ** it)
            params[name].data[...] -= (step * mh / (np.sqrt(vh) + 1e-8)).astype(np.float32)
        if log and it % 500 == 0:
            log(f"pretrain step {it}/{steps} loss {losses[it - 500:it].mean():.4f}")
    seconds = time.perf_counter() - start
    return PretrainResult(params, losses, class_structure(params, cfg, ds), seconds)


def class_structure(params: ParameterSet, cfg: Config, ds: toy.ToyDataset) -> dict[int, float]:
    model, schedule = model_config(cfg), noise_schedule(cfg)
    out = {}
    for k in range(ds.n_classes):
        g = dm.sample(params, k, model, schedule, steps=cfg["eval.steps"], seed=cfg["eval.seed"] + k,
                      n=cfg["eval.n_samples"])
        out[k] = structure_score(g, ds.class_templates[k])
    return out


def check_pretrain(result: PretrainResult, cfg: Config) -> list[str]:
    """Reasons the base model is unusable (empty if it passes)."""
    problems = []
    if result.final_loss() > cfg["pretrain.target_loss"]:
        problems.append(f"final loss {result.final_loss():.4f} above target {cfg['pretrain.target_loss']}")
    curve = result.moving_average()
    if np.any(np.diff(curve) >= 0):
        problems.append(f"loss not strictly decreasing across checkpoints: {np.round(curve, 4).tolist()}")
    low = {toy.CLASSES[k]: round(s, 3) for k, s in result.class_structure.items()
           if s < cfg["pretrain.min_structure"]}
    if low:
        problems.append(f"class structure below {cfg['pretrain.min_structure']}: {low}")
    return problems


# ---------------------------------------------------------------------------
# personalization

def personalization_params(base: ParameterSet, cfg: Config, ds: toy.ToyDataset) -> ParameterSet:
    """Copy of ``base`` with a subject token row and (optionally) adapters.

    The subject row starts from the subject's prior class row plus fixed
    Gaussian noise, so the new token begins "near" its class.
    """
    p = base.copy()
    model = model_config(cfg, lora=True)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg["data.seed"], spawn_key=(9,))))
    row = p["cemb"].data[ds.subject_class].astype(np.float64)
    noise = cfg["train.token_noise"] * rng.standard_normal(row.shape)
    p["cemb"].data[ds.subject_token] = (row + noise).astype(np.float32)
    if model.lora_rank:
        dm.add_lora(p, model, seed=cfg["data.seed"] + 1)
        names = dm.lora_names(p)
    else:
        names = [n for n in p if n != "cemb"]
    if cfg["train.train_token"]:
        names = names + ["cemb"]
    p.set_trainable(names)
    return p


def eval_spec(cfg: Config, ds: toy.ToyDataset, base: ParameterSet | None) -> EvalSpec:
    return EvalSpec(ds.subject_images, ds.class_templates, ds.subject_token,
                    model_config(cfg, lora=True), noise_schedule(cfg), base_params=base,
                    n_samples=cfg["eval.n_samples"], steps=cfg["eval.steps"], seed=cfg["eval.seed"],
                    prior_samples=cfg["eval.prior_samples"])


def train_config(cfg: Config, seed: int) -> TrainConfig:
    i_max = cfg["train.i_max"]
    t_max = cfg["model.t_max"]
    lo, hi = cfg["train.t_lo"], cfg["train.t_hi"]
    t_range = None if (lo, hi) in ((0, None), (0, t_max)) else (lo, t_max if hi is None else hi)
    return TrainConfig(
        i_max=i_max,
        selector=SelectorConfig(k=cfg["selector.k"], t_mid=cfg["selector.t_mid"], t_max=t_max,
                                i_max=i_max, mode=Mode(cfg["selector.mode"].upper())),
        bp=BpConfig(eta=cfg["bp.eta"], resize_ratio=cfg["bp.resize_ratio"], grad_clip=cfg["bp.grad_clip"]),
        zo=ZoConfig(epsilon=cfg["zo.epsilon"], alpha=cfg["zo.alpha"],
                    num_perturbations=cfg["zo.num_perturbations"]),
        seed=seed, t_range=t_range,
        warmup_bp_steps=int(round(cfg["train.warmup_fraction"] * i_max)),
        eval_every=cfg["train.eval_every"] or 0,
        max_abort_fraction=cfg["train.max_abort_fraction"],
    )


def personalize(cfg: Config, base: ParameterSet, ds: toy.ToyDataset, seed: int,
                spec: EvalSpec | None = None) -> TrainResult:
    params = personalization_params(base, cfg, ds)
    spec = spec or eval_spec(cfg, ds, base)
    return train(train_config(cfg, seed), params, ds.subject_images, ds.subject_token,
                 model_config(cfg, lora=True), noise_schedule(cfg), eval_spec=spec)


def predicted_peak_mib(cfg: Config, method: str) -> float:
    """Peak of the per-step memory model for a method's branches."""
    arch = memory.arch_spec(model_config(cfg, lora=True))
    ratio = 1.0 if method == "BP-high" else cfg["bp.resize_ratio"]
    bp = memory.predict(arch, dm.resized_extent(dm.HIGH_RES, ratio), "BP").total_mib
    if method in ("BP-high", "BP-low"):
        return bp
    zo = memory.predict(arch, dm.HIGH_RES, "ZO").total_mib
    return zo if method == "ZO-only" else max(bp, zo)


# ---------------------------------------------------------------------------
# ablation presets

METHODS = {
    # name: (selector mode, uses the resize ratio, warmup fraction)
    "BP-high": ("ALWAYS_BP", False, 0.0),
    "BP-low": ("ALWAYS_BP", True, 0.0),
    "ZO-only": ("ALWAYS_ZO", True, 0.0),
    "TAP": ("TAP", True, 0.0),
    "DTAP": ("DTAP", True, 0.0),
    "UNIFORM_RANDOM": ("UNIFORM_RANDOM", True, 0.0),
    "REVERSED": ("REVERSED", True, 0.0),
    "ZO-scratch": ("ALWAYS_ZO", True, 0.0),
    "ZO-after-BP-warmup": ("ALWAYS_ZO", True, 0.3),
}

PRESETS = {
    "observation1": ["ZO-scratch", "ZO-after-BP-warmup"],
    "main": ["BP-high", "DTAP", "REVERSED", "UNIFORM_RANDOM"],
    "grid": ["BP-high", "BP-low", "ZO-only", "TAP", "DTAP", "UNIFORM_RANDOM", "REVERSED"],
}

ROW_COLUMNS = ("preset", "method", "ratio", "t_lo", "t_hi", "seed", "subject_fidelity",
               "structure_score", "prior_drift", "zo_steps", "bp_steps", "aborted",
               "run_peak_elements", "predicted_peak_mib")


def method_config(cfg: Config, method: str, ratio: float | None = None) -> Config:
    mode, uses_ratio, warm = METHODS[method]
    out = Config(cfg)
    out["selector.mode"] = mode
    out["train.warmup_fraction"] = warm
    out["bp.resize_ratio"] = (ratio if ratio is not None else cfg["bp.resize_ratio"]) if uses_ratio else 1.0
    return out


def _row(preset, method, run_cfg: Config, seed, result: TrainResult) -> dict:
    metrics = result.evaluations[-1][1] if result.evaluations else {}
    counts = result.branch_counts()
    t_hi = run_cfg["train.t_hi"] if run_cfg["train.t_hi"] is not None else run_cfg["model.t_max"]
    return {
        "preset": preset, "method": method, "ratio": run_cfg["bp.resize_ratio"],
        "t_lo": run_cfg["train.t_lo"], "t_hi": t_hi, "seed": seed,
        "subject_fidelity": metrics.get("subject_fidelity"),
        "structure_score": metrics.get("structure_score"),
        "prior_drift": metrics.get("prior_drift"),
        "zo_steps": counts["ZO_HIGH"], "bp_steps": counts["BP_LOW"], "aborted": result.aborted,
        "run_peak_elements": result.peak_elements(),
        "predicted_peak_mib": predicted_peak_mib(run_cfg, method),
    }


def runs(preset: str, cfg: Config) -> list[tuple[str, Config]]:
    """The (method, config) cells of ``preset`` for one seed."""
    if preset == "observation2":
        cells = []
        for ratio in (0.5, 1.0):
            for lo, hi in TIMESTEP_RANGES:
                c = method_config(cfg, "BP-low", ratio)
                scale = cfg["model.t_max"] / 1000
                c["train.t_lo"], c["train.t_hi"] = int(lo * scale), int(hi * scale)
                cells.append(("BP-high" if ratio == 1.0 else "BP-low", c))
        return cells
    if preset == "grid":
        cells = []
        for method in PRESETS["grid"]:
            ratios = [1.0] if method == "BP-high" else list(cfg["ablate.ratios"])
            cells += [(method, method_config(cfg, method, r)) for r in ratios]
        return cells
    if preset not in PRESETS:
        raise HybOptError(f"unknown preset {preset!r}; choose from "
                          f"{sorted(PRESETS) + ['observation2']}")
    return [(m, method_config(cfg, m)) for m in PRESETS[preset]]


def run_preset(preset: str, cfg: Config, base: ParameterSet, ds: toy.ToyDataset,
               seeds=None, log=None) -> list[dict]:
    spec = eval_spec(cfg, ds, base)
    rows = []
    for seed in (seeds if seeds is not None else cfg["ablate.seeds"]):
        for method, run_cfg in runs(preset, cfg):
            result = personalize(run_cfg, base, ds, seed, spec)
            rows.append(_row(preset, method, run_cfg, seed, result))
            if log:
                r = rows[-1]
                log(f"{preset} seed={seed} {method} r={r['ratio']} t=[{r['t_lo']},{r['t_hi']}) "
                    f"fidelity={r['subject_fidelity']:.4f} structure={r['structure_score']:.4f}")
    return rows


def rows_csv(rows: list[dict], columns=ROW_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
