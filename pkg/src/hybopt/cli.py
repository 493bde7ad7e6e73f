"""Command-line front end (``python -m hybopt <subcommand>``).

Every subcommand takes ``--config``, ``--seed`` and ``--out`` and writes a
``manifest.json`` next to its outputs recording the resolved configuration,
its hash, the seed and the code version.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import data as toy
from . import harness, memory
from .errors import ConfigError, HybOptError, TrainingAborted
from .params import load_checkpoint, save_checkpoint
from .scheduler import SelectorConfig, probability_grid
from .trainer import config_dict, evaluate, records_csv, timing_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def code_version() -> str:
    root = Path(__file__).resolve().parents[2]
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=root,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: cfgmod.Config, seed: int, files: list[str],
                   extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "code_version": code_version(),
        "config_hash": cfg.digest(),
        "config": json.loads(cfg.canonical()),
        "seed": seed,
        "streams": {"data": [seed, 0], "timestep": [seed, 1], "selection": [seed, 2], "noise": [seed, 3]},
        "data_generator_version": toy.GENERATOR_VERSION,
        "outputs": {f: _sha256(out / f) for f in sorted(files)},
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _base(args, cfg) -> "harness.ParameterSet":
    path = args.base or cfg["pretrain.checkpoint"]
    if not path:
        raise ConfigError("no base checkpoint: pass --base or set pretrain.checkpoint (run `pretrain` first)")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, cfg, out: Path) -> int:
    ds = harness.dataset(cfg)
    toy.save(ds, out / "dataset.npz")
    write_manifest(out, "gen-data", cfg, args.seed, ["dataset.npz"],
                   {"n_prior": int(len(ds.prior_images)), "n_subject": int(len(ds.subject_images))})
    return EXIT_OK


def cmd_pretrain(args, cfg, out: Path) -> int:
    ds = harness.dataset(cfg)
    result = harness.pretrain(cfg, ds, args.seed, log=_log)
    save_checkpoint(result.params, out / "base.ckpt")
    curve = "step,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(result.losses.tolist()))
    (out / "pretrain_loss.csv").write_text(curve)
    problems = harness.check_pretrain(result, cfg)
    summary = result.summary()
    summary.pop("seconds")
    write_manifest(out, "pretrain", cfg, args.seed, ["base.ckpt", "pretrain_loss.csv"],
                   {"pretrain": summary, "target_loss": cfg["pretrain.target_loss"], "problems": problems})
    _log(f"pretrain: final loss {result.final_loss():.4f} in {result.seconds:.0f}s")
    for p in problems:
        _log(f"pretrain FAILED: {p}")
    return EXIT_FAIL if problems else EXIT_OK


def cmd_personalize(args, cfg, out: Path) -> int:
    ds = harness.dataset(cfg)
    base = _base(args, cfg)
    try:
        result = harness.personalize(cfg, base, ds, args.seed)
    except TrainingAborted as exc:
        _log(f"personalize FAILED: {exc}")
        return EXIT_FAIL
    (out / "metrics.csv").write_text(records_csv(result.records))
    (out / "timing.csv").write_text(timing_csv(result.records))
    evals = "step,subject_fidelity,structure_score,prior_drift\n" + "".join(
        f"{i},{m['subject_fidelity']!r},{m['structure_score']!r},{m['prior_drift']!r}\n"
        for i, m in result.evaluations)
    (out / "evaluations.csv").write_text(evals)
    save_checkpoint(result.params, out / "personalized.ckpt")
    write_manifest(out, "personalize", cfg, args.seed,
                   ["metrics.csv", "evaluations.csv", "personalized.ckpt"],
                   {"train_config": config_dict(harness.train_config(cfg, args.seed)),
                    "branch_counts": result.branch_counts(), "run_peak_elements": result.peak_elements()})
    return EXIT_OK


def cmd_ablate(args, cfg, out: Path) -> int:
    ds = harness.dataset(cfg)
    base = _base(args, cfg)
    preset = cfg["ablate.preset"]
    seeds = cfg["ablate.seeds"] if args.seed_given is None else (args.seed_given,)
    rows = harness.run_preset(preset, cfg, base, ds, seeds=seeds, log=_log)
    name = f"ablate_{preset}.csv"
    (out / name).write_text(harness.rows_csv(rows))
    write_manifest(out, "ablate", cfg, args.seed, [name], {"seeds": list(seeds)})
    return EXIT_OK


def cmd_probe_scheduler(args, cfg, out: Path) -> int:
    i_max = cfg["probe.i_max"]
    sel = SelectorConfig(k=cfg["selector.k"], t_mid=cfg["selector.t_mid"], t_max=cfg["model.t_max"],
                         i_max=i_max)
    steps = np.unique(np.linspace(0, i_max, cfg["probe.i_points"]).round().astype(int))
    ts = range(0, cfg["model.t_max"] + 1, cfg["probe.t_stride"])
    body = "".join(f"{i},{t},{pt!r},{pd!r}\n" for i, t, pt, pd in probability_grid(sel, steps, ts))
    (out / "scheduler_grid.csv").write_text("i,t,p_tap,p_dtap\n" + body)
    write_manifest(out, "probe-scheduler", cfg, args.seed, ["scheduler_grid.csv"])
    return EXIT_OK


def cmd_mem_report(args, cfg, out: Path) -> int:
    archs = memory.benchmark_archs()
    archs["configured"] = memory.arch_spec(harness.model_config(cfg, lora=True), name="configured")
    (out / "memory_report.csv").write_text(memory.report_csv(memory.report(archs, cfg["mem.ratios"])))
    write_manifest(out, "mem-report", cfg, args.seed, ["memory_report.csv"])
    return EXIT_OK


def cmd_eval(args, cfg, out: Path) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    ds = harness.dataset(cfg)
    params = load_checkpoint(args.checkpoint)
    base = _base(args, cfg) if (args.base or cfg["pretrain.checkpoint"]) else None
    metrics = evaluate(params, harness.eval_spec(cfg, ds, base))
    (out / "eval.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "eval", cfg, args.seed, ["eval.json"], {"checkpoint": str(args.checkpoint)})
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the toy dataset"),
    "pretrain": (cmd_pretrain, "train the base denoiser on the prior classes"),
    "personalize": (cmd_personalize, "one personalization run"),
    "ablate": (cmd_ablate, "run an ablation preset over seeds"),
    "probe-scheduler": (cmd_probe_scheduler, "CSV of TAP/DTAP probabilities over (i, t)"),
    "mem-report": (cmd_mem_report, "predicted memory per method and resize ratio"),
    "eval": (cmd_eval, "evaluate a checkpoint"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybopt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="flat 'section.key = value' file")
        p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        if name in ("personalize", "ablate", "eval"):
            p.add_argument("--base", type=Path, default=None, help="base checkpoint")
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        cfg = cfgmod.load(args.config, overrides)
        args.seed_given = args.seed
        args.seed = 0 if args.seed is None else args.seed
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "config.txt").write_text(cfg.to_text())
        return COMMANDS[args.command][0](args, cfg, args.out)
    except (ConfigError, FileNotFoundError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except HybOptError as exc:
        _log(f"error: {exc}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
