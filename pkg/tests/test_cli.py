import csv
import json
from pathlib import Path

import numpy as np
import pytest

from hybopt import cli, config as cf, harness
from hybopt import diffusion as dm
from hybopt.params import save_checkpoint

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = """
data.per_class = 2
data.n_templates = 2
model.channels = 4
train.i_max = 6
zo.num_perturbations = 1
eval.n_samples = 1
eval.steps = 2
eval.prior_samples = 1
selector.mode = UNIFORM_RANDOM
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    base = tmp_path / "base.ckpt"
    save_checkpoint(dm.init_params(harness.model_config(cf.load(path)), 0), base)
    return path, base


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_probe_scheduler_half_way_column(tmp_path):
    assert cli.main(["probe-scheduler", "--config", str(CONFIGS / "fig2.cfg"), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "scheduler_grid.csv")
    half = [r for r in rows if r["i"] == "500"]
    assert len(half) == 1001
    assert all(r["p_tap"] == r["p_dtap"] for r in half)
    first = [r for r in rows if r["i"] == "0" and r["t"] == "1000"][0]
    assert float(first["p_dtap"]) == 0.5


def test_manifest_records_hash_and_version(tmp_path):
    cli.main(["probe-scheduler", "--out", str(tmp_path), "--seed", "3"])
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["seed"] == 3 and m["command"] == "probe-scheduler"
    assert m["config_hash"] == cf.defaults().digest()
    assert m["code_version"].startswith("0.1.0")
    assert set(m["outputs"]) == {"scheduler_grid.csv"}


def test_mem_report(tmp_path):
    assert cli.main(["mem-report", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "memory_report.csv")
    assert {r["arch"] for r in rows} >= {"tiny-lora", "configured"}
    for r in rows:
        peak = float(r["peak_mib"])
        if r["method"] == "BP-high":
            assert peak == float(r["bp_mib"])
        else:
            assert peak == max(float(r["bp_mib"]), float(r["zo_mib"]))


def test_gen_data_is_reproducible(tmp_path, tiny):
    cfg, _ = tiny
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    assert (a / "dataset.npz").read_bytes() == (b / "dataset.npz").read_bytes()


def test_personalize_twice_is_byte_identical(tmp_path, tiny):
    cfg, base = tiny
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        argv = ["personalize", "--config", str(cfg), "--base", str(base), "--seed", "7", "--out", str(out)]
        assert cli.main(argv) == 0
    for name in ("metrics.csv", "personalized.ckpt", "evaluations.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    rows = read_csv(outs[0] / "metrics.csv")
    assert len(rows) == 6
    m = json.loads((outs[0] / "manifest.json").read_text())
    assert sum(m["branch_counts"].values()) == 6


def test_eval_reports_metrics(tmp_path, tiny, capsys):
    cfg, base = tiny
    assert cli.main(["eval", "--config", str(cfg), "--base", str(base), "--checkpoint", str(base),
                     "--out", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "eval.json").read_text())
    assert metrics["prior_drift"] == 0.0


def test_unknown_key_is_a_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("selector.kk = 0.1\n")
    assert cli.main(["probe-scheduler", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "selector.k" in capsys.readouterr().err


def test_missing_checkpoint_is_an_error(tmp_path, tiny):
    cfg, _ = tiny
    code = cli.main(["personalize", "--config", str(cfg), "--base", str(tmp_path / "nope.ckpt"),
                     "--out", str(tmp_path / "o")])
    assert code != 0
    assert cli.main(["personalize", "--config", str(cfg), "--out", str(tmp_path / "p")]) != 0


def test_set_overrides(tmp_path):
    assert cli.main(["probe-scheduler", "--set", "probe.i_points=3", "--set", "probe.t_stride=500",
                     "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "scheduler_grid.csv")
    assert [(r["i"], r["t"]) for r in rows][:3] == [("0", "0"), ("0", "500"), ("0", "1000")]
    assert len(rows) == 9
    assert cli.main(["probe-scheduler", "--set", "probe.nope=3", "--out", str(tmp_path)]) == 2


def test_pretrain_failure_exits_nonzero(tmp_path):
    cfg = tmp_path / "p.cfg"
    cfg.write_text("data.per_class = 2\ndata.n_templates = 1\nmodel.channels = 4\npretrain.steps = 3\n"
                   "pretrain.warmup = 1\neval.steps = 2\neval.prior_samples = 1\n")
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["problems"]
    assert (tmp_path / "o" / "base.ckpt").exists()


def test_shipped_configs_parse():
    for path in CONFIGS.glob("*.cfg"):
        cf.load(path)
