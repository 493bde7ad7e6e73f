"""A short personalization run, end to end.

Needs a base checkpoint (``hybopt pretrain --out runs/base`` takes about ten
minutes). Runs BP-high and DTAP from the same seed and compares the
toy metrics and predicted peak memory.

    python3 demos/personalize_toy.py runs/base/base.ckpt
"""
import sys

from hybopt import config, harness
from hybopt.params import load_checkpoint

base = load_checkpoint(sys.argv[1])
cfg = config.load(None, {"train.i_max": "200"})
ds = harness.dataset(cfg)
spec = harness.eval_spec(cfg, ds, base)

for method in ("BP-high", "DTAP"):
    run_cfg = harness.method_config(cfg, method)
    res = harness.personalize(run_cfg, base, ds, seed=0, spec=spec)
    m = res.evaluations[-1][1]
    print(f"{method:8s} fidelity {m['subject_fidelity']:.4f}  structure {m['structure_score']:.4f}  "
          f"drift {m['prior_drift']:.4f}  steps {res.branch_counts()}  "
          f"peak {harness.predicted_peak_mib(run_cfg, method):.3f} MiB")
