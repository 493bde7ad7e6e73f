"""Predicted memory per method, like a results table.

BP stores activations for the backward pass, and those scale with pixel
count, so halving the side length quarters them. ZO stores none. The hybrid's
peak is whichever branch is larger.
"""
from hybopt import memory

rows = memory.report(memory.benchmark_archs())
print(f"{'arch':<11}{'method':<16}{'res':>4}{'BP MiB':>9}{'ZO MiB':>9}{'peak':>9}")
for r in rows:
    zo = "" if r["zo_mib"] is None else f"{r['zo_mib']:.3f}"
    print(f"{r['arch']:<11}{r['method']:<16}{r['bp_resolution']:>4}{r['bp_mib']:9.3f}{zo:>9}{r['peak_mib']:9.3f}")
