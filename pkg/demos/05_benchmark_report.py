"""
Config-driven sweep and report
==============================

Runs a shrunken version of the default benchmark (3 seeds instead of 30)
through the experiment harness and walks the artifacts it writes: the
resolved config, the per-seed metric samples, the aggregate report with
Welch comparisons, and the per-seed training traces with the beta curves.
"""

import json
import tempfile
from pathlib import Path

from fedfusion.harness import config_from_dict, config_run_id, run_experiment

out_root = Path(tempfile.mkdtemp())
cfg = config_from_dict({
    "seeds": [0, 1, 2],
    "data": {"kind": "synthetic", "n_small": 600, "n_large": 2400},
    "fed": {"rounds": 3},
    "fusion": {"epochs": 8},
    "out_dir": str(out_root),
})
print("run id:", config_run_id(cfg))

report, out = run_experiment(cfg, log=print)

print("\nmethod x client means over", len(report.seeds), "seeds")
for (method, client), vals in sorted(report.aggregates.items()):
    print(f"  {method:>11s} {client:<6s} auroc {vals['auroc_mean']:.4f} ± {vals['auroc_sd']:.4f}"
          f"   auprc {vals['auprc_mean']:.4f} ± {vals['auprc_sd']:.4f}")

print("\nfused vs baselines (Welch two-sided)")
for (client, baseline, metric), vals in sorted(report.comparisons.items()):
    if metric != "auroc":
        continue
    print(f"  {client:<6s} vs {baseline:<11s} t = {vals['t']:+.3f}  p = {vals['p']:.3g}")

print("\nartifacts:")
for path in sorted(out.rglob("*")):
    if path.is_file():
        print("  ", path.relative_to(out_root))

trace = json.loads((out / "traces" / "seed_0.json").read_text())
betas = [round(e["beta"], 4) for e in trace["fusion"]["small"]]
print("\nsmall-client beta curve, seed 0:", betas)
