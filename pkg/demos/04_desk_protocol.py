"""Two synthetic tasks in sequence, with and without head harmonization.

Takes about two minutes on one CPU core. Pass ``--quick`` for a tiny version.
"""
import sys
from dataclasses import replace

from artifact import harness

quick = "--quick" in sys.argv
specs = harness.desk_tasks(seed=0, n_train=16 if quick else 200, n_test=8 if quick else 100)
cfg = replace(harness.DESK_TRAIN, epochs=2, n_warmup=1) if quick else harness.DESK_TRAIN

for name, abl in (("full", harness.Ablations()), ("no-adh", harness.Ablations(adh=False))):
    res = harness.run_protocol(specs, cfg, abl, seed=0)
    print(f"[{name}]")
    for (s, e), v in sorted(res.auc.items()):
        print(f"  after task {s}, eval task {e}: AUC {v:.4f}")
    print("  averages:", {k: round(v, 4) for k, v in res.averages().items()})
