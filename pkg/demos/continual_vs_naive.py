"""Train on a five-domain stream and compare against plain sequential fine-tuning.

    python3 demos/continual_vs_naive.py [seed]
"""

import sys

import numpy as np

from mira import TrainConfig, make_stream, run_mira, run_naive

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = TrainConfig.desk(seed=seed)

state, report = run_mira(make_stream(cfg), cfg,
                         on_step=lambda kind, t, s: print(f"  {kind:<11} task {t}"))
naive = run_naive(make_stream(cfg), cfg)

np.set_printoptions(precision=2, suppress=True)
print("\naccuracy matrix (row = after task i, column = task j)")
print(report.accuracy)
print(f"\n{'':>8}{'avg acc':>10}{'forgetting':>12}")
print(f"{'memory':>8}{report.avg_acc:>10.3f}{report.forgetting:>12.3f}")
print(f"{'naive':>8}{naive.avg_acc:>10.3f}{naive.forgetting:>12.3f}")
print(f"\nadapters stored per layer: {[m.count for m in state.memories]}")
