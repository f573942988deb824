"""Five-variant ablation on a small synthetic draw (mean test AUC over seeds).

    python demos/small_ablation.py [seeds]
"""

import sys

from ektm.config import Config
from ektm.data import gen_synthetic, split_chrono
from ektm.trainer import run_ablation

seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 2
cfg = Config({
    "data.samples": 20000,
    "data.tasks": ["sequential", "parallel", "sequential"],
    "data.task_rates": [0.2, 0.05, 0.03],
    "data.rho": 0.8,
    "backbone.tower_hidden": [32, 16, 8],
    "train.epochs": 3,
    "train.lr": 2e-3,
})
tr, va, te = split_chrono(gen_synthetic(cfg.synthetic()))
print(run_ablation(cfg, tr, va, te, seed_count=seeds).to_tsv())
