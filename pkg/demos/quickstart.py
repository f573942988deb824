"""Generate a synthetic funnel, train the transfer model, and report test metrics.

    python demos/quickstart.py
"""

from ektm.config import Config
from ektm.data import gen_synthetic, split_chrono, stats, stats_tsv
from ektm.trainer import evaluate_split, train

cfg = Config({
    "data.samples": 20000,
    "data.tasks": ["sequential", "parallel"],
    "data.task_rates": [0.1, 0.05],
    "data.rho": 0.8,
    "backbone.tower_hidden": [32, 16, 8],
    "train.epochs": 5,
    "train.lr": 2e-3,
})

ds = gen_synthetic(cfg.synthetic())
print(stats_tsv(stats(ds)))
tr, va, te = split_chrono(ds)

res = train(cfg, tr, va)
print(f"best epoch {res.history.best_epoch}, valid loss {res.history.best_valid_loss:.4f}")
print(evaluate_split(res.best_model(), te).to_tsv())
