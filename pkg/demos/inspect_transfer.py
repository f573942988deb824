"""Look inside a trained transfer path: task affinities and how far p_t strays from p_o.

    python demos/inspect_transfer.py
"""

import numpy as np

from ektm.config import Config
from ektm.data import gen_synthetic, split_chrono
from ektm.trainer import train
from ektm.transfer import KnowledgeSet, affinities

cfg = Config({
    "data.samples": 20000,
    "data.tasks": ["sequential", "parallel", "sequential"],
    "data.task_rates": [0.2, 0.05, 0.05],
    "data.rho": 0.8,
    "backbone.tower_hidden": [32, 16, 8],
    "train.epochs": 3,
    "train.lr": 2e-3,
})
tr, va, te = split_chrono(gen_synthetic(cfg.synthetic()))
model = train(cfg, tr, va).best_model()

batch = te.take(slice(0, 2000))
fwd = model.forward(batch)
ks = KnowledgeSet(fwd.f_ctr, fwd.f_cvr)
names = [s.name for s in model.specs]
for i, name in enumerate(names):
    others = [n for n in names if n != name]
    w = affinities(ks, i).data.mean(axis=0)
    print(f"{name}: mean affinity " + ", ".join(f"{o}={v:.3f}" for o, v in zip(others, w)))

for i, name in enumerate(names):
    gap = np.abs(fwd.p_t[i].data - fwd.p_o[i].data).mean()
    print(f"{name}: mean |p_transferred - p_original| = {gap:.4f}")
