"""Finite-difference verification of the composed training loss."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .config import Config
from .data import gen_synthetic
from .errors import NumericError
from .model import MultiTaskModel
from .transfer import cosine


def jittered_params(model: MultiTaskModel, rng, bias_jitter=0.1):
    """Model parameters with every bias offset by N(0, bias_jitter).

    Zero-initialised biases put the pre-activation of a unit exactly on the
    ReLU kink whenever its whole input is zero (a dead upstream layer), and
    finite differences straddling a kink report a half slope.
    """
    out = {}
    for path, p in model.params.items():
        v = p.data.copy()
        if bias_jitter and path.endswith((".b", ".b_f")):
            v = v + rng.normal(0.0, bias_jitter, v.shape)
        out[path] = v
    return out


def nonsmooth_reason(model: MultiTaskModel, batch):
    """Why the loss is not differentiable at the current parameters, or None.

    Three ties occur with small towers: a knowledge vector that is exactly
    zero (every unit of a tower's last layer dead) sits on the cosine
    singularity, equal similarities make the top-m selection ambiguous, and a
    transferred prediction identical to the original one puts the hinge
    exactly on its corner.
    """
    fwd = model.forward(batch)
    for name, f in [("ctr", fwd.f_ctr)] + [(s.name, f) for s, f in zip(model.specs, fwd.f_cvr)]:
        if np.any(np.all(f.data == 0.0, axis=1)):
            return f"zero knowledge vector ({name})"
    top_m, T = model.transfer.cfg.top_m, len(fwd.f_cvr)
    if model.transfer.cfg.mode != "none" and 0 < top_m < T - 1:
        for i in range(T):
            sims = np.stack([cosine(fwd.f_cvr[i], fwd.f_cvr[j]).data for j in range(T) if j != i], axis=1)
            ranked = -np.sort(-sims, axis=1)
            if np.any(ranked[:, top_m - 1] - ranked[:, top_m] <= 1e-9):
                return f"top-m tie ({model.specs[i].name})"
    if model.cfg["loss.aux_hinge"]:
        for spec, (l_o, l_t) in zip(model.specs, model.pair_losses(batch, fwd)):
            if l_t is not None and abs(l_t.item() - l_o.item()) <= 1e-9:
                return f"hinge tie ({spec.name})"
    return None


def loss_gradcheck(cfg: Config, seed=0, batch_size=4, bias_jitter=0.1, max_coords=None, eps=1e-5, redraws=50):
    """``[(param path, max relative error)]`` for the full training loss on one small batch.

    The batch is the first ``batch_size`` rows of a synthetic draw built from
    the ``data.*`` keys with ``data.seed`` replaced by ``seed``. The bias
    initialisation and jitter are redrawn (up to ``redraws`` times) while the
    point is non-smooth; NumericError if every draw is.
    """
    data_cfg = cfg.copy().update_from({"data.samples": max(64, batch_size), "data.seed": seed})
    batch = gen_synthetic(data_cfg.synthetic()).take(slice(0, batch_size))
    rng = np.random.default_rng([seed, 1])
    for attempt in range(redraws + 1):
        model = MultiTaskModel(cfg, batch.schema, seed + 100_003 * attempt)
        saved = dict(model.params)
        point = jittered_params(model, rng, bias_jitter)
        model.params.update({k: tn.Tensor(v) for k, v in point.items()})
        try:
            reason = nonsmooth_reason(model, batch)
        finally:
            model.params.update(saved)
        if reason is None:
            break
    else:
        raise NumericError(f"no smooth point found in {redraws + 1} draws: {reason}")
    keys = list(point)

    def total(*leaves):
        model.params.update(zip(keys, leaves))
        try:
            return model.loss(batch).total
        finally:
            model.params.update(saved)

    errs = tn.grad_check_report(total, [point[k] for k in keys], eps=eps, max_coords=max_coords, seed=seed)
    return list(zip(keys, errs))
