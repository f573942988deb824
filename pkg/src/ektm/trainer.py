"""Training loop, Adam, early stopping, grid search and ablations."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .config import Config
from .data import Dataset, batches, require_labels
from .errors import ConfigError, ContractError, NumericError, SchemaError
from .metrics import EvalReport, TaskMetrics, format_value, score_binary
from .model import CTR, MultiTaskModel, served_scores
from .objectives import BINARY, SEQUENTIAL, bce, ctcvr_bce, mse

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_init(params: dict) -> AdamState:
    return AdamState({k: np.zeros_like(p.data) for k, p in params.items()},
                     {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr, wd=0.0) -> AdamState:
    """One bias-corrected Adam update, in place. ``wd * theta`` is added to the gradient first."""
    state.step += 1
    c1 = 1.0 - BETA1 ** state.step
    c2 = 1.0 - BETA2 ** state.step
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.data.shape or state.m[key].shape != p.data.shape:
            raise ContractError(f"{key}: gradient {g.shape} / moment {state.m[key].shape} vs parameter {p.data.shape}")
        if wd:
            g = g + wd * p.data
        m = state.m[key]
        v = state.v[key]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly lower loss."""

    def __init__(self, patience):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = None
        self.bad = 0

    def update(self, epoch, loss) -> bool:
        """Record an epoch; returns True when training should stop."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad = loss, epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


# ---------------------------------------------------------------------------
# evaluation

def evaluate_split(model: MultiTaskModel, ds: Dataset, serve=None, strict_ties=None) -> EvalReport:
    """Per-task AUC/LogLoss. Sequential tasks are scored on the CTCVR product."""
    require_labels(ds, model.schema)
    cfg = model.cfg
    serve = cfg["eval.serve"] if serve is None else serve
    strict = cfg["metrics.strict_ties"] if strict_ties is None else strict_ties
    with tn.no_grad():
        preds = model.predict(ds, cfg["eval.batch"])
    report = EvalReport([score_binary(CTR, preds[CTR], ds.y, "original", strict)])
    for i, spec in enumerate(model.specs):
        paths = [serve]
        if preds[spec.name][1] is not None:
            paths.append("transferred" if serve == "original" else "original")
        for k, path in enumerate(paths):
            name = spec.name if k == 0 else f"{spec.name}@{path}"
            scores = served_scores(model, preds, i, path)
            if spec.signal == BINARY:
                labels = ds.y * ds.z[:, i] if spec.pattern == SEQUENTIAL else ds.z[:, i]
                report.tasks.append(score_binary(name, scores, labels, path, strict))
            else:
                err = float(np.mean((scores - ds.z[:, i]) ** 2)) if len(ds) else None
                report.tasks.append(TaskMetrics(name, None, None, 0, 0, path, mse=err))
    return report


def served_loss(model: MultiTaskModel, ds: Dataset) -> float:
    """``L_ctr + sum_i L_o`` over a whole split (original path only)."""
    with tn.no_grad():
        preds = model.predict(ds, model.cfg["eval.batch"])
    total = bce(preds[CTR], ds.y).item()
    for i, spec in enumerate(model.specs):
        p_o = preds[spec.name][0]
        if spec.pattern == SEQUENTIAL:
            total += ctcvr_bce(preds[CTR], p_o, ds.y, ds.z[:, i]).item()
        elif spec.signal == BINARY:
            total += bce(p_o, ds.z[:, i]).item()
        else:
            total += mse(p_o, ds.z[:, i]).item()
    return total


# ---------------------------------------------------------------------------
# training

@dataclass
class EpochRecord:
    epoch: int
    train: dict
    valid_loss: float
    valid_auc: dict
    hinge_active: list


@dataclass
class RunHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    wall_time: float = 0.0

    @property
    def best_valid_loss(self):
        return min(e.valid_loss for e in self.epochs)

    def rows(self):
        for e in self.epochs:
            for k, v in e.train.items():
                yield e.epoch, "train", k, v
            for t, frac in e.hinge_active:
                yield e.epoch, "train", f"hinge_active.{t}", frac
            yield e.epoch, "valid", "loss", e.valid_loss
            for t, a in e.valid_auc.items():
                yield e.epoch, "valid", f"auc.{t}", a
        yield self.best_epoch, "valid", "best_epoch", self.best_epoch

    def to_tsv(self) -> str:
        return "".join(f"{ep}\t{split}\t{metric}\t{format_value(v)}\n" for ep, split, metric, v in self.rows())


@dataclass
class TrainResult:
    model: MultiTaskModel
    best_state: dict
    history: RunHistory

    def best_model(self) -> MultiTaskModel:
        self.model.load_state(self.best_state)
        return self.model


def train(cfg: Config, train_ds: Dataset, valid_ds: Dataset, seed=None, on_step=None) -> TrainResult:
    """Fit a model; returns it with the best-validation-epoch parameters and history.

    ``on_step(step, report, grads)`` is called after each backward pass.
    """
    cfg.validate(frozen_ok=True)
    try:
        require_labels(valid_ds, train_ds.schema)
    except SchemaError as exc:
        raise ConfigError(str(exc)) from None
    seed = cfg["train.seed"] if seed is None else seed
    model = MultiTaskModel(cfg, train_ds.schema, seed)
    keys = list(model.params)
    leaves = [model.params[k] for k in keys]
    state = adam_init(model.params)
    stopper = EarlyStopping(cfg["train.patience"])
    history = RunHistory()
    best_state = {k: v.copy() for k, v in model.state().items()}
    started = time.perf_counter()
    step = 0
    n_tasks = len(model.specs)

    for epoch in range(1, cfg["train.epochs"] + 1):
        sums = {"l_ctr": 0.0, "total": 0.0}
        for name in ("l_o", "l_t", "hinge"):
            for s in model.specs:
                sums[f"{name}.{s.name}"] = 0.0
        active = np.zeros(n_tasks)
        n_seen, n_steps = 0, 0
        for batch in batches(train_ds, cfg["train.batch"], seed=[seed, epoch], shuffle=True):
            try:
                report = model.loss(batch)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {step + 1}: non-finite loss", term=exc.term) from None
            grads = tn.backward(report.total, leaves)
            if on_step is not None:
                on_step(step, report, grads)
            adam_step(model.params, {k: grads[p] for k, p in zip(keys, leaves)}, state,
                      cfg["train.lr"], cfg["train.wd"])
            step += 1
            n_steps += 1
            w = len(batch)
            n_seen += w
            sums["l_ctr"] += w * report.l_ctr
            sums["total"] += w * report.total_value
            for i, s in enumerate(model.specs):
                sums[f"l_o.{s.name}"] += w * report.l_o[i]
                if report.l_t[i] is not None:
                    sums[f"l_t.{s.name}"] += w * report.l_t[i]
                    sums[f"hinge.{s.name}"] += w * report.hinge[i]
                    active[i] += report.hinge[i] > 0
        train_means = {k: v / n_seen for k, v in sums.items()}
        if model.transfer.cfg.mode == "none":
            train_means = {k: v for k, v in train_means.items() if not k.startswith(("l_t.", "hinge."))}
        valid_loss = served_loss(model, valid_ds)
        if not np.isfinite(valid_loss):
            raise NumericError(f"epoch {epoch}: non-finite validation loss", term="valid")
        report = evaluate_split(model, valid_ds)
        aucs = {t.task: t.auc for t in report.tasks if "@" not in t.task}
        hinge_active = [(s.name, active[i] / n_steps) for i, s in enumerate(model.specs)
                        if model.transfer.cfg.mode != "none"]
        history.epochs.append(EpochRecord(epoch, train_means, valid_loss, aucs, hinge_active))
        log.info("epoch %d train %.6f valid %.6f", epoch, train_means["total"], valid_loss)
        improved_before = stopper.best
        stop = stopper.update(epoch, valid_loss)
        if valid_loss < improved_before:
            best_state = {k: v.copy() for k, v in model.state().items()}
        if stop:
            break
    history.best_epoch = stopper.best_epoch
    history.wall_time = time.perf_counter() - started
    model.load_state(best_state)
    return TrainResult(model, best_state, history)


# ---------------------------------------------------------------------------
# grid search

@dataclass
class GridRow:
    alpha: float
    heads: int
    mean_auc: float
    valid_loss: float


def select_best(rows):
    """Highest mean validation AUC; then lower validation loss; then fewer heads."""
    if not rows:
        raise ConfigError("empty grid")
    return min(rows, key=lambda r: (-(r.mean_auc if r.mean_auc is not None else -np.inf), r.valid_loss, r.heads))


def _mean_cvr_auc(model, history):
    best = next(e for e in history.epochs if e.epoch == history.best_epoch)
    vals = [best.valid_auc[s.name] for s in model.specs if best.valid_auc.get(s.name) is not None]
    return float(np.mean(vals)) if vals else None


def grid_search(base: Config, alphas, head_counts, train_ds, valid_ds, train_fn=train):
    """Train every (alpha, heads) pair; returns ``(best_config, rows)``."""
    alphas, head_counts = list(alphas), list(head_counts)
    if not alphas or not head_counts:
        raise ConfigError("grid search needs nonempty alpha and head grids")
    rows = []
    for a in alphas:
        for h in head_counts:
            cfg = base.with_(loss__alpha=a, transfer__heads=h)
            res = train_fn(cfg, train_ds, valid_ds)
            rows.append(GridRow(float(a), int(h), _mean_cvr_auc(res.model, res.history), res.history.best_valid_loss))
    best = select_best(rows)
    return base.with_(loss__alpha=best.alpha, transfer__heads=best.heads), rows


def grid_tsv(rows) -> str:
    out = "alpha\theads\tmean_valid_auc\tvalid_loss\n"
    return out + "".join(f"{format_value(r.alpha)}\t{r.heads}\t{format_value(r.mean_auc)}\t{format_value(r.valid_loss)}\n"
                         for r in rows)


# ---------------------------------------------------------------------------
# ablation

ABLATIONS = [
    ("backbone", {"transfer.mode": "none"}),
    ("with linear", {"transfer.mode": "linear", "loss.aux_hinge": False}),
    ("with transmitter", {"transfer.mode": "transmitter", "loss.aux_hinge": False}),
    ("with linear+aux_loss", {"transfer.mode": "linear", "loss.aux_hinge": True}),
    ("EKTM", {"transfer.mode": "transmitter", "loss.aux_hinge": True}),
]


@dataclass
class AblationTable:
    tasks: list
    rows: list  # [(variant, {task: mean test auc}, [per-seed dicts])]

    def mean(self, variant, task):
        for name, means, _ in self.rows:
            if name == variant:
                return means[task]
        raise KeyError(variant)

    def to_tsv(self) -> str:
        out = "variant\t" + "\t".join(self.tasks) + "\n"
        for name, means, _ in self.rows:
            out += name + "\t" + "\t".join(format_value(means[t]) for t in self.tasks) + "\n"
        return out


def _ablation_job(args):
    name, cfg, seed, train_ds, valid_ds, test_ds = args
    res = train(cfg, train_ds, valid_ds, seed=seed)
    rep = evaluate_split(res.model, test_ds)
    return name, seed, {t.task: t.auc for t in rep.tasks if "@" not in t.task}


def run_ablation(base: Config, train_ds, valid_ds, test_ds, seed_count=1, variants=None, workers=1):
    """Seed-averaged test AUC per task for each ablation variant, in table order."""
    if seed_count < 1:
        raise ConfigError("seed_count must be >= 1")
    chosen = [(n, o) for n, o in ABLATIONS if variants is None or n in variants]
    seeds = [base["train.seed"] + s for s in range(seed_count)]
    jobs = [(name, base.copy().update_from(over), seed, train_ds, valid_ds, test_ds)
            for name, over in chosen for seed in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]
    tasks = [CTR] + [t.name for t in train_ds.schema.tasks]
    rows = []
    for name, _ in chosen:
        per_seed = [r for n, _, r in results if n == name]
        means = {}
        for t in tasks:
            vals = [r[t] for r in per_seed if r.get(t) is not None]
            means[t] = float(np.mean(vals)) if vals else None
        rows.append((name, means, per_seed))
    return AblationTable(tasks, rows)
