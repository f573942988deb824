"""Impression logs: schema, CSV ingestion, statistics, synthetic funnels, splits."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .errors import CalibrationError, ConfigError, IngestionError, SchemaError, UndefinedMetricError
from .objectives import BINARY, CONTINUOUS, PARALLEL, SEQUENTIAL, TaskSpec


@dataclass
class DatasetSchema:
    """Column layout. A vocabulary size of 0 means "infer from the data"."""

    categorical: list  # [(name, vocab)]
    dense: list  # [name]
    tasks: list  # [TaskSpec]; task name == label column
    click: str = "y"
    timestamp: str | None = "ts"

    def __post_init__(self):
        self.categorical = [(str(n), int(v)) for n, v in self.categorical]
        self.dense = [str(n) for n in self.dense]
        names = self.columns
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate column names in schema: {names}")
        if any(v < 0 for _, v in self.categorical):
            raise ConfigError("vocabulary sizes must be positive (0 = infer)")

    @property
    def columns(self):
        ts = [self.timestamp] if self.timestamp else []
        return ts + [n for n, _ in self.categorical] + list(self.dense) + [self.click] + [t.name for t in self.tasks]

    @property
    def vocab_sizes(self):
        return [v for _, v in self.categorical]


def standard_schema(n_cat, n_dense, tasks, vocab=0, timestamp=True) -> DatasetSchema:
    """``ts,cat_0..,num_0..,y,z_1..`` layout. ``tasks`` are (pattern, signal) pairs or TaskSpecs."""
    vocab = [vocab] * n_cat if isinstance(vocab, int) else list(vocab)
    specs = [t if isinstance(t, TaskSpec) else TaskSpec(f"z_{i + 1}", *t) for i, t in enumerate(tasks)]
    return DatasetSchema(
        categorical=[(f"cat_{j}", vocab[j]) for j in range(n_cat)],
        dense=[f"num_{j}" for j in range(n_dense)],
        tasks=specs,
        timestamp="ts" if timestamp else None,
    )


PRESETS = {
    # click + one post-click purchase task
    "aliexpress": lambda: standard_schema(16, 63, [(SEQUENTIAL, BINARY)]),
    # click + like + follow, both observable on any impression
    "kuaivideo": lambda: standard_schema(9, 0, [(PARALLEL, BINARY), (PARALLEL, BINARY)]),
}


def preset_schema(name) -> DatasetSchema:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class Dataset:
    schema: DatasetSchema
    cat: np.ndarray  # (n, C) int64
    num: np.ndarray  # (n, D) float64
    y: np.ndarray  # (n,) float64 in {0, 1}
    z: np.ndarray  # (n, T) float64
    ts: np.ndarray | None = None

    def __len__(self):
        return int(self.y.shape[0])

    def take(self, index) -> "Dataset":
        return Dataset(self.schema, self.cat[index], self.num[index], self.y[index], self.z[index],
                       None if self.ts is None else self.ts[index])

    def label(self, task_index):
        return self.z[:, task_index]

    def with_inferred_vocab(self) -> "Dataset":
        """Replace 0 vocabulary sizes by ``max index + 1``."""
        cats = []
        for j, (name, vocab) in enumerate(self.schema.categorical):
            if vocab == 0:
                vocab = int(self.cat[:, j].max()) + 1 if len(self) else 1
            cats.append((name, vocab))
        return replace(self, schema=replace(self.schema, categorical=cats))


# ---------------------------------------------------------------------------
# CSV

def _column(cells, name, parse, base_row):
    try:
        return parse(cells)
    except ValueError:
        pass
    for r, c in enumerate(cells):
        try:
            parse([c])
        except ValueError:
            raise IngestionError(f"cannot parse {c!r}", row=base_row + r, column=name) from None
    raise IngestionError("cannot parse column", column=name)


def _ints(cells):
    return np.array([int(c) for c in cells], dtype=np.int64)


def _floats(cells):
    out = np.array([float(c) for c in cells], dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite")
    return out


def _binary(cells):
    out = _ints(cells)
    if np.any((out != 0) & (out != 1)):
        raise ValueError("label not in {0,1}")
    return out.astype(np.float64)


def parse_csv(text: str, schema: DatasetSchema) -> Dataset:
    """Parse CSV text. Data rows are numbered from 1 in error messages."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise IngestionError("missing header row")
    header = lines[0].rstrip("\r").split(",")
    where = {name: k for k, name in enumerate(header)}
    for name in schema.columns:
        if name not in where:
            raise IngestionError("missing column", column=name)
    rows = [ln.rstrip("\r").split(",") for ln in lines[1:]]
    for r, cells in enumerate(rows, start=1):
        if len(cells) != len(header):
            raise IngestionError(f"expected {len(header)} cells, got {len(cells)}", row=r)
    n = len(rows)

    def col(name, parse):
        k = where[name]
        return _column([cells[k] for cells in rows], name, parse, 1)

    cat = np.zeros((n, len(schema.categorical)), dtype=np.int64)
    for j, (name, vocab) in enumerate(schema.categorical):
        cat[:, j] = col(name, _ints)
        bad = np.flatnonzero((cat[:, j] < 0) | ((cat[:, j] >= vocab) if vocab else False))
        if bad.size:
            raise IngestionError(f"index {cat[bad[0], j]} outside vocabulary {vocab or 'range'}",
                                 row=int(bad[0]) + 1, column=name)
    num = np.zeros((n, len(schema.dense)))
    for j, name in enumerate(schema.dense):
        num[:, j] = col(name, _floats)
    y = col(schema.click, _binary)
    z = np.zeros((n, len(schema.tasks)))
    for t, spec in enumerate(schema.tasks):
        z[:, t] = col(spec.name, _binary if spec.signal == BINARY else _floats)
    ts = col(schema.timestamp, _ints) if schema.timestamp else None
    ds = Dataset(schema, cat, num, y, z, ts)
    check_funnel(ds)
    return ds


def check_funnel(ds: Dataset):
    """Raise at the first row where a sequential conversion has no click."""
    for t, spec in enumerate(ds.schema.tasks):
        if spec.pattern != SEQUENTIAL:
            continue
        bad = np.flatnonzero(ds.z[:, t] > ds.y)
        if bad.size:
            raise IngestionError("funnel violation: conversion without click", row=int(bad[0]) + 1, column=spec.name)


def load_csv(path, schema: DatasetSchema) -> Dataset:
    return parse_csv(Path(path).read_text(encoding="utf-8"), schema)


def _fmt_float(x):
    return repr(float(x))


def dumps_csv(ds: Dataset) -> str:
    s = ds.schema
    cols = []
    if s.timestamp:
        cols.append([str(int(v)) for v in ds.ts])
    cols += [[str(int(v)) for v in ds.cat[:, j]] for j in range(ds.cat.shape[1])]
    cols += [[_fmt_float(v) for v in ds.num[:, j]] for j in range(ds.num.shape[1])]
    cols.append([str(int(v)) for v in ds.y])
    for t, spec in enumerate(s.tasks):
        fmt = (lambda v: str(int(v))) if spec.signal == BINARY else _fmt_float
        cols.append([fmt(v) for v in ds.z[:, t]])
    buf = io.StringIO()
    buf.write(",".join(s.columns) + "\n")
    for row in zip(*cols):
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def save_csv(ds: Dataset, path):
    Path(path).write_bytes(dumps_csv(ds).encode("utf-8"))


# ---------------------------------------------------------------------------
# statistics

def stats(ds: Dataset):
    """Rate table as ``[(task, metric, value)]``; ``None`` marks an undefined rate."""
    if len(ds) == 0:
        raise UndefinedMetricError("statistics of an empty dataset are undefined")
    rows = [("all", "samples", len(ds)), (ds.schema.click, "ctr", float(ds.y.mean()))]
    clicked = ds.y == 1
    for t, spec in enumerate(ds.schema.tasks):
        z = ds.z[:, t]
        if spec.pattern == SEQUENTIAL:
            cvr = float(z[clicked].mean()) if clicked.any() else None
            rows.append((spec.name, "cvr", cvr))
            rows.append((spec.name, "ctcvr", float((ds.y * z).mean())))
        else:
            rows.append((spec.name, "rate", float(z.mean())))
    return rows


def stats_tsv(rows) -> str:
    from .metrics import format_value

    return "".join(f"{task}\t{metric}\t{format_value(v)}\n" for task, metric, v in rows)


# ---------------------------------------------------------------------------
# synthetic funnels

@dataclass
class SyntheticConfig:
    """Latent-factor logistic funnel.

    ``task_rates`` are post-click conversion rates for sequential tasks, the
    positive rate for parallel binary tasks and the mean level for
    continuous tasks.
    """

    samples: int = 10000
    rank: int = 8
    tasks: list = field(default_factory=lambda: [(SEQUENTIAL, BINARY)])
    rho: float = 0.5
    click_rate: float = 0.1
    task_rates: list = field(default_factory=lambda: [0.05])
    n_users: int = 1000
    n_items: int = 1000
    feature_noise: float = 0.5
    label_noise: float = 1.0
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"data.rho must lie in [0, 1], got {self.rho}")
        if not 0.0 < self.click_rate < 1.0:
            raise ConfigError("data.click_rate must lie in (0, 1)")
        if len(self.task_rates) != len(self.tasks):
            raise ConfigError("data.task_rates needs one entry per task")
        for (pattern, signal), rate in zip(self.tasks, self.task_rates):
            TaskSpec("check", pattern, signal)
            if signal == BINARY and not 0.0 < rate < 1.0:
                raise ConfigError(f"binary task rate {rate} outside (0, 1)")
        if self.samples < 1 or self.rank < 1 or self.n_users < 1 or self.n_items < 1:
            raise ConfigError("data.samples, data.rank, data.n_users and data.n_items must be positive")
        if len(self.tasks) + 1 > self.rank:
            raise ConfigError("data.rank must exceed the number of tasks")

    def schema(self) -> DatasetSchema:
        return standard_schema(2, 3 * self.rank, self.tasks, vocab=[self.n_users, self.n_items])


def task_directions(rank, n_tasks, rho, rng):
    """Unit directions with pairwise cosine exactly ``rho``.

    A shared direction and one private direction per task are taken from an
    orthonormal basis; each task mixes them as sqrt(rho) : sqrt(1 - rho).
    """
    basis, _ = np.linalg.qr(rng.standard_normal((rank, n_tasks + 1)))
    shared, private = basis[:, 0], basis[:, 1:]
    return np.sqrt(rho) * shared[None, :] + np.sqrt(1.0 - rho) * private.T


def calibrate_intercept(logits, target, bound=60.0):
    """``b`` with ``mean(sigmoid(b + logits)) == target``, searched in [-bound, bound]."""
    try:
        return brentq(lambda c: expit(c + logits).mean() - target, -bound, bound, xtol=1e-12)
    except ValueError:
        raise CalibrationError(f"base rate {target} unreachable with an intercept in [-{bound}, {bound}]") from None


def gen_synthetic(cfg: SyntheticConfig) -> Dataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    r, n = cfg.rank, cfg.samples
    users = rng.standard_normal((cfg.n_users, r))
    items = rng.standard_normal((cfg.n_items, r))
    directions = task_directions(r, len(cfg.tasks), cfg.rho, rng)

    uid = rng.integers(0, cfg.n_users, size=n)
    iid = rng.integers(0, cfg.n_items, size=n)
    u, v = users[uid], items[iid]
    u_obs = u + cfg.feature_noise * rng.standard_normal((n, r))
    v_obs = v + cfg.feature_noise * rng.standard_normal((n, r))
    num = np.concatenate([u_obs, v_obs, u_obs * v_obs], axis=1)
    inter = u * v

    click_logit = (u * v).sum(axis=1) + cfg.label_noise * rng.standard_normal(n)
    a0 = calibrate_intercept(click_logit, cfg.click_rate)
    y = (rng.random(n) < expit(a0 + click_logit)).astype(np.float64)

    z = np.zeros((n, len(cfg.tasks)))
    for t, ((pattern, signal), rate) in enumerate(zip(cfg.tasks, cfg.task_rates)):
        logit = inter @ directions[t] + cfg.label_noise * rng.standard_normal(n)
        draw = rng.random(n)
        if signal == CONTINUOUS:
            z[:, t] = rate + logit
            continue
        pool = logit[y == 1] if pattern == SEQUENTIAL else logit
        if pool.size == 0:
            raise CalibrationError("no clicks to calibrate a sequential task against")
        b = calibrate_intercept(pool, rate)
        z[:, t] = (draw < expit(b + logit)).astype(np.float64)
        if pattern == SEQUENTIAL:
            z[:, t] *= y
    cat = np.stack([uid, iid], axis=1).astype(np.int64)
    return Dataset(cfg.schema(), cat, num, y, z, np.arange(n, dtype=np.int64))


# ---------------------------------------------------------------------------
# splitting and batching

def split_chrono(ds: Dataset, fractions=(0.8, 0.1, 0.1)):
    """Contiguous train/valid/test slices in time order; the remainder goes to train."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(ds)
    n_valid = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    n_train = n - n_valid - n_test
    if min(n_train, n_valid, n_test) < 1:
        raise ConfigError(f"split too small: {n} rows give {n_train}/{n_valid}/{n_test}")
    order = np.arange(n) if ds.ts is None else np.argsort(ds.ts, kind="stable")
    ordered = ds.take(order)
    return (ordered.take(slice(0, n_train)),
            ordered.take(slice(n_train, n_train + n_valid)),
            ordered.take(slice(n_train + n_valid, n)))


def batches(ds: Dataset, size, seed=0, shuffle=True):
    """List of batches; the last one may be partial."""
    if size < 1:
        raise ConfigError("batch size must be >= 1")
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    return [ds.take(order[k:k + size]) for k in range(0, n, size)]


def require_labels(ds: Dataset, schema: DatasetSchema):
    if [t.name for t in ds.schema.tasks] != [t.name for t in schema.tasks]:
        raise SchemaError(f"dataset tasks {[t.name for t in ds.schema.tasks]} "
                          f"do not match model tasks {[t.name for t in schema.tasks]}")
