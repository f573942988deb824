"""Backbone + transfer modules wired into one multi-task model."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .backbone import PROBABILITY, Backbone, glorot, zeros
from .config import Config
from .data import Dataset, DatasetSchema
from .errors import ShapeError
from .objectives import SEQUENTIAL, TaskSpec, bce, task_pair_losses, total_loss
from .tensor import Tensor
from .transfer import KnowledgeSet, Transfer

CTR = "ctr"


@dataclass
class Forward:
    p_ctr: Tensor
    f_ctr: Tensor
    f_cvr: list
    p_o: list
    p_t: list  # entries are None without a transfer path
    transferred: list


class MultiTaskModel:
    """CTR tower plus one tower per CVR task, with optional knowledge transfer."""

    def __init__(self, cfg: Config, schema: DatasetSchema, seed=None):
        self.cfg = cfg
        self.schema = schema
        self.specs = list(schema.tasks)
        seed = cfg["train.seed"] if seed is None else seed
        self.seed = seed
        if any(v < 1 for v in schema.vocab_sizes):
            raise ShapeError("schema vocabularies must be resolved before building a model")
        self.params = {}
        tasks = [(CTR, PROBABILITY)] + [(s.name, s.output_kind) for s in self.specs]
        self.backbone = Backbone(cfg.backbone(), schema.categorical, len(schema.dense), tasks, seed, self.params)
        tcfg = cfg.transfer()
        self.transfer = Transfer(tcfg, self.backbone.cfg.knowledge_dim, [s.name for s in self.specs], seed, self.params)
        if tcfg.mode != "none" and tcfg.injection == "tower_first_layer":
            d, width = self.backbone.cfg.knowledge_dim, self.backbone.bottom_width
            for s in self.specs:
                base = f"transfer.{s.name}.adapter"
                self.params[f"{base}.w"] = glorot(seed, f"{base}.w", d, width)
                self.params[f"{base}.b"] = zeros(f"{base}.b", (width,))

    @property
    def knowledge_dim(self):
        return self.backbone.cfg.knowledge_dim

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def expected_param_count(self) -> int:
        n = self.backbone.expected_param_count() + self.transfer.expected_param_count()
        tcfg = self.transfer.cfg
        if tcfg.mode != "none" and tcfg.injection == "tower_first_layer":
            n += len(self.specs) * (self.knowledge_dim + 1) * self.backbone.bottom_width
        return n

    def backbone_params(self):
        return {k: v for k, v in self.params.items() if not k.startswith("transfer.")}

    def transfer_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("transfer.")}

    # ------------------------------------------------------------------
    def _transferred_prediction(self, task, g):
        if self.transfer.cfg.injection == "head":
            return self.backbone.head(task, g)
        base = f"transfer.{task}.adapter"
        x = tn.matmul(g, self.params[f"{base}.w"]) + self.params[f"{base}.b"]
        return self.backbone.tower(task, x)[1]

    def forward(self, batch: Dataset) -> Forward:
        feats = self.backbone.embed(batch.cat, batch.num)
        inputs = self.backbone.forward(feats)
        f_ctr, p_ctr = self.backbone.tower(CTR, inputs[0])
        f_cvr, p_o = [], []
        for spec, x in zip(self.specs, inputs[1:]):
            f, p = self.backbone.tower(spec.name, x)
            f_cvr.append(f)
            p_o.append(p)
        transferred, p_t = [], []
        if self.transfer.cfg.mode != "none":
            ks = KnowledgeSet(f_ctr, f_cvr)
            for i, spec in enumerate(self.specs):
                g = self.transfer.forward(ks, i)
                transferred.append(g)
                p_t.append(self._transferred_prediction(spec.name, g))
        else:
            transferred = [None] * len(self.specs)
            p_t = [None] * len(self.specs)
        return Forward(p_ctr, f_ctr, f_cvr, p_o, p_t, transferred)

    def pair_losses(self, batch: Dataset, fwd: Forward):
        """``[(L_o, L_t)]`` per CVR task; ``L_t`` is None without a transfer path."""
        isolate = self.transfer.cfg.stop_gradient
        return [task_pair_losses(spec, fwd.p_o[i], fwd.p_t[i], batch.y, batch.z[:, i], fwd.p_ctr,
                                 self.cfg["loss.detach_ctr_in_ctcvr"], isolate)
                for i, spec in enumerate(self.specs)]

    def loss(self, batch: Dataset, fwd: Forward = None):
        fwd = self.forward(batch) if fwd is None else fwd
        cfg = self.cfg
        l_ctr = bce(fwd.p_ctr, batch.y)
        pairs = self.pair_losses(batch, fwd)
        return total_loss(l_ctr, pairs, cfg["loss.alpha"], cfg["loss.detach_reference"], cfg["loss.aux_hinge"])

    def predict(self, ds: Dataset, batch_size=4096):
        """Numpy predictions: ``{"ctr": p, task: (p_o, p_t or None)}``."""
        out = {CTR: []}
        for s in self.specs:
            out[s.name] = ([], [])
        for k in range(0, len(ds), batch_size):
            fwd = self.forward(ds.take(slice(k, k + batch_size)))
            out[CTR].append(fwd.p_ctr.data)
            for i, s in enumerate(self.specs):
                out[s.name][0].append(fwd.p_o[i].data)
                if fwd.p_t[i] is not None:
                    out[s.name][1].append(fwd.p_t[i].data)
        res = {CTR: np.concatenate(out[CTR]) if len(ds) else np.zeros(0)}
        for s in self.specs:
            po, pt = out[s.name]
            res[s.name] = (np.concatenate(po) if po else np.zeros(0), np.concatenate(pt) if pt else None)
        return res

    # ------------------------------------------------------------------
    def state(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ShapeError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ShapeError(f"checkpoint {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)


def schema_to_json(schema: DatasetSchema) -> dict:
    return {
        "categorical": [[n, v] for n, v in schema.categorical],
        "dense": list(schema.dense),
        "tasks": [[t.name, t.pattern, t.signal] for t in schema.tasks],
        "click": schema.click,
        "timestamp": schema.timestamp,
    }


def schema_from_json(obj) -> DatasetSchema:
    return DatasetSchema(
        categorical=[tuple(x) for x in obj["categorical"]],
        dense=obj["dense"],
        tasks=[TaskSpec(*t) for t in obj["tasks"]],
        click=obj["click"],
        timestamp=obj["timestamp"],
    )


def save_checkpoint(model: MultiTaskModel, path, state=None):
    """npz container: ``__meta__`` (JSON config + schema) and one array per parameter path."""
    state = model.state() if state is None else state
    meta = json.dumps({"config": dict(model.cfg), "schema": schema_to_json(model.schema), "seed": model.seed},
                      sort_keys=True)
    arrays = {f"param/{k}": np.asarray(v) for k, v in state.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **arrays)


def load_checkpoint(path) -> MultiTaskModel:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    model = MultiTaskModel(Config(meta["config"]), schema_from_json(meta["schema"]), meta["seed"])
    model.load_state(state)
    return model


def served_scores(model: MultiTaskModel, preds, spec_index, path="original"):
    """Scores evaluated for a CVR task: CTCVR product for sequential tasks."""
    spec = model.specs[spec_index]
    p_o, p_t = preds[spec.name]
    p = p_t if (path == "transferred" and p_t is not None) else p_o
    if spec.pattern == SEQUENTIAL:
        return preds[CTR] * p
    return p
