"""Embedding layer, expert-gate bottoms (Shared-Bottom, MMoE) and task towers."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, IngestionError, ShapeError
from .tensor import Tensor

PROBABILITY = "probability"
REAL = "real"


def param_rng(seed: int, path: str) -> np.random.Generator:
    """Generator keyed on (seed, parameter path).

    Keying by path keeps a parameter's initial value independent of which
    other modules exist, so a bare backbone and a backbone with transfer
    modules start from identical weights for the same seed.
    """
    return np.random.default_rng([int(seed), zlib.crc32(path.encode())])


def glorot(seed, path, fan_in, fan_out, shape=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    data = param_rng(seed, path).uniform(-limit, limit, size=shape)
    return Tensor(data, requires_grad=True, name=path)


def zeros(path, shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=path)


@dataclass
class BackboneConfig:
    kind: str = "mmoe"
    experts: int = 3
    expert_hidden: list = field(default_factory=lambda: [64])
    tower_hidden: list = field(default_factory=lambda: [64, 32, 16])
    embed_dim: int = 8

    def validate(self):
        if self.kind not in ("shared_bottom", "mmoe"):
            raise ConfigError(f"backbone.kind must be shared_bottom or mmoe, got {self.kind!r}")
        if self.experts < 1:
            raise ConfigError("backbone.experts must be positive")
        if not self.expert_hidden or min(self.expert_hidden) < 1:
            raise ConfigError("backbone.expert_hidden must be a nonempty list of positive widths")
        if not self.tower_hidden or min(self.tower_hidden) < 1:
            raise ConfigError("backbone.tower_hidden must be a nonempty list of positive widths")
        if self.embed_dim < 1:
            raise ConfigError("backbone.embed_dim must be positive")

    @property
    def knowledge_dim(self) -> int:
        return self.tower_hidden[-1]


def _mlp(params, prefix, x, n_layers):
    for layer in range(n_layers):
        x = tn.relu(tn.matmul(x, params[f"{prefix}.{layer}.w"]) + params[f"{prefix}.{layer}.b"])
    return x


class Backbone:
    """Embeddings -> bottom -> one tower per task.

    ``tasks`` is an ordered list of ``(name, output_kind)``; the first entry is
    the CTR task. Parameters are created into ``params`` (a dict keyed by a
    stable path string) which may be shared with other modules.
    """

    def __init__(self, cfg: BackboneConfig, fields, n_dense, tasks, seed=0, params=None):
        cfg.validate()
        self.cfg = cfg
        self.fields = [(str(name), int(vocab)) for name, vocab in fields]
        self.n_dense = int(n_dense)
        self.tasks = [(str(n), k) for n, k in tasks]
        for name, kind in self.tasks:
            if kind not in (PROBABILITY, REAL):
                raise ConfigError(f"task {name!r}: unknown output kind {kind!r}")
        if any(v < 1 for _, v in self.fields):
            raise ConfigError("vocabulary sizes must be positive")
        self.params = {} if params is None else params
        self._build(seed)

    @property
    def task_names(self):
        return [n for n, _ in self.tasks]

    @property
    def input_width(self) -> int:
        return len(self.fields) * self.cfg.embed_dim + self.n_dense

    @property
    def bottom_width(self) -> int:
        return self.cfg.expert_hidden[-1]

    @property
    def n_bottoms(self) -> int:
        return 1 if self.cfg.kind == "shared_bottom" else self.cfg.experts

    def _build(self, seed):
        p, cfg = self.params, self.cfg
        for name, vocab in self.fields:
            path = f"embedding.{name}"
            p[path] = glorot(seed, path, vocab, cfg.embed_dim)
        for e in range(self.n_bottoms):
            widths = [self.input_width] + list(cfg.expert_hidden)
            for layer in range(len(cfg.expert_hidden)):
                base = f"experts.{e}.{layer}"
                p[f"{base}.w"] = glorot(seed, f"{base}.w", widths[layer], widths[layer + 1])
                p[f"{base}.b"] = zeros(f"{base}.b", (widths[layer + 1],))
        if cfg.kind == "mmoe":
            for task, _ in self.tasks:
                base = f"gates.{task}"
                p[f"{base}.w"] = glorot(seed, f"{base}.w", self.input_width, cfg.experts)
                p[f"{base}.b"] = zeros(f"{base}.b", (cfg.experts,))
        widths = [self.bottom_width] + list(cfg.tower_hidden)
        for task, _ in self.tasks:
            for layer in range(len(cfg.tower_hidden)):
                base = f"towers.{task}.{layer}"
                p[f"{base}.w"] = glorot(seed, f"{base}.w", widths[layer], widths[layer + 1])
                p[f"{base}.b"] = zeros(f"{base}.b", (widths[layer + 1],))
            p[f"towers.{task}.head.w"] = glorot(seed, f"towers.{task}.head.w", cfg.knowledge_dim, 1)
            p[f"towers.{task}.head.b"] = zeros(f"towers.{task}.head.b", (1,))

    def expected_param_count(self) -> int:
        """Closed-form parameter count for the configuration."""
        cfg = self.cfg
        n = sum(v for _, v in self.fields) * cfg.embed_dim
        widths = [self.input_width] + list(cfg.expert_hidden)
        n += self.n_bottoms * sum(a * b + b for a, b in zip(widths, widths[1:]))
        if cfg.kind == "mmoe":
            n += len(self.tasks) * (self.input_width + 1) * cfg.experts
        widths = [self.bottom_width] + list(cfg.tower_hidden)
        per_tower = sum(a * b + b for a, b in zip(widths, widths[1:])) + cfg.knowledge_dim + 1
        return n + len(self.tasks) * per_tower

    # ------------------------------------------------------------------
    def embed(self, cat, num) -> Tensor:
        """Concatenate per-field embeddings and dense features row-wise."""
        cat = np.asarray(cat)
        num = np.asarray(num, dtype=np.float64)
        n = cat.shape[0]
        if cat.shape != (n, len(self.fields)) or num.shape != (n, self.n_dense):
            raise ShapeError(
                f"expected {len(self.fields)} categorical and {self.n_dense} dense columns, "
                f"got {cat.shape} and {num.shape}")
        blocks = []
        for j, (name, vocab) in enumerate(self.fields):
            idx = cat[:, j]
            bad = np.flatnonzero((idx < 0) | (idx >= vocab))
            if bad.size:
                raise IngestionError(f"index {idx[bad[0]]} outside vocabulary {vocab}", row=int(bad[0]), column=name)
            blocks.append(tn.embedding(self.params[f"embedding.{name}"], idx))
        if self.n_dense:
            blocks.append(Tensor(num))
        return tn.concat(blocks, axis=1)

    def gate_weights(self, features: Tensor, task: str) -> Tensor:
        """Softmax mixing weights (batch x experts) of one task's gate."""
        return tn.softmax_rows(tn.matmul(features, self.params[f"gates.{task}.w"]) + self.params[f"gates.{task}.b"])

    def forward(self, features: Tensor) -> list:
        """Per-task inputs to the towers, in task order."""
        if features.ndim != 2 or features.shape[1] != self.input_width:
            raise ShapeError(f"features must be (batch, {self.input_width}), got {features.shape}")
        depth = len(self.cfg.expert_hidden)
        if self.cfg.kind == "shared_bottom":
            shared = _mlp(self.params, "experts.0", features, depth)
            return [shared] * len(self.tasks)
        batch, width = features.shape[0], self.bottom_width
        stacked = tn.concat(
            [tn.reshape(_mlp(self.params, f"experts.{e}", features, depth), (batch, 1, width))
             for e in range(self.cfg.experts)], axis=1)  # (batch, experts, width)
        outs = []
        for task, _ in self.tasks:
            g = tn.reshape(self.gate_weights(features, task), (batch, 1, self.cfg.experts))
            outs.append(tn.reshape(tn.matmul(g, stacked), (batch, width)))
        return outs

    def tower_hidden(self, task: str, x: Tensor) -> Tensor:
        first = self.params[f"towers.{task}.0.w"]
        if x.ndim != 2 or x.shape[1] != first.shape[0]:
            raise ShapeError(f"tower {task!r} expects width {first.shape[0]}, got {x.shape}")
        return _mlp(self.params, f"towers.{task}", x, len(self.cfg.tower_hidden))

    def head(self, task: str, vector: Tensor) -> Tensor:
        """Prediction layer of ``task`` applied to a (batch, d) vector."""
        d = self.cfg.knowledge_dim
        if vector.ndim != 2 or vector.shape[1] != d:
            raise ShapeError(f"head {task!r} expects width {d}, got {vector.shape}")
        logit = tn.matmul(vector, self.params[f"towers.{task}.head.w"]) + self.params[f"towers.{task}.head.b"]
        logit = tn.reshape(logit, (vector.shape[0],))
        return tn.sigmoid(logit) if dict(self.tasks)[task] == PROBABILITY else logit

    def tower(self, task: str, x: Tensor):
        """Returns ``(knowledge_vector, prediction)`` for one task."""
        knowledge = self.tower_hidden(task, x)
        return knowledge, self.head(task, knowledge)
