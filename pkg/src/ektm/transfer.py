"""Router and transmitter: moving knowledge between task towers.

All inputs are batched: a knowledge vector is a ``(batch, d)`` tensor and
every operation below is applied row by row. CVR task indices are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .backbone import glorot, zeros
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

NORM_FLOOR = 1e-12
MODES = ("transmitter", "linear", "none")
ATTENTION = ("canonical", "literal")
INJECTION = ("head", "tower_first_layer")


@dataclass
class TransferConfig:
    mode: str = "transmitter"
    heads: int = 4
    proj_dim: int = 1
    attention: str = "canonical"
    stop_gradient: bool = True
    top_m: int = 0
    injection: str = "head"

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"transfer.mode must be one of {MODES}, got {self.mode!r}")
        if self.attention not in ATTENTION:
            raise ConfigError(f"transfer.attention must be one of {ATTENTION}, got {self.attention!r}")
        if self.injection not in INJECTION:
            raise ConfigError(f"transfer.injection must be one of {INJECTION}, got {self.injection!r}")
        if self.heads < 1:
            raise ConfigError("transfer.heads must be >= 1")
        if self.proj_dim < 1:
            raise ConfigError("transfer.proj_dim must be >= 1")
        if self.top_m < 0:
            raise ConfigError("transfer.top_m must be >= 0")


@dataclass
class KnowledgeSet:
    f_ctr: Tensor
    f_cvr: list

    def __post_init__(self):
        if not self.f_cvr:
            raise ContractError("a knowledge set needs at least one CVR task")
        shape = self.f_ctr.shape
        for t in self.f_cvr:
            if t.shape != shape:
                raise ShapeError(f"knowledge vectors differ in shape: {shape} vs {t.shape}")

    @property
    def n_tasks(self) -> int:
        return len(self.f_cvr)

    @property
    def dim(self) -> int:
        return self.f_ctr.shape[-1]

    def detached(self) -> "KnowledgeSet":
        return KnowledgeSet(tn.detach(self.f_ctr), [tn.detach(f) for f in self.f_cvr])


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity; a zero row has similarity 0 with anything."""
    na = tn.maximum(tn.l2_norm(a), NORM_FLOOR)
    nb = tn.maximum(tn.l2_norm(b), NORM_FLOOR)
    return tn.div(tn.dot(a, b), na * nb)


def _check_index(ks, i):
    if not 0 <= i < ks.n_tasks:
        raise ContractError(f"CVR task index {i} out of range for T={ks.n_tasks}")


def affinities(ks: KnowledgeSet, i: int, top_m: int = 0):
    """Softmax-normalised cosine affinities of task ``i`` to every other CVR task.

    Returns a ``(batch, T-1)`` tensor ordered by task index with ``i`` left
    out, or ``None`` when T = 1. ``top_m > 0`` keeps only the ``top_m`` most
    similar tasks per row and renormalises.
    """
    _check_index(ks, i)
    others = [j for j in range(ks.n_tasks) if j != i]
    if not others:
        return None
    batch = ks.f_ctr.shape[0]
    sims = tn.concat([tn.reshape(cosine(ks.f_cvr[i], ks.f_cvr[j]), (batch, 1)) for j in others], axis=1)
    weights = tn.softmax_rows(sims)
    if 0 < top_m < len(others):
        # rank by similarity; ties resolved towards lower task index
        order = np.argsort(-sims.data, axis=1, kind="stable")[:, :top_m]
        mask = np.zeros(sims.shape)
        np.put_along_axis(mask, order, 1.0, axis=1)
        kept = weights * Tensor(mask)
        weights = tn.div(kept, tn.sum(kept, axis=1, keepdims=True))
    return weights


def fuse(ks: KnowledgeSet, i: int, weights) -> Tensor:
    """Mean of the CTR vector and the affinity-weighted other CVR vectors."""
    _check_index(ks, i)
    others = [j for j in range(ks.n_tasks) if j != i]
    terms = [ks.f_ctr]
    if others:
        batch = ks.f_ctr.shape[0]
        if weights is None or weights.shape != (batch, len(others)):
            raise ShapeError(f"affinities must be ({batch}, {len(others)})")
        for col, j in enumerate(others):
            w = tn.matmul(weights, Tensor(np.eye(len(others))[:, col:col + 1]))  # (batch, 1)
            terms.append(w * ks.f_cvr[j])
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return tn.scale(total, 1.0 / len(terms))


def _per_head(w, k):
    """(k, p) parameter -> (1, k, 1, p) for broadcasting over (batch, head, position, p)."""
    return tn.reshape(w, (1, k, 1, w.shape[-1]))


def mhca(fused: Tensor, own: Tensor, params: dict, prefix: str, heads: int, attention="canonical") -> Tensor:
    """Multi-head cross-attention: queries/keys from ``fused``, values from ``own``.

    Canonical form treats the d entries of the vectors as attention positions,
    each projected from a scalar to ``p`` reals per head. Returns
    ``(batch, heads, d)``. The ``literal`` form treats each vector as a single
    token, so every attention weight is 1.
    """
    if fused.shape != own.shape or fused.ndim != 2:
        raise ShapeError(f"fused and own knowledge must both be (batch, d), got {fused.shape}, {own.shape}")
    batch, d = fused.shape
    k = heads
    wq, wk, wv = params[f"{prefix}.wq"], params[f"{prefix}.wk"], params[f"{prefix}.wv"]
    if attention == "literal":
        p = wq.shape[-1]
        f4 = tn.reshape(fused, (batch, 1, 1, d))
        q = tn.matmul(f4, tn.reshape(wq, (1, k, d, p)))
        kk = tn.matmul(f4, tn.reshape(wk, (1, k, d, p)))
        att = tn.softmax_rows(tn.scale(tn.matmul(q, tn.transpose(kk)), 1.0 / math.sqrt(p)))  # (b, k, 1, 1)
        v = tn.matmul(tn.reshape(own, (batch, 1, 1, d)), tn.reshape(wv, (1, k, d, d)))
        return tn.reshape(tn.matmul(att, v), (batch, k, d))
    if wq.shape[0] != k:
        raise ShapeError(f"projection has {wq.shape[0]} heads, expected {k}")
    p = wq.shape[1]
    # scalar-to-p projections factor exactly: (F wq)(F wk)^T = (wq . wk) F F^T
    # and (A (f wv)) wo = (wv . wo) A f, so the p axis never materialises
    qk = tn.scale(tn.sum(wq * wk, axis=1), 1.0 / math.sqrt(p))  # (k,)
    vo = tn.sum(wv * params[f"{prefix}.wo"], axis=1)  # (k,)
    outer = tn.reshape(fused, (batch, 1, d, 1)) * tn.reshape(fused, (batch, 1, 1, d))
    att = tn.softmax_rows(outer * tn.reshape(qk, (1, k, 1, 1)))  # (b, k, d, d)
    mixed = tn.reshape(tn.matmul(att, tn.reshape(own, (batch, 1, d, 1))), (batch, k, d))
    return mixed * tn.reshape(vo, (1, k, 1))


def mhca_explicit(fused: Tensor, own: Tensor, params: dict, prefix: str, heads: int) -> Tensor:
    """Canonical attention with materialised Q, K, V (reference form of :func:`mhca`)."""
    batch, d = fused.shape
    k = heads
    wq, wk, wv = params[f"{prefix}.wq"], params[f"{prefix}.wk"], params[f"{prefix}.wv"]
    p = wq.shape[1]
    f4 = tn.reshape(fused, (batch, 1, d, 1))
    q = f4 * _per_head(wq, k)  # (b, k, d, p)
    kk = f4 * _per_head(wk, k)
    v = tn.reshape(own, (batch, 1, d, 1)) * _per_head(wv, k)
    att = tn.softmax_rows(tn.scale(tn.matmul(q, tn.transpose(kk)), 1.0 / math.sqrt(p)))  # (b, k, d, d)
    out = tn.matmul(tn.matmul(att, v), tn.reshape(params[f"{prefix}.wo"], (1, k, p, 1)))
    return tn.reshape(out, (batch, k, d))


def attention_weights(fused: Tensor, params: dict, prefix: str, heads: int) -> np.ndarray:
    """Canonical attention matrices ``(batch, heads, d, d)`` (no graph)."""
    f = fused.data[:, None, :, None]
    wq = params[f"{prefix}.wq"].data[None, :, None, :]
    wk = params[f"{prefix}.wk"].data[None, :, None, :]
    scores = np.matmul(f * wq, np.swapaxes(f * wk, -1, -2)) / math.sqrt(wq.shape[-1])
    return tn.softmax_rows(Tensor(scores)).data


def gate(head_stack: Tensor, f_ctr: Tensor, params: dict, prefix: str) -> Tensor:
    """Forget gate ``sigmoid(heads^T w_f + b_f)`` applied to the CTR knowledge."""
    batch, k, d = head_stack.shape
    if f_ctr.shape != (batch, d):
        raise ShapeError(f"f_ctr must be ({batch}, {d}), got {f_ctr.shape}")
    logits = tn.matmul(tn.transpose(head_stack), params[f"{prefix}.w_f"])  # (b, d, 1)
    g = tn.sigmoid(tn.reshape(logits, (batch, d)) + params[f"{prefix}.b_f"])
    return g * f_ctr


def gate_values(head_stack: Tensor, params: dict, prefix: str) -> np.ndarray:
    """Gate activations in (0, 1), without building a graph."""
    logits = np.matmul(np.swapaxes(head_stack.data, -1, -2), params[f"{prefix}.w_f"].data)[..., 0]
    return tn.sigmoid(Tensor(logits + params[f"{prefix}.b_f"].data)).data


class Transfer:
    """Per-CVR-task transfer modules sharing one parameter dict with the backbone."""

    def __init__(self, cfg: TransferConfig, d: int, cvr_tasks, seed=0, params=None):
        cfg.validate()
        self.cfg = cfg
        self.d = int(d)
        self.cvr_tasks = list(cvr_tasks)
        self.params = {} if params is None else params
        if cfg.mode != "none":
            for task in self.cvr_tasks:
                self._build(seed, task)

    def prefix(self, task) -> str:
        return f"transfer.{task}"

    def _build(self, seed, task):
        p, cfg, d, k = self.params, self.cfg, self.d, self.cfg.heads
        base = self.prefix(task)
        if cfg.mode == "linear":
            p[f"{base}.lin.w"] = tn.Tensor(np.eye(d), requires_grad=True, name=f"{base}.lin.w")
            p[f"{base}.lin.b"] = zeros(f"{base}.lin.b", (d,))
            return
        pd = cfg.proj_dim
        if cfg.attention == "canonical":
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{base}.{name}"] = glorot(seed, f"{base}.{name}", 1, pd, shape=(k, pd))
        else:
            for name in ("wq", "wk"):
                p[f"{base}.{name}"] = glorot(seed, f"{base}.{name}", d, pd, shape=(k, d, pd))
            p[f"{base}.wv"] = glorot(seed, f"{base}.wv", d, d, shape=(k, d, d))
        p[f"{base}.w_f"] = glorot(seed, f"{base}.w_f", k, 1)
        p[f"{base}.b_f"] = zeros(f"{base}.b_f", (d,))

    def forward(self, ks: KnowledgeSet, i: int):
        """Transferred knowledge G_i for CVR task ``i`` (``None`` in mode none)."""
        cfg = self.cfg
        if cfg.mode == "none":
            return None
        if ks.dim != self.d:
            raise ShapeError(f"knowledge width {ks.dim} != configured {self.d}")
        src = ks.detached() if cfg.stop_gradient else ks
        weights = affinities(src, i, cfg.top_m)
        fused = fuse(src, i, weights)
        base = self.prefix(self.cvr_tasks[i])
        if cfg.mode == "linear":
            return tn.matmul(fused, self.params[f"{base}.lin.w"]) + self.params[f"{base}.lin.b"]
        heads = mhca(fused, src.f_cvr[i], self.params, base, cfg.heads, cfg.attention)
        return gate(heads, src.f_ctr, self.params, base)

    def expected_param_count(self) -> int:
        cfg, d, k = self.cfg, self.d, self.cfg.heads
        if cfg.mode == "none":
            return 0
        if cfg.mode == "linear":
            per = d * d + d
        elif cfg.attention == "canonical":
            per = 4 * k * cfg.proj_dim + k + d
        else:
            per = 2 * k * d * cfg.proj_dim + k * d * d + k + d
        return per * len(self.cvr_tasks)
