"""Loss functions and the hinge-calibrated combination of original/transferred paths."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor

PROB_EPS = 1e-7
SEQUENTIAL, PARALLEL = "sequential", "parallel"
BINARY, CONTINUOUS = "binary", "continuous"


@dataclass(frozen=True)
class TaskSpec:
    """One CVR task: how its conversions relate to clicks and what it measures."""

    name: str
    pattern: str = SEQUENTIAL
    signal: str = BINARY

    def __post_init__(self):
        if self.pattern not in (SEQUENTIAL, PARALLEL):
            raise ConfigError(f"task {self.name!r}: pattern must be sequential or parallel")
        if self.signal not in (BINARY, CONTINUOUS):
            raise ConfigError(f"task {self.name!r}: signal must be binary or continuous")
        if self.pattern == SEQUENTIAL and self.signal != BINARY:
            raise ConfigError(f"task {self.name!r}: a sequential task must have a binary signal")

    @property
    def output_kind(self):
        return "real" if self.signal == CONTINUOUS else "probability"


def _pair(p, y, op):
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"{op}: predictions {p.shape} and labels {y.shape} differ")
    return p, y


def bce(p, y) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1-1e-7]."""
    p, y = _pair(p, y, "bce")
    p = tn.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    per = Tensor(y) * tn.log(p) + Tensor(1.0 - y) * tn.log(1.0 - p)
    return tn.neg(tn.mean(per))


def mse(p, y) -> Tensor:
    p, y = _pair(p, y, "mse")
    diff = p - Tensor(y)
    return tn.mean(diff * diff)


def ctcvr_bce(p_ctr, p_cvr, y, z, detach_ctr=False) -> Tensor:
    """Entire-space loss: bce of p_ctr * p_cvr against y * z."""
    p_ctr = p_ctr if isinstance(p_ctr, Tensor) else Tensor(np.asarray(p_ctr, dtype=np.float64))
    p_cvr = p_cvr if isinstance(p_cvr, Tensor) else Tensor(np.asarray(p_cvr, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not (p_ctr.shape == p_cvr.shape == y.shape == z.shape):
        raise ShapeError(f"ctcvr_bce: shapes {p_ctr.shape}, {p_cvr.shape}, {y.shape}, {z.shape} differ")
    if detach_ctr:
        p_ctr = tn.detach(p_ctr)
    return bce(p_ctr * p_cvr, y * z)


def task_pair_losses(spec: TaskSpec, p_o, p_t, y, z, p_ctr, detach_ctr=False, isolate_transferred=False):
    """Original-path and transferred-path losses ``(L_o, L_t)`` for one CVR task.

    ``p_t`` may be ``None`` when no transfer path exists; ``L_t`` is then None.
    With ``isolate_transferred`` the CTR factor inside a sequential ``L_t`` is
    detached (same value), so ``L_t`` cannot reach the CTR tower or backbone.
    """
    if spec.pattern == SEQUENTIAL:
        if spec.signal != BINARY:
            raise ConfigError(f"task {spec.name!r}: sequential tasks must be binary")
        fn = lambda p, iso=False: ctcvr_bce(p_ctr, p, y, z, detach_ctr or iso)  # noqa: E731
    elif spec.signal == BINARY:
        fn = lambda p, iso=False: bce(p, z)  # noqa: E731
    else:
        fn = lambda p, iso=False: mse(p, z)  # noqa: E731
    return fn(p_o), (None if p_t is None else fn(p_t, isolate_transferred))


@dataclass
class LossReport:
    l_ctr: float
    l_o: list
    l_t: list
    hinge: list
    alpha: float
    total: Tensor = field(repr=False)

    @property
    def total_value(self) -> float:
        return self.total.item()

    def hinge_active(self):
        return [h is not None and h > 0 for h in self.hinge]


def check_alpha(alpha):
    if not (isinstance(alpha, (int, float)) and 0.0 < alpha <= 1.0):
        raise ConfigError(f"loss.alpha must lie in (0, 1], got {alpha!r}")


def total_loss(l_ctr: Tensor, pairs, alpha, detach_reference=True, hinge=True) -> LossReport:
    """``L_ctr + sum_i ((1-a) L_o + a max(0, L_t - L_o))``.

    The reference ``L_o`` inside the hinge is detached by default so the
    hinge only pulls ``L_t`` down. With ``hinge=False`` the transferred loss
    enters as a plain ``a * L_t`` (used by ablations). Pairs whose ``L_t`` is
    ``None`` contribute ``L_o`` alone.
    """
    check_alpha(alpha)
    _finite(l_ctr, "L_ctr")
    total = l_ctr
    l_os, l_ts, hinges = [], [], []
    for i, (l_o, l_t) in enumerate(pairs):
        _finite(l_o, f"L_o[{i}]")
        l_os.append(l_o.item())
        if l_t is None:
            total = total + l_o
            l_ts.append(None)
            hinges.append(None)
            continue
        _finite(l_t, f"L_t[{i}]")
        l_ts.append(l_t.item())
        if hinge:
            ref = tn.detach(l_o) if detach_reference else l_o
            extra = tn.max_zero(l_t - ref)
            hinges.append(extra.item())
        else:
            extra = l_t
            hinges.append(max(0.0, l_ts[-1] - l_os[-1]))
        total = total + tn.scale(l_o, 1.0 - alpha) + tn.scale(extra, alpha)
    _finite(total, "total")
    return LossReport(l_ctr.item(), l_os, l_ts, hinges, float(alpha), total)


def _finite(t, term):
    if not np.all(np.isfinite(t.data)):
        raise NumericError("non-finite loss", term=term)
