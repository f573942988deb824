"""Flat dotted-key configuration with typed defaults.

Config files are JSON, either nested (``{"train": {"lr": 0.001}}``) or flat
(``{"train.lr": 0.001}``). Unknown keys are errors.
"""

from __future__ import annotations

import json
from pathlib import Path

from .backbone import BackboneConfig
from .data import SyntheticConfig
from .errors import ConfigError
from .transfer import TransferConfig

DEFAULTS = {
    "train.lr": 1e-3,
    "train.wd": 1e-6,
    "train.batch": 512,
    "train.epochs": 50,
    "train.patience": 3,
    "train.seed": 0,
    "loss.alpha": 0.1,
    "loss.detach_reference": True,
    "loss.detach_ctr_in_ctcvr": False,
    "loss.aux_hinge": True,
    "transfer.mode": "transmitter",
    "transfer.heads": 4,
    "transfer.proj_dim": 1,
    "transfer.attention": "canonical",
    "transfer.stop_gradient": True,
    "transfer.top_m": 0,
    "transfer.injection": "head",
    "backbone.kind": "mmoe",
    "backbone.experts": 3,
    "backbone.expert_hidden": [64],
    "backbone.tower_hidden": [64, 32, 16],
    "backbone.embed_dim": 8,
    "data.preset": "synthetic",
    "data.path": "",
    "data.split": [0.8, 0.1, 0.1],
    "data.samples": 10000,
    "data.rank": 8,
    "data.tasks": ["sequential:binary"],
    "data.task_rates": [0.05],
    "data.rho": 0.5,
    "data.click_rate": 0.1,
    "data.n_users": 1000,
    "data.n_items": 1000,
    "data.feature_noise": 0.5,
    "data.label_noise": 1.0,
    "data.seed": 0,
    "eval.serve": "original",
    "eval.batch": 4096,
    "metrics.strict_ties": False,
}

FULL_SCALE = {
    "train.batch": 4096,
    "backbone.tower_hidden": [512, 256, 128],
    "backbone.embed_dim": 30,
}

_TRUE = {"1", "true", "on", "yes"}
_FALSE = {"0", "false", "off", "no"}


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        text = value.strip()
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            if isinstance(default, list):
                value = [v.strip() for v in text.split(",") if v.strip()]
            else:
                raise ConfigError(f"{key}: cannot parse {value!r}") from None
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, list):
                raise TypeError
            kind = type(default[0]) if default else None
            if kind in (int, float):
                return [kind(v) for v in value]
            return [str(v) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} expects {type(default).__name__}, got {value!r}") from None


def _flatten(obj, prefix=""):
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


class Config(dict):
    """A dict of dotted keys; always complete (every default key present)."""

    def __init__(self, values=None):
        super().__init__(DEFAULTS)
        if values:
            self.update_from(values)

    def update_from(self, values):
        for key, value in _flatten(values).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {key!r}")
            self[key] = _coerce(key, value)
        return self

    def set(self, assignment: str):
        """Apply one ``key=value`` override."""
        key, sep, value = assignment.partition("=")
        if not sep:
            raise ConfigError(f"override {assignment!r} is not key=value")
        return self.update_from({key.strip(): value})

    def copy(self):
        return Config(dict(self))

    def with_(self, **overrides):
        """Copy with ``section__name=value`` overrides (``train__lr=0.01``)."""
        return self.copy().update_from({k.replace("__", "."): v for k, v in overrides.items()})

    def to_json(self) -> str:
        return json.dumps(dict(sorted(self.items())), indent=2, sort_keys=True)

    # typed views ----------------------------------------------------------
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            kind=self["backbone.kind"],
            experts=self["backbone.experts"],
            expert_hidden=list(self["backbone.expert_hidden"]),
            tower_hidden=list(self["backbone.tower_hidden"]),
            embed_dim=self["backbone.embed_dim"],
        )

    def transfer(self) -> TransferConfig:
        return TransferConfig(
            mode=self["transfer.mode"],
            heads=self["transfer.heads"],
            proj_dim=self["transfer.proj_dim"],
            attention=self["transfer.attention"],
            stop_gradient=self["transfer.stop_gradient"],
            top_m=self["transfer.top_m"],
            injection=self["transfer.injection"],
        )

    def synthetic(self) -> SyntheticConfig:
        tasks = []
        for item in self["data.tasks"]:
            pattern, _, signal = item.partition(":")
            tasks.append((pattern.strip(), signal.strip() or "binary"))
        return SyntheticConfig(
            samples=self["data.samples"], rank=self["data.rank"], tasks=tasks, rho=self["data.rho"],
            click_rate=self["data.click_rate"], task_rates=list(self["data.task_rates"]),
            n_users=self["data.n_users"], n_items=self["data.n_items"],
            feature_noise=self["data.feature_noise"], label_noise=self["data.label_noise"], seed=self["data.seed"],
        )

    def validate(self, frozen_ok=False):
        """Check invariants. ``frozen_ok`` admits ``train.lr == 0`` (parameters never move)."""
        from .objectives import check_alpha

        check_alpha(self["loss.alpha"])
        if self["train.lr"] < 0 or (self["train.lr"] == 0 and not frozen_ok):
            raise ConfigError("train.lr must be > 0")
        if self["train.wd"] < 0:
            raise ConfigError("train.wd must be >= 0")
        if self["train.patience"] < 1:
            raise ConfigError("train.patience must be >= 1")
        if self["train.batch"] < 1 or self["eval.batch"] < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self["train.epochs"] < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self["eval.serve"] not in ("original", "transferred"):
            raise ConfigError("eval.serve must be original or transferred")
        self.backbone().validate()
        self.transfer().validate()
        return self


def load_config(path=None, overrides=()) -> Config:
    cfg = Config()
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg.update_from(raw)
    for item in overrides:
        cfg.set(item)
    return cfg
