"""Hyperparameters, experiment settings, canonical serialization and hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .errors import ParameterError

BASELINES = ("warmup_only", "only_b", "only_f", "alternating", "fuse_avg", "fuse_weight")


@dataclass
class Config:
    # data
    T_sample: int = 128
    k: int | None = None  # MIL pool size; None -> max(1, ceil(T / 8))
    # pseudo-labels and losses
    delta_h: float = 0.3
    delta_l: float = 0.1
    lam: float = 0.05
    tau: float = 0.07
    cls_mode: str = "softmax"  # video-level squashing of pooled scores: softmax | sigmoid
    vlp_squash: str = "softmax"  # per-frame squashing of similarities: softmax | sigmoid
    cls_in_f_step: bool = True
    # inference
    theta_cls: float = 0.85
    theta_loc: float = 0.45
    nms_decay: str = "linear"  # linear | gaussian
    nms_iou: float = 0.3
    nms_sigma: float = 0.5
    nms_floor: float = 1e-3
    # models
    cbp_d_model: int = 64
    cbp_blocks: int = 2
    cbp_heads: int = 4
    cbp_prior: float = 0.02
    cbp_window: int | None = 1  # attention band half-width; None -> full attention
    vlp_layers: int = 2
    vlp_heads: int = 4
    n_prompts: int = 16
    prompt_std: float = 0.01
    # optimization
    lr: float = 1e-3
    warmup_iters: int = 300
    iters_per_step: int = 200
    cycles: int = 3
    batch_videos: int = 4
    seed: int = 0

    def validate(self):
        if not self.delta_h > self.delta_l:
            raise ParameterError(f"delta_h ({self.delta_h}) must exceed delta_l ({self.delta_l})")
        for name in ("delta_h", "delta_l", "theta_cls", "theta_loc", "nms_iou", "nms_floor"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if self.lam < 0:
            raise ParameterError("lam must be >= 0")
        if not 0.0 < self.cbp_prior < 1.0:
            raise ParameterError("cbp_prior must lie in (0, 1)")
        if self.tau <= 0:
            raise ParameterError("tau must be > 0")
        if self.cls_mode not in ("softmax", "sigmoid") or self.vlp_squash not in ("softmax", "sigmoid"):
            raise ParameterError("squashing modes must be 'softmax' or 'sigmoid'")
        if self.nms_decay not in ("linear", "gaussian"):
            raise ParameterError("nms_decay must be 'linear' or 'gaussian'")
        if self.cbp_window is not None and self.cbp_window < 0:
            raise ParameterError("cbp_window must be >= 0")
        if self.k is not None and self.k < 1:
            raise ParameterError("k must be >= 1")
        for name in ("T_sample", "batch_videos", "n_prompts"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        for name in ("warmup_iters", "iters_per_step", "cycles"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        return self


@dataclass
class ExperimentConfig(Config):
    data: str = ""
    out: str = "runs/default"
    baseline: str = "alternating"
    fusion: str = "avg"  # how only_b / only_f combine the two branches: avg | weight
    fuse_weight: float = 0.5

    def validate(self):
        super().validate()
        if self.baseline not in BASELINES:
            raise ParameterError(f"unknown baseline {self.baseline!r}; choose from {BASELINES}")
        if self.fusion not in ("avg", "weight"):
            raise ParameterError("fusion must be 'avg' or 'weight'")
        if not 0.0 <= self.fuse_weight <= 1.0:
            raise ParameterError("fuse_weight must lie in [0, 1]")
        return self


def _coerce(field, raw):
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", "")
    if raw is None:
        return None
    if kind.startswith("int"):
        if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
            raise ParameterError(f"{field.name} expects an integer")
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    if kind.startswith("bool"):
        if isinstance(raw, str):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ParameterError(f"{field.name} expects a boolean")
            return raw.lower() in ("true", "1", "yes")
        return bool(raw)
    return str(raw)


def from_dict(cls, values):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ParameterError(f"unknown config keys: {unknown}")
    try:
        kwargs = {k: _coerce(known[k], v) for k, v in values.items()}
    except (TypeError, ValueError) as exc:
        raise ParameterError(str(exc)) from exc
    return cls(**kwargs).validate()


def load_config(path=None, overrides=(), cls=ExperimentConfig):
    """Read a YAML/JSON config file (optional) and apply ``key=value`` overrides.

    A saved run ``config.json`` is accepted as well.
    """
    values = {}
    if path:
        try:
            values = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ParameterError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ParameterError("config file must hold a mapping")
        if set(values) == {"config_hash", "config"}:  # a run directory's config.json
            values = dict(values["config"])
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ParameterError(f"override {item!r} is not key=value")
        values[key.strip()] = yaml.safe_load(raw) if raw.strip() else ""
    return from_dict(cls, values)


def canonical_json(cfg):
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True, separators=(",", ":"))


LOCATIONS = ("data", "out")


def config_hash(cfg):
    """Hash of every setting except file locations; the dataset itself is pinned by its own digest."""
    values = {k: v for k, v in dataclasses.asdict(cfg).items() if k not in LOCATIONS}
    blob = json.dumps(values, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def model_hash(cfg):
    """Hash of the fields that shape training; output paths and inference knobs excluded."""
    skip = {*LOCATIONS, "theta_cls", "theta_loc", "nms_decay", "nms_iou", "nms_sigma",
            "nms_floor", "fusion", "fuse_weight"}
    values = {k: v for k, v in dataclasses.asdict(cfg).items() if k not in skip}
    blob = json.dumps(values, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
