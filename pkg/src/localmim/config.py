"""Strict JSON run configuration.

Unknown keys are fatal so an ablation flag with a typo cannot silently fall
back to its default. Every error names the offending field path.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

MODES = ("local-multi", "local-single", "global-multi", "global-single", "fusion")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class DecoderSection:
    dim: int = 64
    heads: int = 2
    blocks: int = 1


@dataclass
class ModelSection:
    arch: str = "columnar"
    img_size: int = 64
    patch_size: int = 8
    in_chans: int = 3
    embed_dim: Any = 64
    depth: Any = 8
    num_heads: Any = 4
    mlp_ratio: float = 4.0
    taps: Any = None
    scales: Any = None
    weights: Any = None
    tap_after_merge: bool = True
    decoder: DecoderSection = field(default_factory=DecoderSection)


@dataclass
class TrainSection:
    mode: str = "local-multi"
    grad_isolated: bool = False
    descriptor: str = "hog"
    mask_strategy: Any = None  # random | blockwise | pyramid; per-arch default
    mask_ratio: float = 0.75
    batch_size: int = 16
    epochs: int = 10
    base_lr: Any = None  # 2e-4 columnar, 1e-4 pyramid
    warmup_epochs: Any = None  # a tenth of runs up to 100 epochs, 40 beyond
    betas: Any = (0.9, 0.95)
    weight_decay: float = 0.05
    seed: int = 0
    dtype: str = "float32"
    augment: bool = False
    log_wall_time: bool = False
    max_steps: Any = None


@dataclass
class DataSection:
    source: str = "synthetic"
    path: Any = None
    count: int = 320
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["train"]["betas"] = list(doc["train"]["betas"])
        return doc

    def digest(self) -> str:
        return config_digest(self.to_dict())

    @property
    def grid(self) -> int:
        return self.model.img_size // self.model.patch_size

    @property
    def steps_per_epoch(self) -> int:
        return self.data.count // self.train.batch_size

    @property
    def total_steps(self) -> int:
        return self.train.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.train.warmup_epochs * self.steps_per_epoch


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_digest(doc) -> str:
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


_SECTIONS = {"model": ModelSection, "train": TrainSection, "data": DataSection, "decoder": DecoderSection}


def _typecheck(path: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {type(value).__name__}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {type(value).__name__}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {type(value).__name__}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {type(value).__name__}")
    return value


def _build(cls, doc, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(path or "<root>", "expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    obj = cls()
    for name, f in known.items():
        if name not in doc:
            continue
        sub = f"{path}.{name}" if path else name
        value = doc[name]
        if name in _SECTIONS:
            value = _build(_SECTIONS[name], value, sub)
        elif f.type not in ("Any", Any):  # loosely typed fields are checked in validate()
            value = _typecheck(sub, value, getattr(obj, name))
        setattr(obj, name, value)
    return obj


def _int_or_list(path, value, n=None):
    items = value if isinstance(value, list) else [value]
    for i, v in enumerate(items):
        if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
            raise ConfigError(f"{path}[{i}]" if isinstance(value, list) else path, "expected a positive integer")
    if n is not None and isinstance(value, list) and len(value) != n:
        raise ConfigError(path, f"expected {n} entries, got {len(value)}")
    return value


def _check_target_scales(cfg: RunConfig) -> None:
    # HOG needs at least 2x2 pixels per cell; catch it here rather than mid-run
    m = cfg.model
    g = m.img_size // m.patch_size
    if m.scales is not None:
        scales, path = m.scales, "model.scales"
    elif m.taps is None and m.arch == "columnar":
        scales, path = [4 * g], "model.patch_size"
    elif m.arch == "pyramid" and m.tap_after_merge:
        scales, path = [g // 2], "model.patch_size"
    else:
        scales, path = [g], "model.patch_size"
    for s in scales:
        if m.img_size % s:
            raise ConfigError(path, f"scale {s} does not divide img_size {m.img_size}")
        if cfg.train.descriptor == "hog" and m.img_size // s < 2:
            raise ConfigError(path, f"scale {s} leaves HOG cells under 2x2 pixels on a {m.img_size}px image")


def validate(cfg: RunConfig) -> RunConfig:
    """Check constraints and fill per-architecture defaults in place."""
    m, t, d = cfg.model, cfg.train, cfg.data
    if m.arch not in ("columnar", "pyramid"):
        raise ConfigError("model.arch", f"must be columnar or pyramid, got {m.arch!r}")
    for name in ("img_size", "patch_size", "in_chans"):
        if getattr(m, name) <= 0:
            raise ConfigError(f"model.{name}", "must be positive")
    if m.img_size % m.patch_size:
        raise ConfigError("model.patch_size", f"does not divide img_size {m.img_size}")
    stages = 4 if m.arch == "pyramid" else None
    _int_or_list("model.embed_dim", m.embed_dim, stages)
    _int_or_list("model.num_heads", m.num_heads, stages)
    if m.arch == "pyramid":
        if not isinstance(m.depth, list):
            raise ConfigError("model.depth", "pyramid needs a list of four stage depths")
        _int_or_list("model.depth", m.depth, 4)
    elif isinstance(m.depth, list) or isinstance(m.depth, bool) or not isinstance(m.depth, int) or m.depth <= 0:
        raise ConfigError("model.depth", "columnar needs a positive integer depth")
    for name in ("taps", "scales"):
        v = getattr(m, name)
        if v is not None:
            if not isinstance(v, list) or not v:
                raise ConfigError(f"model.{name}", "expected a non-empty list of integers")
            _int_or_list(f"model.{name}", v)
    if m.weights is not None:
        if not isinstance(m.weights, list) or any(
            isinstance(w, bool) or not isinstance(w, (int, float)) or w < 0 for w in m.weights
        ):
            raise ConfigError("model.weights", "expected a list of non-negative numbers")
        m.weights = [float(w) for w in m.weights]
    if m.decoder.blocks < 1:
        raise ConfigError("model.decoder.blocks", "at least one transformer block is required")
    if m.decoder.dim % m.decoder.heads:
        raise ConfigError("model.decoder.heads", f"does not divide decoder dim {m.decoder.dim}")

    if t.mode not in MODES:
        raise ConfigError("train.mode", f"must be one of {', '.join(MODES)}; got {t.mode!r}")
    if t.grad_isolated and not t.mode.startswith("local-"):
        raise ConfigError("train.grad_isolated", f"requires a local-* mode, got {t.mode!r}")
    if t.descriptor not in ("hog", "pixel"):
        raise ConfigError("train.descriptor", f"must be hog or pixel, got {t.descriptor!r}")
    _check_target_scales(cfg)
    if t.mask_strategy is None:
        t.mask_strategy = "pyramid" if m.arch == "pyramid" else "random"
    if t.mask_strategy not in ("random", "blockwise", "pyramid"):
        raise ConfigError("train.mask_strategy", f"unknown strategy {t.mask_strategy!r}")
    if m.arch == "pyramid" and t.mask_strategy != "pyramid":
        raise ConfigError("train.mask_strategy", "pyramid encoder needs pyramid masking")
    if not 0.0 < t.mask_ratio < 1.0:
        raise ConfigError("train.mask_ratio", f"must lie in (0, 1), got {t.mask_ratio}")
    if t.batch_size <= 0:
        raise ConfigError("train.batch_size", "must be positive")
    if t.epochs <= 0:
        raise ConfigError("train.epochs", "must be positive")
    if t.base_lr is None:
        t.base_lr = 2e-4 if m.arch == "columnar" else 1e-4
    if isinstance(t.base_lr, bool) or not isinstance(t.base_lr, (int, float)) or t.base_lr <= 0:
        raise ConfigError("train.base_lr", "must be a positive number")
    t.base_lr = float(t.base_lr)
    if t.warmup_epochs is None:
        t.warmup_epochs = t.epochs // 10 if t.epochs <= 100 else 40
    if isinstance(t.warmup_epochs, bool) or not isinstance(t.warmup_epochs, int) or t.warmup_epochs < 0:
        raise ConfigError("train.warmup_epochs", "must be a non-negative integer")
    if t.warmup_epochs >= t.epochs:
        raise ConfigError("train.warmup_epochs", f"{t.warmup_epochs} must be below epochs {t.epochs}")
    betas = list(t.betas)
    if len(betas) != 2 or any(isinstance(b, bool) or not isinstance(b, (int, float)) or not 0 <= b < 1 for b in betas):
        raise ConfigError("train.betas", "expected two numbers in [0, 1)")
    t.betas = tuple(float(b) for b in betas)
    if t.weight_decay < 0:
        raise ConfigError("train.weight_decay", "must be non-negative")
    if t.dtype not in ("float32", "float64"):
        raise ConfigError("train.dtype", f"must be float32 or float64, got {t.dtype!r}")
    if t.max_steps is not None and (isinstance(t.max_steps, bool) or not isinstance(t.max_steps, int) or t.max_steps <= 0):
        raise ConfigError("train.max_steps", "must be a positive integer")

    if d.source not in ("synthetic", "ppm"):
        raise ConfigError("data.source", f"must be synthetic or ppm, got {d.source!r}")
    if d.source == "ppm" and not d.path:
        raise ConfigError("data.path", "required for ppm data")
    if d.count < t.batch_size:
        raise ConfigError("data.count", f"{d.count} images cannot fill one batch of {t.batch_size}")
    if not isinstance(cfg.out_dir, str) or not cfg.out_dir:
        raise ConfigError("out_dir", "expected a non-empty path")
    return cfg


def from_dict(doc: dict) -> RunConfig:
    cfg = _build(RunConfig, copy.deepcopy(doc), "")
    return validate(cfg)


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return from_dict(doc)


def with_overrides(cfg: RunConfig, **train_overrides) -> RunConfig:
    """Copy of ``cfg`` with train fields replaced, re-validated."""
    doc = cfg.to_dict()
    for k, v in train_overrides.items():
        if v is not None:
            doc["train"][k] = v
    return from_dict(doc)

