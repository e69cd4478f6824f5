"""Objective, optimiser, schedule, training loop and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from . import tensorfile
from .config import RunConfig
from .data import build_scale_recipe, make_mask, patchify, random_resized_crop, rescale_bits, ScaleRecipe, Tap
from .decoders import DecoderConfig, TapDecoder
from .descriptors import TargetBundle, TapTarget, compute_targets, target_width
from .encoder import Encoder, EncoderConfig, pool_tokens, pyramid_output_grids, visible_index
from .nn import Linear, Module
from .tensor import Prng, Tensor

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


# ---------------------------------------------------------------- objective


def local_mim_loss(preds: Sequence[Tensor], bundle: TargetBundle, weights: Sequence[float]) -> tuple[Tensor, list[Tensor]]:
    """Weighted sum over taps of the masked mean squared error.

    Each tap's error is averaged over its masked rows and feature dims.
    Returns the total and the per-tap terms (unweighted).
    """
    if not len(preds) == len(bundle.taps) == len(weights):
        raise ValueError("predictions, targets and weights are not tap-aligned")
    total, parts = None, []
    for i, (pred, tap, w) in enumerate(zip(preds, bundle.taps, weights)):
        flat_mask = tap.mask.reshape(*tap.mask.shape[:-2], -1)
        if not flat_mask.any():
            raise ValueError(f"tap {i} (scale {tap.scale}) has no masked rows")
        term = T.masked_mse(pred, tap.target, flat_mask)
        parts.append(term)
        weighted = T.scale(term, w)
        total = weighted if total is None else total + weighted
    return total, parts


def lr_schedule(step: int, warmup_steps: int, total_steps: int, base_lr: float, batch_size: int) -> float:
    """Linear warmup to base_lr*batch/256, then half-cosine decay to zero."""
    if warmup_steps >= total_steps:
        raise ValueError(f"warmup {warmup_steps} must be shorter than the run {total_steps}")
    peak = base_lr * batch_size / 256
    if step < warmup_steps:
        return peak * step / warmup_steps
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamW:
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def decays(name: str, p: Tensor) -> bool:
        # norm gains, biases and mask tokens are 1-D
        return p.ndim > 1

    def update(self, named: "OrderedDict[str, Tensor]", grads: dict[str, np.ndarray], lr: float) -> None:
        adamw_update(named, grads, self, lr)


def adamw_update(named, grads, state: AdamW, lr: float) -> None:
    """One decoupled-weight-decay Adam step, in place, with bias correction.

    Raises :class:`NonFiniteGradient` without touching anything if a gradient
    is NaN or infinite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in named.items():
        g = grads[name]
        dt = p.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name} {p.shape}")
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if state.decays(name, p):
            p.data *= dt(1 - lr * state.weight_decay)
        p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))


# ---------------------------------------------------------------- model


@dataclass
class Head:
    """One reconstruction task: a source layer (or fusion), a scale and a weight."""

    name: str
    layer: int  # encoder layer, 0 for the fused top feature
    scale: int
    weight: float = 1.0


def make_recipe(cfg: RunConfig) -> ScaleRecipe:
    m = cfg.model
    g = cfg.grid
    if m.taps is None:
        if m.arch == "pyramid":
            scales = pyramid_output_grids(g, m.tap_after_merge)
            recipe = build_scale_recipe("pyramid", m.depth, g, scales)
        else:
            recipe = build_scale_recipe("columnar", m.depth, g)
    else:
        scales = m.scales if m.scales is not None else [g] * len(m.taps)
        if len(scales) != len(m.taps):
            raise ValueError("model.scales and model.taps differ in length")
        recipe = ScaleRecipe([Tap(l, s) for l, s in zip(m.taps, scales)], g)
    if m.weights is not None:
        if len(m.weights) != len(recipe.taps):
            raise ValueError("model.weights and taps differ in length")
        for tap, w in zip(recipe.taps, m.weights):
            tap.weight = w
    recipe.validate()
    return recipe


def make_heads(mode: str, recipe: ScaleRecipe, top_layer: int, single_scale: int) -> list[Head]:
    """Reconstruction tasks for a training mode.

    local-multi: the recipe as is. local-single: recipe layers, one shared
    scale. global-multi: every recipe scale decoded from the top layer.
    global-single: the top layer at one scale. fusion: projected tap features
    summed at the top and decoded once at one scale.
    """
    taps = recipe.taps
    if mode == "local-multi":
        return [Head(f"tap{t.layer}", t.layer, t.scale, t.weight) for t in taps]
    if mode == "local-single":
        return [Head(f"tap{t.layer}", t.layer, single_scale, t.weight) for t in taps]
    if mode == "global-multi":
        return [Head(f"top_s{t.scale}", top_layer, t.scale, t.weight) for t in taps]
    if mode == "global-single":
        return [Head("top", top_layer, single_scale, 1.0)]
    if mode == "fusion":
        return [Head("fusion", 0, single_scale, 1.0)]
    raise ValueError(f"unknown mode {mode!r}")


class LocalMIM(Module):
    """Encoder plus one decoder per reconstruction head."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator, mode: str | None = None):
        m, t = cfg.model, cfg.train
        self.mode = mode or t.mode
        self.descriptor = t.descriptor
        self.grad_isolated = t.grad_isolated
        self.dtype = np.dtype(t.dtype)
        self.recipe = make_recipe(cfg)
        enc_cfg = EncoderConfig(
            arch=m.arch, img_size=m.img_size, patch_size=m.patch_size, in_chans=m.in_chans,
            embed_dim=m.embed_dim if not isinstance(m.embed_dim, list) else tuple(m.embed_dim),
            depth=m.depth if not isinstance(m.depth, list) else tuple(m.depth),
            num_heads=m.num_heads if not isinstance(m.num_heads, list) else tuple(m.num_heads),
            mlp_ratio=m.mlp_ratio, tap_after_merge=m.tap_after_merge, dtype=t.dtype,
        )
        self.encoder = Encoder(enc_cfg, rng)
        self.top_layer = enc_cfg.total_depth
        shapes = self.encoder.tap_shapes()
        layer_grid = {l: g for l, (g, _) in shapes.items()}
        layer_dim = {l: d for l, (_, d) in shapes.items()}
        self.single_scale = cfg.grid if m.arch == "columnar" else layer_grid[self.top_layer]
        self.heads = make_heads(self.mode, self.recipe, self.top_layer, self.single_scale)
        self.source_layers = sorted({h.layer for h in self.heads if h.layer} | (
            set(self.recipe.layers) if self.mode == "fusion" or self.grad_isolated else set()))
        top_dim = layer_dim[self.top_layer]
        if self.mode == "fusion":
            self.fuse = {str(l): Linear(layer_dim[l], top_dim, rng, dtype=self.dtype) for l in self.recipe.layers}
        dcfg = DecoderConfig(m.decoder.blocks, m.decoder.dim, m.decoder.heads)
        H, C = m.img_size, m.in_chans
        self.decoders = {}
        for h in self.heads:
            src = h.layer or self.top_layer
            self.decoders[h.name] = TapDecoder(
                layer_dim[src], layer_grid[src], h.scale, target_width(self.descriptor, H, h.scale, C),
                dcfg, rng, dtype=self.dtype,
            )

    def bundle(self, images: np.ndarray, base_bits: np.ndarray) -> TargetBundle:
        targets = compute_targets(images, self.descriptor, [h.scale for h in self.heads])
        return TargetBundle([
            TapTarget(targets[h.scale], rescale_bits(base_bits, h.scale), self.descriptor, h.scale)
            for h in self.heads
        ])

    def predict(self, images: np.ndarray, base_bits: np.ndarray, stop_gradient: bool | None = None):
        """Encode the visible patches and decode every head. Returns (preds, TapOutput)."""
        patches = patchify(images, self.encoder.cfg.patch_size)
        isolated = self.grad_isolated if stop_gradient is None else stop_gradient
        out = self.encoder(patches, visible_index(base_bits), taps=self.source_layers, stop_gradient=isolated)
        preds = []
        for h in self.heads:
            if h.layer:
                z, idx = out.features[h.layer], out.index[h.layer]
            else:
                z, idx = self._fused(out)
            preds.append(self.decoders[h.name](z, idx))
        return preds, out

    def _fused(self, out):
        top = self.top_layer
        g_top = out.grid[top]
        total = None
        for l in self.recipe.layers:
            z, idx, g = out.features[l], out.index[l], out.grid[l]
            while g > g_top:
                z, idx = pool_tokens(z, idx, g)
                g //= 2
            term = self.fuse[str(l)](z)
            total = term if total is None else total + term
        return total, out.index[top]

    def loss(self, images: np.ndarray, base_bits: np.ndarray, weights: Sequence[float] | None = None):
        images = np.asarray(images, dtype=self.dtype)
        preds, out = self.predict(images, base_bits)
        bundle = self.bundle(images, base_bits)
        w = [h.weight for h in self.heads] if weights is None else list(weights)
        total, parts = local_mim_loss(preds, bundle, w)
        return total, parts, out

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.named_parameters().items())

    def load_state_dict(self, state) -> None:
        named = self.named_parameters()
        missing = set(named) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in named.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


# ---------------------------------------------------------------- stepping


@dataclass
class StepResult:
    loss: float
    tap_losses: list[float]
    grad_norm: float
    lr: float


def make_batch_masks(cfg: RunConfig, step: int, batch: int, prng: Prng) -> np.ndarray:
    """Base masks for one step; a function of (seed, step) only, shared by every mode."""
    rng = prng.stream("mask", step)
    g = cfg.grid
    coarse = None
    if cfg.train.mask_strategy == "pyramid":
        coarse = g // 8 if cfg.model.arch == "pyramid" else g
    return np.stack([make_mask(cfg.train.mask_strategy, g, cfg.train.mask_ratio, rng, coarse).bits for _ in range(batch)])


def train_step(model: LocalMIM, opt: AdamW, images: np.ndarray, base_bits: np.ndarray, lr: float) -> StepResult:
    """mask -> encode visible -> decode heads -> targets -> loss -> backward -> AdamW."""
    total, parts, _ = model.loss(images, base_bits)
    named = model.named_parameters()
    grads = T.backward(total, named.values())
    by_name = OrderedDict((k, grads[p]) for k, p in named.items())
    gnorm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in by_name.values()))
    opt.update(named, by_name, lr)
    return StepResult(float(total.data), [float(p.data) for p in parts], gnorm, lr)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    moments_m: "OrderedDict[str, np.ndarray]"
    moments_v: "OrderedDict[str, np.ndarray]"
    step: int
    epoch: int
    seed: int
    config_digest: str
    opt_step: int = 0


_META = "__meta__/"


def _bytes_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _text_entry(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8")


def checkpoint_entries(ckpt: Checkpoint) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    meta = {"step": ckpt.step, "epoch": ckpt.epoch, "opt_step": ckpt.opt_step, "seed": ckpt.seed}
    for k, v in meta.items():
        out[_META + k] = np.array([float(v)])
    out[_META + "config_digest"] = _bytes_entry(ckpt.config_digest)
    for k, v in ckpt.params.items():
        out["param/" + k] = v
    for k, v in ckpt.moments_m.items():
        out["adam_m/" + k] = v
    for k, v in ckpt.moments_v.items():
        out["adam_v/" + k] = v
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensorfile.save(path, checkpoint_entries(ckpt))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, expected_digest: str | None = None, shapes: dict | None = None) -> Checkpoint:
    """Read a checkpoint, refusing on truncation, digest mismatch or shape mismatch."""
    try:
        entries = tensorfile.load(path)
    except tensorfile.TensorFileError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    try:
        meta = {k: int(entries[_META + k][0]) for k in ("step", "epoch", "opt_step", "seed")}
        digest = _text_entry(entries[_META + "config_digest"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing metadata entry {exc}") from exc
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError(f"{path}: config digest {digest} does not match expected {expected_digest}")
    groups = {"param/": OrderedDict(), "adam_m/": OrderedDict(), "adam_v/": OrderedDict()}
    for k, v in entries.items():
        for prefix, bucket in groups.items():
            if k.startswith(prefix):
                bucket[k[len(prefix):]] = v
    params, m, v = groups.values()
    for name, arr in list(m.items()) + list(v.items()):
        if name not in params or params[name].shape != arr.shape:
            raise CheckpointError(f"{path}: optimiser moment {name} does not match its parameter")
    if shapes is not None:
        for name, shape in shapes.items():
            if name not in params:
                raise CheckpointError(f"{path}: missing parameter {name}")
            if tuple(params[name].shape) != tuple(shape):
                raise CheckpointError(f"{path}: parameter {name} has shape {params[name].shape}, expected {tuple(shape)}")
    return Checkpoint(params, m, v, meta["step"], meta["epoch"], meta["seed"], digest, meta["opt_step"])


def make_checkpoint(model: LocalMIM, opt: AdamW, step: int, epoch: int, cfg: RunConfig) -> Checkpoint:
    names = list(model.named_parameters())
    return Checkpoint(
        model.state_dict(),
        OrderedDict((k, opt.m[k]) for k in names if k in opt.m),
        OrderedDict((k, opt.v[k]) for k in names if k in opt.v),
        step, epoch, cfg.train.seed, cfg.digest(), opt.step,
    )


def restore(model: LocalMIM, opt: AdamW, ckpt: Checkpoint) -> None:
    model.load_state_dict(ckpt.params)
    dt = model.dtype
    opt.m = {k: v.astype(dt, copy=True) for k, v in ckpt.moments_m.items()}
    opt.v = {k: v.astype(dt, copy=True) for k, v in ckpt.moments_v.items()}
    opt.step = ckpt.opt_step


# ---------------------------------------------------------------- loop


def build_model(cfg: RunConfig, mode: str | None = None) -> LocalMIM:
    return LocalMIM(cfg, Prng(cfg.train.seed).stream("init"), mode)


def batch_images(cfg: RunConfig, data: np.ndarray, step: int, prng: Prng) -> np.ndarray:
    """Images for 1-based ``step``: per-epoch shuffles drawn from the data stream."""
    spe = cfg.steps_per_epoch
    epoch, k = divmod(step - 1, spe)
    order = prng.stream("data", epoch).permutation(len(data))
    idx = order[k * cfg.train.batch_size : (k + 1) * cfg.train.batch_size]
    imgs = data[idx]
    if cfg.train.augment:
        rng = prng.stream("augment", step)
        imgs = np.stack([random_resized_crop(im, rng) for im in imgs])
    return imgs.astype(cfg.train.dtype)


@dataclass
class RunResult:
    checkpoint: Checkpoint
    metrics_path: Path
    rows: list[dict]


def metrics_header(model: LocalMIM) -> list[str]:
    return ["step", "epoch", "lr", "loss_total"] + [f"loss_tap{i + 1}" for i in range(len(model.heads))] + ["wall_ms"]


def run_pretrain(
    cfg: RunConfig,
    data: np.ndarray,
    out_dir,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
) -> RunResult:
    """Epoch loop writing ``metrics.csv`` and checkpoints into ``out_dir``.

    Checkpoints are written at the median epoch ceil(E/2) and at the end
    (``last.lmim``). With ``resume`` the run continues after the checkpoint's
    step; rows are appended to an existing metrics file.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    data = np.asarray(data)
    if len(data) < cfg.train.batch_size:
        raise ValueError(f"{len(data)} images cannot fill a batch of {cfg.train.batch_size}")
    prng = Prng(cfg.train.seed)
    model = build_model(cfg)
    opt = AdamW(cfg.train.betas, cfg.train.weight_decay)
    start = 0
    if resume is not None:
        if resume.config_digest != cfg.digest():
            raise CheckpointError(f"checkpoint digest {resume.config_digest} != config digest {cfg.digest()}")
        restore(model, opt, resume)
        start = resume.step
    total = cfg.total_steps
    stop = total if max_steps is None else min(total, start + max_steps)
    if cfg.train.max_steps is not None:
        stop = min(stop, cfg.train.max_steps)
    spe = cfg.steps_per_epoch
    median_epoch = math.ceil(cfg.train.epochs / 2)
    header = metrics_header(model)
    metrics_path = out_dir / "metrics.csv"
    mode = "a" if resume is not None and metrics_path.exists() else "w"
    rows = []
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(header)
        for step in range(start + 1, stop + 1):
            epoch = (step - 1) // spe + 1
            lr = lr_schedule(step - 1, cfg.warmup_steps, total, cfg.train.base_lr, cfg.train.batch_size)
            images = batch_images(cfg, data, step, prng)
            bits = make_batch_masks(cfg, step, len(images), prng)
            t0 = time.perf_counter()
            res = train_step(model, opt, images, bits, lr)
            wall = (time.perf_counter() - t0) * 1000.0 if cfg.train.log_wall_time else 0.0
            row = [step, epoch, f"{lr:.9e}", f"{res.loss:.9e}"] + [f"{x:.9e}" for x in res.tap_losses] + [f"{wall:.3f}"]
            writer.writerow(row)
            rows.append(dict(zip(header, row)))
            if step % spe == 0 and epoch == median_epoch:
                save_checkpoint(make_checkpoint(model, opt, step, epoch, cfg), out_dir / f"ckpt_epoch{epoch:03d}.lmim")
            if step % 50 == 0:
                log.info("step %d/%d loss %.5f lr %.3e", step, total, res.loss, lr)
    final = make_checkpoint(model, opt, stop, (stop - 1) // spe + 1 if stop else 0, cfg)
    save_checkpoint(final, out_dir / "last.lmim")
    return RunResult(final, metrics_path, rows)


def load_model(cfg: RunConfig, ckpt: Checkpoint, mode: str | None = None) -> LocalMIM:
    model = build_model(cfg, mode)
    model.load_state_dict(ckpt.params)
    return model
