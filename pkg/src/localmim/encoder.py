"""Visible-only encoders: a columnar ViT stack and a four-stage pyramid.

Both return a :class:`TapOutput` holding, for every tapped layer, the
features of the visible tokens together with their raster indices on that
layer's grid, plus the attention maps of every layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import MaskGrid, sincos_pos_embed
from .nn import Block, Linear, Module
from .tensor import Tensor


@dataclass
class EncoderConfig:
    arch: str = "columnar"
    img_size: int = 64
    patch_size: int = 8
    in_chans: int = 3
    embed_dim: int | Sequence[int] = 64
    depth: int | Sequence[int] = 8
    num_heads: int | Sequence[int] = 4
    mlp_ratio: float = 4.0
    taps: Sequence[int] = ()
    stop_gradient: bool = False
    tap_after_merge: bool = True
    dtype: str = "float64"

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    def stage_depths(self) -> list[int]:
        return [int(self.depth)] if self.arch == "columnar" else [int(d) for d in self.depth]

    def stage_dims(self) -> list[int]:
        if isinstance(self.embed_dim, int):
            n = len(self.stage_depths())
            return [self.embed_dim * 2**i for i in range(n)] if self.arch == "pyramid" else [self.embed_dim]
        return [int(d) for d in self.embed_dim]

    def stage_heads(self) -> list[int]:
        if isinstance(self.num_heads, int):
            return [self.num_heads] * len(self.stage_depths())
        return [int(h) for h in self.num_heads]

    @property
    def total_depth(self) -> int:
        return sum(self.stage_depths())

    def validate(self) -> None:
        if self.img_size % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide image size {self.img_size}")
        if self.arch not in ("columnar", "pyramid"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        depths, dims, heads = self.stage_depths(), self.stage_dims(), self.stage_heads()
        if self.arch == "pyramid" and len(depths) != 4:
            raise ValueError("pyramid encoder needs four stage depths")
        if not len(depths) == len(dims) == len(heads):
            raise ValueError("stage depths, widths and heads differ in length")
        for d, h in zip(dims, heads):
            if d % h:
                raise ValueError(f"{h} heads do not divide width {d}")
            if d % 4:
                raise ValueError(f"width {d} must be divisible by 4 for positional tables")
        for t in self.taps:
            if not 1 <= t <= self.total_depth:
                raise ValueError(f"tap layer {t} outside 1..{self.total_depth}")


@dataclass
class TapOutput:
    features: dict[int, Tensor]  # layer -> (B, V_l, D_l)
    index: dict[int, np.ndarray]  # layer -> (B, V_l) raster indices on the layer grid
    grid: dict[int, int]  # layer -> grid side of that layer's tokens
    attention: list[np.ndarray] = field(default_factory=list)  # per layer (B, heads, V, V)
    layer_grid: list[int] = field(default_factory=list)
    layer_index: list[np.ndarray] = field(default_factory=list)


def pyramid_output_grids(grid: int, tap_after_merge: bool = True) -> list[int]:
    """Grid side seen at each pyramid stage's tap; stages 1-3 end with a 2x2 merge."""
    out = []
    for stage in range(4):
        if stage < 3 and tap_after_merge:
            grid //= 2
        out.append(grid)
        if stage < 3 and not tap_after_merge:
            grid //= 2
    return out


def visible_index(bits: np.ndarray) -> np.ndarray:
    """(B, rows, cols) mask bits -> (B, V) sorted raster indices of unmasked cells."""
    bits = np.asarray(bits, dtype=bool)
    if bits.ndim == 2:
        bits = bits[None]
    flat = bits.reshape(bits.shape[0], -1)
    counts = (~flat).sum(axis=1)
    if counts.min() == 0:
        raise ValueError("every position is masked; the encoder needs at least one visible patch")
    if counts.min() != counts.max():
        raise ValueError(f"visible counts differ across the batch: {sorted(set(counts.tolist()))}")
    return np.stack([np.flatnonzero(~row) for row in flat])


def _child_positions(index: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Coarse raster indices and positions of each 2x2 block's children in ``index``.

    Raises when a block is only partly present.
    """
    B, V = index.shape
    if s % 2:
        raise ValueError(f"cannot merge an odd grid of side {s}")
    if V % 4:
        raise ValueError("mixed-visibility 2x2 block: visible count is not a multiple of 4")
    pos = np.full((B, s * s), -1, dtype=np.intp)
    np.put_along_axis(pos, index, np.arange(V)[None, :].repeat(B, 0), axis=1)
    rows, cols = np.divmod(index, s)
    half = s // 2
    parents = [np.unique(row) for row in (rows // 2) * half + cols // 2]
    if any(len(u) * 4 != V for u in parents):
        raise ValueError("mixed-visibility 2x2 block: visible cells do not form whole blocks")
    coarse = np.stack(parents)
    if coarse.shape[1] * 4 != V:
        raise ValueError("mixed-visibility 2x2 block: visible cells do not form whole blocks")
    cr, cc = np.divmod(coarse, half)
    children = []
    for a in (0, 1):
        for b in (0, 1):
            children.append((2 * cr + a) * s + 2 * cc + b)
    child = np.stack(children, axis=-1)  # (B, V/4, 4) raster order within the block
    where = np.take_along_axis(pos, child.reshape(B, -1), axis=1).reshape(child.shape)
    if (where < 0).any():
        raise ValueError("mixed-visibility 2x2 block: a child cell is masked")
    return coarse, where


def patch_merge(x: Tensor, index: np.ndarray, s: int, reduction: Linear) -> tuple[Tensor, np.ndarray]:
    """Merge visible 2x2 blocks: concatenate children in raster order, reduce linearly."""
    coarse, where = _child_positions(index, s)
    parts = [T.gather_rows(x, where[..., k]) for k in range(4)]
    return reduction(T.concat(parts, axis=-1)), coarse


def pool_tokens(x: Tensor, index: np.ndarray, s: int) -> tuple[Tensor, np.ndarray]:
    """Average visible 2x2 blocks into one token on the s/2 grid."""
    coarse, where = _child_positions(index, s)
    total = T.gather_rows(x, where[..., 0])
    for k in range(1, 4):
        total = total + T.gather_rows(x, where[..., k])
    return T.scale(total, 0.25), coarse


class Encoder(Module):
    """Columnar (one stage) or pyramid (four stages) visible-only encoder."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        dims, heads = cfg.stage_dims(), cfg.stage_heads()
        p, C = cfg.patch_size, cfg.in_chans
        self.patch_embed = Linear(p * p * C, dims[0], rng, dtype=dtype)
        self.blocks = []
        self.merges = []
        self.stage_of = []
        for stage, depth in enumerate(cfg.stage_depths()):
            for _ in range(depth):
                self.blocks.append(Block(dims[stage], heads[stage], rng, cfg.mlp_ratio, dtype=dtype))
                self.stage_of.append(stage)
            if self._merges_after(stage):
                self.merges.append(Linear(4 * dims[stage], dims[stage + 1], rng, bias=False, dtype=dtype))
        self._pos = {}

    def _merges_after(self, stage: int) -> bool:
        return self.cfg.arch == "pyramid" and stage < 3

    def pos_embed(self, side: int, dim: int) -> np.ndarray:
        key = (side, dim)
        if key not in self._pos:
            self._pos[key] = sincos_pos_embed(side, side, dim).astype(self.cfg.dtype)
        return self._pos[key]

    def stage_grids(self) -> list[int]:
        if self.cfg.arch == "columnar":
            return [self.cfg.grid]
        return pyramid_output_grids(self.cfg.grid, self.cfg.tap_after_merge)

    def tap_shapes(self) -> dict[int, tuple[int, int]]:
        """layer -> (grid side, width) of the features a tap at that layer returns."""
        dims = self.cfg.stage_dims()
        s, out = self.cfg.grid, {}
        for i, stage in enumerate(self.stage_of):
            end = i + 1 == len(self.blocks) or self.stage_of[i + 1] != stage
            if end and self._merges_after(stage) and self.cfg.tap_after_merge:
                out[i + 1] = (s // 2, dims[stage + 1])
            else:
                out[i + 1] = (s, dims[stage])
            if end and self._merges_after(stage):
                s //= 2
        return out

    def layer_params(self) -> list[tuple[str, list[Tensor]]]:
        """Parameters grouped per layer: the embedding, then each block (merges join their stage's last block)."""
        groups = [("embed", self.patch_embed.parameters())]
        merge_iter = iter(self.merges)
        for i, blk in enumerate(self.blocks):
            params = blk.parameters()
            last_of_stage = i + 1 == len(self.blocks) or self.stage_of[i + 1] != self.stage_of[i]
            if last_of_stage and self._merges_after(self.stage_of[i]):
                params = params + next(merge_iter).parameters()
            groups.append((f"layer{i + 1}", params))
        return groups

    def forward(
        self,
        patches: np.ndarray,
        index: np.ndarray,
        taps: Sequence[int] | None = None,
        stop_gradient: bool | None = None,
    ) -> TapOutput:
        """Encode the rows of ``patches`` (B, N, p*p*C) selected by ``index`` (B, V).

        Masked rows are never read. ``index`` may be in any order; outputs
        follow it.
        """
        cfg = self.cfg
        taps = set(cfg.taps if taps is None else taps)
        stop = cfg.stop_gradient if stop_gradient is None else stop_gradient
        index = np.asarray(index, dtype=np.intp)
        dims = cfg.stage_dims()
        dtype = np.dtype(cfg.dtype)
        rows = np.take_along_axis(np.asarray(patches), index[..., None], axis=1).astype(dtype, copy=False)
        s = cfg.grid
        x = self.patch_embed(Tensor(rows))
        x = x + self.pos_embed(s, dims[0])[index]
        out = TapOutput({}, {}, {})
        merge_iter = iter(self.merges)
        for i, blk in enumerate(self.blocks):
            layer = i + 1
            stage = self.stage_of[i]
            x = blk(x)
            out.attention.append(blk.attn.last_attn)
            out.layer_grid.append(s)
            out.layer_index.append(index)
            end_of_stage = layer == len(self.blocks) or self.stage_of[i + 1] != stage
            merge = end_of_stage and self._merges_after(stage)
            if merge and cfg.tap_after_merge:
                x, index = patch_merge(x, index, s, next(merge_iter))
                s //= 2
            if layer in taps:
                out.features[layer] = x
                out.index[layer] = index
                out.grid[layer] = s
                if stop:
                    x = x.detach()
            if merge and not cfg.tap_after_merge:
                x, index = patch_merge(x, index, s, next(merge_iter))
                s //= 2
        return out

    __call__ = forward


def encode_visible(patches: np.ndarray, base_mask, encoder: Encoder, **kw) -> TapOutput:
    """Encode the unmasked patches; ``base_mask`` lives on the encoder's input grid."""
    bits = base_mask.bits if isinstance(base_mask, MaskGrid) else np.asarray(base_mask, dtype=bool)
    g = encoder.cfg.grid
    if bits.shape[-2:] != (g, g):
        raise ValueError(f"mask of scale {bits.shape[-2:]} does not match encoder grid {g}x{g}")
    if encoder.cfg.arch == "pyramid":
        coarse = g // 2 ** sum(encoder._merges_after(s) for s in range(4))
        factor = g // coarse
        b = bits.reshape(-1, coarse, factor, coarse, factor)
        if not (b.all(axis=(2, 4)) | ~b.any(axis=(2, 4))).all():
            raise ValueError(f"pyramid encoder needs a mask constant on {factor}x{factor} blocks")
    patches = np.asarray(patches)
    if patches.ndim == 2:
        patches = patches[None]
    return encoder.forward(patches, visible_index(bits), **kw)


encode_visible_pyramid = encode_visible
