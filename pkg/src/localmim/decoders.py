"""Tiny per-tap decoders: project, infill mask tokens, one block, rescale, predict."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import _pow2_factor, sincos_pos_embed
from .nn import Block, LayerNorm, Linear, Mlp, Module, param, trunc_normal
from .tensor import Tensor

PRESETS = {
    "columnar": (1, 256, 8),
    "pyramid": (1, 128, 4),
    "512D-16H": (1, 512, 16),
}


@dataclass
class DecoderConfig:
    blocks: int = 1
    dim: int = 64
    heads: int = 2
    mlp_ratio: float = 4.0

    def validate(self) -> None:
        # one block is the least that lets mask tokens see the visible tokens
        if self.blocks < 1:
            raise ValueError("a decoder needs at least one transformer block")
        if self.dim % self.heads:
            raise ValueError(f"{self.heads} heads do not divide decoder width {self.dim}")
        if self.dim % 4:
            raise ValueError(f"decoder width {self.dim} must be divisible by 4")


def default_decoder_config(arch: str, desk: bool = False) -> DecoderConfig:
    """Full-size decoder for ``arch`` (or a named preset); ``desk`` divides width and heads by 4."""
    if arch not in PRESETS:
        raise ValueError(f"no decoder preset for {arch!r}")
    blocks, dim, heads = PRESETS[arch]
    if desk:
        dim, heads = dim // 4, max(1, heads // 4)
    return DecoderConfig(blocks, dim, heads)


def plan_rescale(feature_scale: int, target_scale: int) -> list[str]:
    """Sequence of x2 up/down steps taking a feature grid to the supervision grid."""
    k = _pow2_factor(feature_scale, target_scale)
    if k == 0:
        return ["none"]
    return ["deconv_2x"] * k if k > 0 else ["avgpool_2x"] * (-k)


class Deconv2x(Module):
    """Per-channel 2x2 transposed convolution followed by a channel-mixing affine map.

    Initialised as pure replication (unit kernel, identity mix).
    """

    def __init__(self, dim, dtype=np.float64):
        self.kernel = param(np.ones((2, 2, dim), dtype=dtype))
        self.mix = param(np.eye(dim, dtype=dtype))
        self.mix_bias = param(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.deconv_2x(x, self.kernel, self.mix, self.mix_bias)


class TapDecoder(Module):
    def __init__(self, in_dim, feature_scale, target_scale, target_dim, cfg: DecoderConfig, rng, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.feature_scale = feature_scale
        self.target_scale = target_scale
        self.plan = plan_rescale(feature_scale, target_scale)
        self.norm_in = LayerNorm(in_dim, dtype=dtype)
        self.proj = Linear(in_dim, cfg.dim, rng, dtype=dtype)
        self.mask_token = param(trunc_normal(rng, (cfg.dim,), dtype=dtype))
        self.blocks = [Block(cfg.dim, cfg.heads, rng, cfg.mlp_ratio, dtype=dtype) for _ in range(cfg.blocks)]
        self.norm = LayerNorm(cfg.dim, dtype=dtype)
        self.rescale = [Deconv2x(cfg.dim, dtype=dtype) for step in self.plan if step == "deconv_2x"]
        self.head = Mlp(cfg.dim, cfg.dim, rng, d_out=target_dim, dtype=dtype)
        self.pos = sincos_pos_embed(feature_scale, feature_scale, cfg.dim).astype(dtype)

    def __call__(self, z: Tensor, index: np.ndarray) -> Tensor:
        """(B, V, D_in) visible features at raster ``index`` -> (B, s*s, target_dim)."""
        B = z.shape[0]
        g, D = self.feature_scale, self.cfg.dim
        x = self.proj(self.norm_in(z))
        x = T.scatter_rows(x, index, g * g, self.mask_token) + self.pos
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x).reshape(B, g, g, D)
        ups = iter(self.rescale)
        for step in self.plan:
            if step == "deconv_2x":
                x = next(ups)(x)
            elif step == "avgpool_2x":
                x = T.avgpool_2x(x)
        s = self.target_scale
        return self.head(x.reshape(B, s * s, D))


def decode_tap(decoder: TapDecoder, z: Tensor, index: np.ndarray, tap_mask: np.ndarray) -> Tensor:
    """Run ``decoder`` after checking ``tap_mask`` (B, g, g) agrees with the visible index."""
    tap_mask = np.asarray(tap_mask, dtype=bool)
    if tap_mask.ndim == 2:
        tap_mask = tap_mask[None]
    g = decoder.feature_scale
    if tap_mask.shape[-2:] != (g, g):
        raise ValueError(f"tap mask {tap_mask.shape[-2:]} does not match feature scale {g}")
    flat = tap_mask.reshape(tap_mask.shape[0], -1)
    if np.take_along_axis(flat, np.asarray(index), axis=1).any():
        raise ValueError("visible index points at masked cells")
    return decoder(z, index)
