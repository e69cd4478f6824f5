"""Supervision signals: per-region normalised pixels and 18-bin HOG."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .data import ImageTensor, MaskGrid, ScaleRecipe, rescale_bits

N_BINS = 18
HOG_EPS = 1e-6


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, ImageTensor) else np.asarray(img, dtype=np.float64)


def _regions(x: np.ndarray, s: int) -> np.ndarray:
    """(..., H, W, C) -> (..., s*s, rho, rho, C) for an s x s division."""
    H, W, C = x.shape[-3:]
    if H % s or W % s:
        raise ValueError(f"scale {s} does not divide image {H}x{W}")
    rh, rw = H // s, W // s
    lead = x.shape[:-3]
    x = x.reshape(*lead, s, rh, s, rw, C)
    x = np.moveaxis(x, -4, -3)
    return x.reshape(*lead, s * s, rh, rw, C)


def pixel_norm_target(img, s: int, eps: float = 1e-6) -> np.ndarray:
    """Each region's flattened pixels standardised by its own mean and variance."""
    x = _regions(_pixels(img), s)
    flat = x.reshape(*x.shape[:-3], -1)
    # anchoring on one pixel keeps constant regions exactly zero
    flat = flat - flat[..., :1]
    mu = flat.mean(axis=-1, keepdims=True)
    var = flat.var(axis=-1, keepdims=True)
    return (flat - mu) / np.sqrt(var + eps)


def _pixel_histograms(x: np.ndarray) -> np.ndarray:
    """Per-pixel soft-binned gradient votes, shape (..., H, W, C, 18)."""
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x, pad, mode="edge")
    gx = xp[..., 1:-1, 2:, :] - xp[..., 1:-1, :-2, :]
    gy = xp[..., 2:, 1:-1, :] - xp[..., :-2, 1:-1, :]
    mag = np.hypot(gx, gy)
    theta = np.degrees(np.arctan2(gy, gx)) % 360.0
    width = 360.0 / N_BINS
    # bin k is centred at width/2 + k*width; vote linearly into the two nearest centres
    pos = theta / width - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64) % N_BINS
    hi = (lo + 1) % N_BINS
    hist = np.zeros(x.shape + (N_BINS,))
    np.put_along_axis(hist, lo[..., None], (mag * (1.0 - frac))[..., None], axis=-1)
    # lo != hi always (18 bins), so a second put does not overwrite the first
    np.put_along_axis(hist, hi[..., None], (mag * frac)[..., None], axis=-1)
    return hist


def hog_target(img, s: int, grayscale: bool = False) -> np.ndarray:
    """One 18-bin signed-orientation histogram per region and channel.

    Gradients use centred differences with replicate borders over the whole
    image. Each (cell, channel) histogram is L2-normalised; channels are
    concatenated, giving rows of width 18*C (18 in grayscale mode).
    """
    x = _pixels(img)
    H, W = x.shape[-3:-1]
    if H % s or W % s:
        raise ValueError(f"scale {s} does not divide image {H}x{W}")
    if H // s < 2 or W // s < 2:
        raise ValueError(f"HOG cells of {H // s}x{W // s} pixels are too small (need >= 2)")
    if grayscale:
        x = x.mean(axis=-1, keepdims=True)
    return _hog_from_votes(_pixel_histograms(x), s)


def _hog_from_votes(votes: np.ndarray, s: int) -> np.ndarray:
    H, W, C = votes.shape[-4:-1]
    lead = votes.shape[:-4]
    cells = votes.reshape(*lead, s, H // s, s, W // s, C, N_BINS).sum(axis=(-5, -3))
    norm = np.sqrt((cells * cells).sum(axis=-1, keepdims=True) + HOG_EPS**2)
    cells = np.where(norm > HOG_EPS, cells / norm, 0.0)
    return cells.reshape(*lead, s * s, C * N_BINS)


def hog_multi(img, scales, grayscale: bool = False) -> dict[int, np.ndarray]:
    """HOG at several scales sharing one gradient pass."""
    x = _pixels(img)
    if grayscale:
        x = x.mean(axis=-1, keepdims=True)
    votes = _pixel_histograms(x)
    H, W = x.shape[-3:-1]
    out = {}
    for s in dict.fromkeys(scales):
        if H % s or W % s or H // s < 2:
            raise ValueError(f"scale {s} unusable for a {H}x{W} HOG")
        out[s] = _hog_from_votes(votes, s)
    return out


DESCRIPTORS = ("pixel", "hog")


def target_width(descriptor: str, H: int, s: int, C: int) -> int:
    if descriptor == "pixel":
        return (H // s) ** 2 * C
    if descriptor == "hog":
        return N_BINS * C
    raise ValueError(f"unknown descriptor {descriptor!r}")


def compute_targets(img, descriptor: str, scales) -> dict[int, np.ndarray]:
    if descriptor == "hog":
        return hog_multi(img, scales)
    if descriptor == "pixel":
        return {s: pixel_norm_target(img, s) for s in dict.fromkeys(scales)}
    raise ValueError(f"unknown descriptor {descriptor!r}")


@dataclass
class TapTarget:
    target: np.ndarray  # (..., s*s, d)
    mask: np.ndarray  # bool (..., s, s)
    descriptor: str
    scale: int

    @property
    def width(self) -> int:
        return self.target.shape[-1]

    def mask_digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.mask, dtype=np.uint8).tobytes()).hexdigest()


@dataclass
class TargetBundle:
    taps: list[TapTarget]


def build_target_bundle(
    img, recipe: ScaleRecipe, descriptor: str, base_mask, rule: str = "all"
) -> TargetBundle:
    """Per-tap targets and masks, the masks rescaled from ``base_mask``.

    ``img`` may carry leading batch axes; ``base_mask`` is a :class:`MaskGrid`
    or a bool array with matching leading axes.
    """
    bits = base_mask.bits if isinstance(base_mask, MaskGrid) else np.asarray(base_mask, dtype=bool)
    targets = compute_targets(img, descriptor, recipe.scales)
    taps = [
        TapTarget(targets[s], rescale_bits(bits, s, rule), descriptor, s)
        for s in recipe.scales
    ]
    return TargetBundle(taps)
