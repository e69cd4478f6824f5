"""Images, patches, positional tables, masks and tap recipes."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class PPMError(ValueError):
    """Base class for PPM decoding failures."""


class UnsupportedFormat(PPMError):
    pass


class MalformedHeader(PPMError):
    pass


class TruncatedPayload(PPMError):
    pass


@dataclass
class ImageTensor:
    pixels: np.ndarray  # (H, W, C), values in [0, 1]
    source: str | int | None = None

    @property
    def shape(self):
        return self.pixels.shape


# ---------------------------------------------------------------- PPM


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise MalformedHeader("unexpected end of header")
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode a binary P6 image into a uint8 (H, W, 3) array."""
    if len(buf) < 2:
        raise MalformedHeader("file too short for a PPM header")
    magic = buf[:2]
    if magic != b"P6":
        raise UnsupportedFormat(f"unsupported format {magic!r}; only binary P6 is read")
    pos = 2
    fields = []
    for label in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise MalformedHeader(f"{label} is not a positive integer: {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise MalformedHeader(f"maxval must be 255, got {maxval}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise MalformedHeader("missing whitespace after maxval")
    pos += 1
    need = width * height * 3
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise TruncatedPayload(f"payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(pixels: np.ndarray) -> bytes:
    """Encode (H, W, 3) pixels as P6. Floats are taken as [0, 1] and rounded."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"PPM needs (H, W, 3) pixels, got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    return b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes()


def load_ppm(path) -> ImageTensor:
    raw = decode_ppm(Path(path).read_bytes())
    return ImageTensor(raw.astype(np.float64) / 255.0, source=str(path))


def write_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(pixels))


# ---------------------------------------------------------------- synthetic data


def synth_shapes(seed: int, H: int, W: int, C: int = 3, n_images: int = 1) -> list[ImageTensor]:
    """Random rectangles and discs over a flat background, deterministic in ``seed``."""
    if H < 16 or W < 16:
        raise ValueError("synthetic images need H, W >= 16")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W]
    images = []
    for i in range(n_images):
        img = np.empty((H, W, C))
        img[:] = rng.uniform(0.0, 1.0, size=C)
        for _ in range(rng.integers(1, 5)):
            color = rng.uniform(0.0, 1.0, size=C)
            if rng.random() < 0.5:
                h, w = rng.integers(H // 6, H // 2 + 1), rng.integers(W // 6, W // 2 + 1)
                y0, x0 = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
                img[y0 : y0 + h, x0 : x0 + w] = color
            else:
                rad = rng.uniform(min(H, W) / 10, min(H, W) / 4)
                cy, cx = rng.uniform(0, H), rng.uniform(0, W)
                img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] = color
        # quantise to 8-bit levels so the images survive a PPM round trip
        img = np.rint(img * 255.0) / 255.0
        images.append(ImageTensor(img, source=seed * 1_000_003 + i))
    return images


def write_manifest(path, seed: int, count: int, H: int, W: int, C: int) -> None:
    doc = {"seed": seed, "count": count, "dims": [H, W, C]}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def random_resized_crop(
    img: np.ndarray,
    rng: np.random.Generator,
    size: int | None = None,
    scale: tuple[float, float] = (0.2, 1.0),
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
) -> np.ndarray:
    """Crop a random area/aspect window and resize it bilinearly to ``size``."""
    H, W = img.shape[:2]
    size = size or H
    area = H * W
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            y0 = int(rng.integers(0, H - h + 1))
            x0 = int(rng.integers(0, W - w + 1))
            break
    else:
        h, w, y0, x0 = H, W, 0, 0
    ys = y0 + (np.arange(size) + 0.5) * h / size - 0.5
    xs = x0 + (np.arange(size) + 0.5) * w / size - 0.5
    ys = np.clip(ys, 0, H - 1)
    xs = np.clip(xs, 0, W - 1)
    y_lo, x_lo = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y_hi, x_hi = np.minimum(y_lo + 1, H - 1), np.minimum(x_lo + 1, W - 1)
    fy, fx = (ys - y_lo)[:, None, None], (xs - x_lo)[None, :, None]
    top = img[y_lo][:, x_lo] * (1 - fx) + img[y_lo][:, x_hi] * fx
    bot = img[y_hi][:, x_lo] * (1 - fx) + img[y_hi][:, x_hi] * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------- patches


def patchify(img, p: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N, p*p*C) with raster patch order."""
    x = img.pixels if isinstance(img, ImageTensor) else np.asarray(img)
    H, W, C = x.shape[-3:]
    if H % p or W % p:
        raise ValueError(f"patch size {p} does not divide image {H}x{W}")
    lead = x.shape[:-3]
    h, w = H // p, W // p
    x = x.reshape(*lead, h, p, w, p, C)
    x = np.moveaxis(x, -4, -3)  # (..., h, w, p, p, C)
    return x.reshape(*lead, h * w, p * p * C)


def unpatchify(patches: np.ndarray, p: int, h: int, w: int | None = None, C: int = 3) -> np.ndarray:
    w = h if w is None else w
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, h, w, p, p, C)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, h * p, w * p, C)


def sincos_pos_embed(rows: int, cols: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2-D sine-cosine table, one row per grid cell in raster order.

    The first half of the width encodes the column coordinate, the second
    half the row coordinate.
    """
    if dim % 4:
        raise ValueError(f"embedding width {dim} is not divisible by 4")
    quarter = dim // 4
    omega = 1.0 / temperature ** (np.arange(quarter, dtype=np.float64) / quarter)
    yy, xx = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")

    def embed(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([embed(xx), embed(yy)], axis=1)


# ---------------------------------------------------------------- masks


@dataclass
class MaskGrid:
    bits: np.ndarray  # bool (rows, cols); True = masked
    origin: str = "random"

    @property
    def scale(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def flat(self) -> np.ndarray:
        return self.bits.reshape(-1)


def _grid_shape(n) -> tuple[int, int]:
    if isinstance(n, (tuple, list)):
        return int(n[0]), int(n[1])
    side = math.isqrt(int(n))
    return (side, side) if side * side == n else (1, int(n))


def _check_ratio(r: float) -> None:
    if not 0.0 < r < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {r}")


def random_mask(N, r: float, rng: np.random.Generator) -> MaskGrid:
    """Exactly floor(r*N) positions masked, uniformly without replacement.

    ``N`` is a cell count (square grids are inferred) or a (rows, cols) pair.
    """
    _check_ratio(r)
    rows, cols = _grid_shape(N)
    n = rows * cols
    bits = np.zeros(n, dtype=bool)
    bits[rng.permutation(n)[: int(math.floor(r * n))]] = True
    return MaskGrid(bits.reshape(rows, cols), "random")


def blockwise_mask(
    rows: int,
    cols: int,
    r: float,
    rng: np.random.Generator,
    min_area: int = 4,
    min_aspect: float = 0.3,
) -> MaskGrid:
    """Union of random rectangles, trimmed back to exactly floor(r*rows*cols) cells."""
    _check_ratio(r)
    target = int(math.floor(r * rows * cols))
    bits = np.zeros((rows, cols), dtype=bool)
    log_aspect = (math.log(min_aspect), math.log(1.0 / min_aspect))
    while bits.sum() < target:
        remaining = target - int(bits.sum())
        area = rng.uniform(min_area, max(min_area, remaining))
        aspect = math.exp(rng.uniform(*log_aspect))
        h = min(rows, max(1, int(round(math.sqrt(area * aspect)))))
        w = min(cols, max(1, int(round(math.sqrt(area / aspect)))))
        if h * w < min_area and rows * cols >= min_area:
            continue
        top = int(rng.integers(0, rows - h + 1))
        left = int(rng.integers(0, cols - w + 1))
        bits[top : top + h, left : left + w] = True
    excess = int(bits.sum()) - target
    if excess:
        masked = np.flatnonzero(bits)
        flat = bits.reshape(-1)
        flat[rng.choice(masked, size=excess, replace=False)] = False
    return MaskGrid(bits, "blockwise")


def _pow2_factor(a: int, b: int) -> int:
    """Signed log2 of b/a, or raise when the ratio is not a power of two."""
    big, small = max(a, b), min(a, b)
    if small <= 0 or big % small:
        raise ValueError(f"{a} and {b} are not related by a power of 2")
    q = big // small
    if q & (q - 1):
        raise ValueError(f"{a} and {b} are not related by a power of 2")
    k = q.bit_length() - 1
    return k if b >= a else -k


def upsample_bits(bits: np.ndarray, factor: int) -> np.ndarray:
    """Replicate each cell of (..., rows, cols) into a factor x factor block."""
    return np.repeat(np.repeat(bits, factor, axis=-2), factor, axis=-1)


def downsample_bits(bits: np.ndarray, factor: int, rule: str = "all") -> np.ndarray:
    rows, cols = bits.shape[-2:]
    lead = bits.shape[:-2]
    blocks = bits.reshape(*lead, rows // factor, factor, cols // factor, factor)
    if rule == "all":
        return blocks.all(axis=(-3, -1))
    if rule == "any":
        return blocks.any(axis=(-3, -1))
    if rule == "majority":
        return blocks.sum(axis=(-3, -1)) * 2 > factor * factor
    raise ValueError(f"unknown down-sampling rule {rule!r}")


def rescale_bits(bits: np.ndarray, target: int | tuple[int, int], rule: str = "all") -> np.ndarray:
    """Array-level :func:`rescale_mask`; works on batched (..., rows, cols) bits."""
    rows, cols = bits.shape[-2:]
    t_rows, t_cols = _grid_shape(target) if not isinstance(target, int) else (target, target)
    kr, kc = _pow2_factor(rows, t_rows), _pow2_factor(cols, t_cols)
    if kr != kc:
        raise ValueError(f"anisotropic rescale {rows}x{cols} -> {t_rows}x{t_cols}")
    if kr >= 0:
        return upsample_bits(bits, 1 << kr)
    return downsample_bits(bits, 1 << -kr, rule)


def rescale_mask(m: MaskGrid, target_scale, rule: str = "all") -> MaskGrid:
    """Resample a mask by a power-of-2 factor per side.

    Up-scaling replicates bits. Down-scaling marks a coarse cell masked iff
    its children satisfy ``rule`` ("all" by default, also "any", "majority").
    """
    return MaskGrid(rescale_bits(m.bits, target_scale, rule), "rescaled")


def pyramid_mask(
    coarse_rows: int, coarse_cols: int, r: float, upsample_factor: int, rng: np.random.Generator
) -> tuple[MaskGrid, MaskGrid]:
    if upsample_factor < 1 or upsample_factor & (upsample_factor - 1):
        raise ValueError(f"upsample factor must be a power of 2, got {upsample_factor}")
    coarse = random_mask((coarse_rows, coarse_cols), r, rng)
    coarse.origin = "pyramid-base"
    fine = MaskGrid(upsample_bits(coarse.bits, upsample_factor), "rescaled")
    return coarse, fine


def make_mask(strategy: str, grid: int, r: float, rng: np.random.Generator, coarse: int | None = None) -> MaskGrid:
    """Base mask at ``grid`` for a named strategy (random, blockwise, pyramid)."""
    if strategy == "random":
        return random_mask((grid, grid), r, rng)
    if strategy == "blockwise":
        return blockwise_mask(grid, grid, r, rng)
    if strategy == "pyramid":
        coarse = coarse or grid
        return pyramid_mask(coarse, coarse, r, grid // coarse, rng)[1]
    raise ValueError(f"unknown mask strategy {strategy!r}")


# ---------------------------------------------------------------- recipes


@dataclass
class Tap:
    layer: int
    scale: int  # supervision grid side
    weight: float = 1.0
    decoder: dict = field(default_factory=dict)


@dataclass
class ScaleRecipe:
    taps: list[Tap]
    grid: int  # encoder grid side

    @property
    def layers(self) -> list[int]:
        return [t.layer for t in self.taps]

    @property
    def scales(self) -> list[int]:
        return [t.scale for t in self.taps]

    @property
    def weights(self) -> list[float]:
        return [t.weight for t in self.taps]

    def validate(self) -> None:
        layers = self.layers
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValueError(f"tap layers must be strictly increasing: {layers}")
        scales = self.scales
        if any(b > a for a, b in zip(scales, scales[1:])):
            raise ValueError(f"tap scales must run fine to coarse: {scales}")
        for s in scales:
            _pow2_factor(self.grid, s)


def pyramid_stage_scales(grid: int, n_stages: int = 4, merge_stages: Sequence[int] = (1, 2, 3)) -> list[int]:
    """Output grid side of each stage when merging happens at the end of ``merge_stages``."""
    out, s = [], grid
    for stage in range(1, n_stages + 1):
        if stage in merge_stages:
            if s % 2:
                raise ValueError(f"cannot merge an odd grid of side {s}")
            s //= 2
        out.append(s)
    return out


def build_scale_recipe(arch: str, depth, grid: int, stage_scales: Sequence[int] | None = None) -> ScaleRecipe:
    """Default fine-to-coarse tap recipe.

    columnar: layers {2, 4, 4+n, 6+n} with n = depth - 6 and scales
    {4g, 2g, g, g/2}. pyramid: ``depth`` lists the four stage depths; one tap
    at each stage output, supervised at that stage's output scale.
    """
    if arch == "columnar":
        depth = int(depth)
        if depth < 8:
            raise ValueError(f"columnar recipe needs depth >= 8 for distinct taps, got {depth}")
        if grid % 2:
            raise ValueError(f"columnar recipe needs an even grid, got {grid}")
        n = depth - 6
        layers = [2, 4, 4 + n, 6 + n]
        scales = [4 * grid, 2 * grid, grid, grid // 2]
    elif arch == "pyramid":
        depths = list(depth)
        if len(depths) != 4 or min(depths) < 1:
            raise ValueError(f"pyramid recipe needs 4 positive stage depths, got {depths}")
        layers = list(np.cumsum(depths).tolist())
        scales = list(stage_scales) if stage_scales is not None else pyramid_stage_scales(grid)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    recipe = ScaleRecipe([Tap(l, s) for l, s in zip(layers, scales)], grid)
    recipe.validate()
    return recipe
