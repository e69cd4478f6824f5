"""Attention statistics, gradient-norm probe, attention dumps, linear probe, SVG charts."""
from __future__ import annotations

import csv
import math
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import encode_ppm, patchify
from .nn import Linear
from .tensor import Tensor, no_grad


def _check_stochastic(A: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim not in (2, 3) or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expected a square attention map (or a stack of them), got {A.shape}")
    if (A < -tol).any() or not np.allclose(A.sum(axis=-1), 1.0, rtol=0.0, atol=tol):
        raise ValueError("attention rows must be non-negative and sum to 1")
    return A


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    nz = x > 0
    out[nz] = x[nz] * np.log(y[nz])
    return out


def _nmi_single(A: np.ndarray, normalization: str) -> float:
    n = A.shape[0]
    joint = A / n
    pk = joint.sum(axis=0)
    pq = np.full(n, 1.0 / n)
    ratio = np.where(joint > 0, joint / np.maximum(pq[:, None] * pk[None, :], 1e-300), 1.0)
    mi = float(_xlogy(joint, ratio).sum())
    hq = math.log(n)
    hk = float(-_xlogy(pk, pk).sum())
    denom = math.sqrt(hq * hk) if normalization == "geometric" else 0.5 * (hq + hk)
    if denom <= 0.0:
        return 0.0
    return max(0.0, mi / denom)


def attention_nmi(A, normalization: str = "geometric", per_head: bool = False):
    """Normalised mutual information between query and key of a row-stochastic map.

    The joint is A/N with uniform queries. ``A`` may be (N, N) or (heads, N, N);
    heads are averaged unless ``per_head``.
    """
    if normalization not in ("geometric", "arithmetic"):
        raise ValueError(f"unknown normalisation {normalization!r}")
    A = _check_stochastic(A)
    stack = A[None] if A.ndim == 2 else A
    vals = [_nmi_single(a, normalization) for a in stack]
    return vals if per_head else float(np.mean(vals))


def _kl_single(A: np.ndarray, clamp: float) -> float:
    n = A.shape[0]
    if n < 2:
        return 0.0
    logp = np.where(A > 0, np.log(np.where(A > 0, A, 1.0)), 0.0)
    logq = np.log(np.maximum(A, clamp))
    # sum_k p1 log p1 for every row, minus the cross term for every ordered pair
    self_term = (A * logp).sum(axis=1)
    cross = A @ logq.T  # [q1, q2] = sum_k A[q1, k] log A[q2, k]
    kl = self_term[:, None] - cross
    np.fill_diagonal(kl, 0.0)
    return float(kl.sum() / (n * (n - 1)))


def attention_kl(A, clamp: float = 1e-12, per_head: bool = False):
    """Mean KL divergence between the attention rows of distinct ordered query pairs."""
    A = _check_stochastic(A)
    stack = A[None] if A.ndim == 2 else A
    vals = [_kl_single(a, clamp) for a in stack]
    return vals if per_head else float(np.mean(vals))


# ---------------------------------------------------------------- model probes


def full_mask(model, batch: int) -> np.ndarray:
    g = model.encoder.cfg.grid
    return np.zeros((batch, g, g), dtype=bool)


def attention_stats(model, images: np.ndarray, bits: np.ndarray | None = None) -> list[dict]:
    """Per layer and head: mean and stdev over images of NMI and KL.

    ``bits`` None means an unmasked forward pass ("full"); otherwise the
    visible-token attention of the masked pass ("masked").
    """
    images = np.asarray(images, dtype=model.dtype)
    source = "full" if bits is None else "masked"
    if bits is None:
        bits = full_mask(model, len(images))
    with no_grad():
        _, out = model.predict(images, bits)
    rows = []
    for layer, attn in enumerate(out.attention, start=1):
        B, H = attn.shape[:2]
        nmi = np.array([[_nmi_single(attn[b, h].astype(np.float64), "geometric") for h in range(H)] for b in range(B)])
        kl = np.array([[_kl_single(attn[b, h].astype(np.float64), 1e-12) for h in range(H)] for b in range(B)])
        for h in range(H):
            rows.append({
                "layer": layer, "head": h, "nmi": float(nmi[:, h].mean()), "kl": float(kl[:, h].mean()),
                "nmi_std": float(nmi[:, h].std()), "kl_std": float(kl[:, h].std()), "source": source,
            })
    return rows


def layer_summary(rows: Sequence[dict], key: str) -> dict[int, float]:
    """Head-averaged value of ``key`` per layer."""
    acc: dict[int, list[float]] = {}
    for r in rows:
        acc.setdefault(int(r["layer"]), []).append(float(r[key]))
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def write_attn_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "nmi", "kl"])
        for r in rows:
            w.writerow([r["layer"], r["head"], f"{r['nmi']:.9e}", f"{r['kl']:.9e}"])


def layer_grad_norms(model, images: np.ndarray, bits: np.ndarray, weights: Sequence[float] | None = None) -> "OrderedDict[str, float]":
    """L2 norm of each encoder layer's parameter gradients after one forward/backward."""
    images = np.asarray(images, dtype=model.dtype)
    total, _, _ = model.loss(images, bits, weights)
    groups = model.encoder.layer_params()
    params = [p for _, ps in groups for p in ps]
    grads = T.backward(total, params)
    out = OrderedDict()
    for name, ps in groups:
        sq = sum(float(np.sum(grads[p].astype(np.float64) ** 2)) for p in ps)
        out[name] = math.sqrt(sq)
    return out


def write_grad_norm_csv(norms: Mapping[str, float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "grad_norm"])
        for i, (name, v) in enumerate(norms.items()):
            w.writerow([i, f"{v:.9e}"])


def _heat_rgb(grid: np.ndarray, upscale: int) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    top = g.max()
    t = g / top if top > 0 else g
    rgb = np.stack([t, t * t, 1.0 - t], axis=-1)
    return np.repeat(np.repeat(rgb, upscale, axis=0), upscale, axis=1)


def dump_attention(model, image: np.ndarray, queries: Sequence[tuple[int, int]], layers: Sequence[int] | None = None,
                   out_dir=None, upscale: int = 8) -> dict:
    """Head-averaged attention rows of an unmasked pass, one grid per (query, layer).

    Query coordinates are (row, col) on the encoder input grid and are mapped
    to the layer's grid for pyramid stages. Writes a PPM heat map and a CSV
    per pair when ``out_dir`` is given.
    """
    image = np.asarray(image, dtype=model.dtype)
    if image.ndim == 3:
        image = image[None]
    g = model.encoder.cfg.grid
    for r, c in queries:
        if not (0 <= r < g and 0 <= c < g):
            raise ValueError(f"query ({r}, {c}) outside the {g}x{g} grid")
    layers = list(layers) if layers is not None else list(model.recipe.layers)
    with no_grad():
        _, out = model.predict(image, full_mask(model, 1))
    result = {}
    for layer in layers:
        if not 1 <= layer <= len(out.attention):
            raise ValueError(f"layer {layer} outside 1..{len(out.attention)}")
        attn = out.attention[layer - 1][0].mean(axis=0)
        side = out.layer_grid[layer - 1]
        index = out.layer_index[layer - 1][0]
        pos = {int(k): i for i, k in enumerate(index)}
        shrink = g // side
        for r, c in queries:
            q = pos[(r // shrink) * side + c // shrink]
            heat = np.zeros(side * side)
            heat[index] = attn[q]
            heat = heat.reshape(side, side)
            result[(r, c, layer)] = heat
            if out_dir is not None:
                out_dir = Path(out_dir)
                out_dir.mkdir(parents=True, exist_ok=True)
                stem = out_dir / f"attn_q{r}_{c}_layer{layer}"
                stem.with_suffix(".ppm").write_bytes(encode_ppm(_heat_rgb(heat, max(1, upscale * shrink))))
                with open(stem.with_suffix(".csv"), "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    for row in heat:
                        w.writerow([f"{v:.9e}" for v in row])
    return result


def pooled_features(model, images: np.ndarray, layer: int | None = None) -> np.ndarray:
    """Mean-pooled features of an unmasked pass at ``layer`` (default: top tap)."""
    images = np.asarray(images, dtype=model.dtype)
    layer = layer or model.recipe.layers[-1]
    with no_grad():
        out = model.encoder(
            patchify(images, model.encoder.cfg.patch_size),
            np.tile(np.arange(model.encoder.cfg.grid ** 2), (len(images), 1)),
            taps=[layer], stop_gradient=False,
        )
    return out.features[layer].data.mean(axis=1).astype(np.float64)


def linear_probe(model, images: np.ndarray, labels: np.ndarray, seed: int = 0, epochs: int = 200, lr: float = 1e-2,
                 train_frac: float = 0.5, test_images: np.ndarray | None = None,
                 test_labels: np.ndarray | None = None) -> dict:
    """Affine classifier on frozen, mean-pooled top-tap features.

    Trained full-batch with AdamW. Without an explicit test set the data is
    split by a seeded permutation. Returns train and test accuracy.
    """
    from .trainer import AdamW

    labels = np.asarray(labels, dtype=np.intp)
    feats = pooled_features(model, images)
    rng = np.random.default_rng(seed)
    if test_images is None:
        order = rng.permutation(len(feats))
        cut = max(1, int(round(train_frac * len(feats))))
        tr, te = order[:cut], order[cut:]
        x_tr, y_tr, x_te, y_te = feats[tr], labels[tr], feats[te], labels[te]
    else:
        x_tr, y_tr = feats, labels
        x_te, y_te = pooled_features(model, test_images), np.asarray(test_labels, dtype=np.intp)
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0) + 1e-6
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd
    n_classes = int(max(labels.max(), y_te.max() if len(y_te) else 0)) + 1
    clf = Linear(x_tr.shape[1], n_classes, rng)
    opt = AdamW((0.9, 0.999), 0.0)
    named = clf.named_parameters()
    xt = Tensor(x_tr)
    for _ in range(epochs):
        loss = T.cross_entropy(clf(xt), y_tr)
        grads = T.backward(loss, named.values())
        opt.update(named, {k: grads[p] for k, p in named.items()}, lr)
    with no_grad():
        acc_tr = float((clf(xt).data.argmax(axis=1) == y_tr).mean())
        acc_te = float((clf(Tensor(x_te)).data.argmax(axis=1) == y_te).mean()) if len(y_te) else float("nan")
    return {"train_accuracy": acc_tr, "test_accuracy": acc_te, "classes": n_classes}


# ---------------------------------------------------------------- SVG charts


class CSVFormatError(ValueError):
    pass


def read_series(path, x: str, ys: Sequence[str]) -> dict[str, tuple[list[float], list[float]]]:
    """Numeric columns from a CSV; malformed rows are reported by line number."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file (no header)") from None
        for col in [x, *ys]:
            if col not in header:
                raise CSVFormatError(f"{path}: line 1: missing column {col!r}")
        xi = header.index(x)
        out = {y: ([], []) for y in ys}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CSVFormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                xv = float(row[xi])
                for y in ys:
                    out[y][0].append(xv)
                    out[y][1].append(float(row[header.index(y)]))
            except ValueError:
                raise CSVFormatError(f"{path}: line {lineno}: non-numeric value") from None
    return out


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
               xlabel: str = "", ylabel: str = "", width: int = 640, height: int = 400) -> str:
    """Standalone SVG line chart; identical input gives identical bytes."""
    left, right, top, bottom = 70, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs = [v for xs_, _ in series.values() for v in xs_]
    ys = [v for _, ys_ in series.values() for v in ys_]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{_esc(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{_fmt(sx(t))}" y1="{top + ph}" x2="{_fmt(sx(t))}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(sx(t))}" y="{top + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{_fmt(sy(t))}" x2="{left}" y2="{_fmt(sy(t))}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{_fmt(sy(t) + 4)}" text-anchor="end" font-family="sans-serif" font-size="11">{t:.4g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {top + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for i, (name, (sx_, sy_)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        if len(sx_) >= 2:
            pts = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(sx_, sy_))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        elif len(sx_) == 1:
            out.append(f'<circle cx="{_fmt(sx(sx_[0]))}" cy="{_fmt(sy(sy_[0]))}" r="2.5" fill="{color}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}" font-family="sans-serif" font-size="11">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_plots(csv_paths: Sequence, chart: Mapping, out_path) -> str:
    """Render one chart from one or more CSVs.

    ``chart`` keys: ``x`` (column), ``y`` (list of columns), optional
    ``title``, ``xlabel``, ``ylabel``, ``labels`` (one per CSV).
    """
    ys = list(chart["y"])
    labels = chart.get("labels") or [Path(p).stem for p in csv_paths]
    series = {}
    for path, label in zip(csv_paths, labels):
        cols = read_series(path, chart["x"], ys)
        for y in ys:
            key = label if len(ys) == 1 else f"{label}:{y}"
            series[key] = cols[y]
    svg = line_chart(series, chart.get("title", ""), chart.get("xlabel", chart["x"]), chart.get("ylabel", ", ".join(ys)))
    Path(out_path).write_text(svg)
    return svg
