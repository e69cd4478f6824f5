"""Command-line shell: config loading, subcommand dispatch and experiment drivers."""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from . import tensorfile
from .config import ConfigError, RunConfig, from_dict, parse_config, with_overrides
from .data import load_ppm, make_mask, synth_shapes, write_manifest
from .descriptors import build_target_bundle
from .diagnostics import (
    attention_stats,
    dump_attention,
    emit_plots,
    layer_grad_norms,
    layer_summary,
    line_chart,
    linear_probe,
    write_attn_csv,
    write_grad_norm_csv,
)
from .tensor import Prng
from .trainer import CheckpointError, build_model, load_checkpoint, load_model, make_batch_masks, make_recipe, run_pretrain

log = logging.getLogger("localmim")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- data


def load_dataset(cfg: RunConfig) -> np.ndarray:
    m, d = cfg.model, cfg.data
    if d.source == "synthetic":
        imgs = synth_shapes(d.seed, m.img_size, m.img_size, m.in_chans, d.count)
        return np.stack([im.pixels for im in imgs])
    files = sorted(Path(d.path).glob("*.ppm"))[: d.count]
    if len(files) < d.count:
        raise ConfigError("data.count", f"found {len(files)} PPM files in {d.path}, need {d.count}")
    out = np.stack([load_ppm(f).pixels for f in files])
    if out.shape[1:] != (m.img_size, m.img_size, m.in_chans):
        raise ConfigError("data.path", f"images are {out.shape[1:]}, model expects {m.img_size}x{m.img_size}x{m.in_chans}")
    return out


# ---------------------------------------------------------------- gradient check


def micro_config(seed: int = 0, descriptor: str = "pixel") -> RunConfig:
    """Columnar 4x4 grid, width 16, depth 4, taps [2, 4] at scales [8, 2], float64."""
    return from_dict({
        "model": {"arch": "columnar", "img_size": 16, "patch_size": 4, "embed_dim": 16, "depth": 4,
                  "num_heads": 2, "taps": [2, 4], "scales": [8, 2], "decoder": {"dim": 16, "heads": 2, "blocks": 1}},
        "train": {"dtype": "float64", "seed": seed, "descriptor": descriptor, "batch_size": 2, "epochs": 2,
                  "warmup_epochs": 1},
        "data": {"count": 2, "seed": seed},
        "out_dir": "gradcheck",
    })


def micro_batch(cfg: RunConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two synthetic images and masks with at least one fully masked 2x2 block each."""
    images = load_dataset(cfg)
    rng = np.random.default_rng(seed)
    g = cfg.grid
    masks = []
    while len(masks) < len(images):
        bits = make_mask("random", g, cfg.train.mask_ratio, rng).bits
        if bits.reshape(g // 2, 2, g // 2, 2).all(axis=(1, 3)).any():
            masks.append(bits)
    return images, np.stack(masks)


def gradcheck(seed: int = 0, n_coords: int = 50, eps: float = 1e-3, descriptor: str = "pixel") -> float:
    """Worst relative error of the full micro model's traced gradient vs central differences."""
    cfg = micro_config(seed, descriptor)
    model = build_model(cfg)
    images, bits = micro_batch(cfg, seed)

    def f():
        return model.loss(images, bits)[0]

    return T.finite_diff_check(f, model.parameters(), eps=eps, n_coords=n_coords, rng=np.random.default_rng(seed))


# ---------------------------------------------------------------- decoupling comparison


def run_decoupling(cfg: RunConfig, data: np.ndarray, out_dir, steps: int | None = None,
                   modes: Sequence[str] = ("global-single", "global-multi", "local-single", "local-multi", "fusion")) -> dict:
    """Train every mode on the same data order and masks; emit comparison CSV/SVG and an NMI report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    probe_imgs = data[: min(8, len(data))]
    results, nmi = {}, {}
    for mode in modes:
        mcfg = with_overrides(cfg, mode=mode, grad_isolated=False)
        res = run_pretrain(mcfg, data, out_dir / mode, max_steps=steps)
        results[mode] = res
        model = load_model(mcfg, res.checkpoint)
        nmi[mode] = layer_summary(attention_stats(model, probe_imgs), "nmi")
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "steps", "loss_first10", "loss_last10"] + [f"nmi_layer{l}" for l in next(iter(nmi.values()))])
        for mode, res in results.items():
            losses = [float(r["loss_total"]) for r in res.rows]
            w.writerow([mode, len(losses), f"{np.mean(losses[:10]):.9e}", f"{np.mean(losses[-10:]):.9e}"]
                       + [f"{v:.9e}" for v in nmi[mode].values()])
    (out_dir / "nmi_by_layer.svg").write_text(line_chart(
        {m: (list(v.keys()), list(v.values())) for m, v in nmi.items()},
        "query-key NMI per layer", "layer", "NMI"))
    (out_dir / "loss_by_step.svg").write_text(line_chart(
        {m: ([float(r["step"]) for r in res.rows], [float(r["loss_total"]) for r in res.rows]) for m, res in results.items()},
        "training loss", "step", "loss_total"))
    lower = [l for l in next(iter(nmi.values())) if l <= max(1, len(next(iter(nmi.values()))) // 2)]
    report = {
        "lower_layers": lower,
        "nmi_lower_mean": {m: float(np.mean([v[l] for l in lower])) for m, v in nmi.items()},
    }
    if "local-multi" in nmi and "global-single" in nmi:
        report["local_multi_higher_lower_layer_nmi"] = (
            report["nmi_lower_mean"]["local-multi"] > report["nmi_lower_mean"]["global-single"])
    (out_dir / "nmi_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return {"results": results, "nmi": nmi, "report": report}


# ---------------------------------------------------------------- CLI


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="localmim", description="Local multi-scale masked image modeling at desk scale.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        sp.add_argument("--mode", default=None, help="training mode override")
        sp.add_argument("--grad-isolated", action="store_true", default=None)

    sp = sub.add_parser("pretrain", help="run pretraining")
    common(sp)
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")
    sp.add_argument("--max-steps", type=int, default=None)

    sp = sub.add_parser("targets", help="export a target bundle for one image")
    common(sp)
    sp.add_argument("--image", default=None, help="P6 image; default is the first dataset image")

    sp = sub.add_parser("probe", help="attention statistics or gradient norms from a checkpoint")
    sp.add_argument("kind", choices=["nmi", "kl", "gradnorm"])
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--masked", action="store_true", help="use the masked forward pass for attention")
    sp.add_argument("--images", type=int, default=8)

    sp = sub.add_parser("attn", help="dump attention heat maps")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", default=None)
    sp.add_argument("--query", action="append", default=[], help="row,col on the encoder grid (repeatable)")
    sp.add_argument("--layers", default=None, help="comma-separated layer indices")

    sp = sub.add_parser("gradcheck", help="finite-difference check of the micro model")
    common(sp, config=False)
    sp.add_argument("--coords", type=int, default=50)
    sp.add_argument("--eps", type=float, default=1e-3)

    sp = sub.add_parser("plot", help="render CSV columns as an SVG line chart")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--x", required=True)
    sp.add_argument("--y", required=True, help="comma-separated columns")
    sp.add_argument("--title", default="")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("probe-linear", help="linear probe on frozen features")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", type=int, default=64)

    sp = sub.add_parser("compare", help="train every mode on shared masks and compare")
    common(sp)
    sp.add_argument("--max-steps", type=int, default=None)
    return p


def _load_cfg(args) -> RunConfig:
    cfg = parse_config(args.config)
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.grad_isolated:
        overrides["grad_isolated"] = True
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = with_overrides(cfg, **overrides)
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _image(args, cfg) -> np.ndarray:
    if args.image:
        return load_ppm(args.image).pixels
    return load_dataset(cfg)[0]


def _cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    data = load_dataset(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if cfg.data.source == "synthetic":
        write_manifest(out / "dataset.json", cfg.data.seed, cfg.data.count, cfg.model.img_size, cfg.model.img_size, cfg.model.in_chans)
    resume = load_checkpoint(args.resume, expected_digest=cfg.digest()) if args.resume else None
    res = run_pretrain(cfg, data, out, resume=resume, max_steps=args.max_steps)
    print(f"steps={res.checkpoint.step} final_loss={res.rows[-1]['loss_total'] if res.rows else 'n/a'} metrics={res.metrics_path}")
    return EXIT_OK


def _cmd_targets(args) -> int:
    cfg = _load_cfg(args)
    img = _image(args, cfg)
    recipe = make_recipe(cfg)
    rng = Prng(cfg.train.seed).stream("mask", 0)
    base = make_mask(cfg.train.mask_strategy, cfg.grid, cfg.train.mask_ratio, rng,
                     cfg.grid // 8 if cfg.model.arch == "pyramid" else None)
    bundle = build_target_bundle(img, recipe, cfg.train.descriptor, base)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"descriptor": cfg.train.descriptor, "taps": []}
    for tap, t in zip(recipe.taps, bundle.taps):
        name = f"tap{tap.layer}_s{t.scale}.lmim"
        tensorfile.save(out / name, {"target": t.target, "mask": t.mask.astype(np.float64)})
        manifest["taps"].append({"layer": tap.layer, "scale": t.scale, "width": t.width, "file": name,
                                 "mask_sha256": t.mask_digest(), "masked": int(t.mask.sum())})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(bundle.taps)} tap files to {out}")
    return EXIT_OK


def _model_from_ckpt(args, cfg):
    ckpt = load_checkpoint(args.checkpoint)
    return load_model(cfg, ckpt), ckpt


def _cmd_probe(args) -> int:
    cfg = _load_cfg(args)
    model, ckpt = _model_from_ckpt(args, cfg)
    data = load_dataset(cfg)[: args.images]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "gradnorm":
        bits = make_batch_masks(cfg, ckpt.step + 1, len(data), Prng(cfg.train.seed))
        norms = layer_grad_norms(model, data, bits)
        write_grad_norm_csv(norms, out / "grad_norms.csv")
        for name, v in norms.items():
            print(f"{name},{v:.6e}")
        return EXIT_OK
    bits = make_batch_masks(cfg, ckpt.step + 1, len(data), Prng(cfg.train.seed)) if args.masked else None
    rows = attention_stats(model, data, bits)
    write_attn_csv(rows, out / "attention_stats.csv")
    key = args.kind
    for layer, v in layer_summary(rows, key).items():
        print(f"layer {layer} {key}={v:.6f}")
    return EXIT_OK


def _cmd_attn(args) -> int:
    cfg = _load_cfg(args)
    model, _ = _model_from_ckpt(args, cfg)
    img = _image(args, cfg)
    try:
        queries = [tuple(int(v) for v in q.split(",")) for q in args.query] or [(cfg.grid // 2, cfg.grid // 2)]
        layers = [int(v) for v in args.layers.split(",")] if args.layers else None
    except ValueError as exc:
        raise UsageError(f"bad --query/--layers value: {exc}") from None
    maps = dump_attention(model, img, queries, layers, Path(cfg.out_dir) / "attention")
    print(f"wrote {len(maps)} attention maps to {Path(cfg.out_dir) / 'attention'}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    err = gradcheck(seed, n_coords=args.coords, eps=args.eps)
    print(f"max relative error: {err:.3e}")
    return EXIT_OK if err <= 1e-4 else EXIT_RUNTIME


def _cmd_plot(args) -> int:
    chart = {"x": args.x, "y": args.y.split(","), "title": args.title}
    emit_plots(args.csv, chart, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_probe_linear(args) -> int:
    cfg = _load_cfg(args)
    model, _ = _model_from_ckpt(args, cfg)
    imgs = synth_shapes(cfg.data.seed + 1, cfg.model.img_size, cfg.model.img_size, cfg.model.in_chans, args.images)
    pixels = np.stack([im.pixels for im in imgs])
    # label: is the image brighter than the set's median
    brightness = pixels.mean(axis=(1, 2, 3))
    labels = (brightness > np.median(brightness)).astype(int)
    res = linear_probe(model, pixels, labels, seed=cfg.train.seed)
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def _cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    res = run_decoupling(cfg, load_dataset(cfg), cfg.out_dir, steps=args.max_steps)
    print(json.dumps(res["report"], sort_keys=True))
    return EXIT_OK


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "targets": _cmd_targets,
    "probe": _cmd_probe,
    "attn": _cmd_attn,
    "gradcheck": _cmd_gradcheck,
    "plot": _cmd_plot,
    "probe-linear": _cmd_probe_linear,
    "compare": _cmd_compare,
}


def _thread_limit():
    n = os.environ.get("LMIM_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; 0 on success, 1 on invalid input, 2 on runtime failure."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return _COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - the CLI maps every other failure to exit 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())
