"""Pretrain a tiny columnar model for a few hundred steps and chart the loss.

Usage: python demos/02_pretrain_tiny.py [out_dir]
"""
import sys
from pathlib import Path

from localmim.config import from_dict
from localmim.diagnostics import emit_plots
from localmim.harness import load_dataset
from localmim.trainer import run_pretrain

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_pretrain")
cfg = from_dict({
    "model": {"img_size": 64, "patch_size": 8, "embed_dim": 64, "depth": 8, "num_heads": 4,
              "decoder": {"dim": 64, "heads": 2, "blocks": 1}},
    "train": {"batch_size": 16, "epochs": 10, "warmup_epochs": 1, "base_lr": 1.5e-2,
              "descriptor": "pixel", "dtype": "float32"},
    "data": {"count": 320},
    "out_dir": str(out),
})

res = run_pretrain(cfg, load_dataset(cfg), out)
first, last = res.rows[0], res.rows[-1]
print(f"{len(res.rows)} steps: loss {float(first['loss_total']):.3f} -> {float(last['loss_total']):.3f}")

# every tap has its own column, so the fine and coarse losses can be compared
taps = [k for k in last if k.startswith("loss_tap")]
emit_plots([res.metrics_path], {"x": "step", "y": ["loss_total"] + taps, "title": "tiny pretraining"},
           out / "loss.svg")
print(f"chart: {out / 'loss.svg'}")
