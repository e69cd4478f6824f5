"""Inspect the multi-scale supervision for one synthetic image.

Each tap reconstructs a different grid: fine taps see small regions and
coarse taps see large ones. The mask is drawn once on the patch grid and
rescaled per tap, so a coarse cell counts as masked only when every patch
under it is hidden.
"""
import numpy as np

from localmim.config import from_dict
from localmim.data import random_mask, synth_shapes
from localmim.descriptors import build_target_bundle
from localmim.trainer import make_recipe

cfg = from_dict({
    "model": {"img_size": 64, "patch_size": 8, "embed_dim": 32, "depth": 8, "num_heads": 4},
    "out_dir": "demo_targets",
})
recipe = make_recipe(cfg)
img = synth_shapes(3, 64, 64)[0].pixels
mask = random_mask(cfg.grid ** 2, 0.75, np.random.default_rng(0))

for descriptor in ("hog", "pixel"):
    bundle = build_target_bundle(img, recipe, descriptor, mask)
    print(f"{descriptor}:")
    for tap, t in zip(recipe.taps, bundle.taps):
        print(f"  layer {tap.layer:>2}  grid {t.scale:>2}x{t.scale:<2}  width {t.width:>4}  "
              f"masked {int(t.mask.sum()):>4}/{t.scale ** 2}")
