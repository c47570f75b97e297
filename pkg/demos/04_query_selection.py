"""Uncertainty, regional impurity, and budgeted query selection.

Renders the score maps for one shifted slice and overlays the selected
pixel- and patch-mode queries under a 1% budget.
"""

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from streamadapt import (
    GeneratorConfig,
    ShiftSpec,
    acquisition_score,
    apply_shift,
    entropy_map,
    generate_synthetic_volume,
    impurity_map,
    normalize,
    select_patches,
    select_pixels,
    uncertainty_map,
)
from streamadapt.model import infer, load_checkpoint

OUT = os.path.join(os.path.dirname(__file__), "output")
CKPT = os.path.join(OUT, "demo_checkpoint")
if not os.path.exists(os.path.join(CKPT, "model.pt")):
    raise SystemExit("run 02_source_pretraining.py first")
model, _ = load_checkpoint(CKPT)

gen = GeneratorConfig(image_size=64, n_slices=16)
volume = apply_shift(
    generate_synthetic_volume(gen, seed=5),
    ShiftSpec(gamma=1.2, contrast_warp=0.25, swap_strength=0.8,
              bias_field_strength=0.2, noise_sigma=0.06, seed=9))
img = normalize(volume.slices[8])
probs = infer(model, [img], bn_mode="image")[0]
pseudo = probs.argmax(axis=0)

ent = entropy_map(probs)
unc = uncertainty_map(ent, "pixel")
imp = impurity_map(pseudo, patch_side=3)
score = acquisition_score(unc, imp)

pixels = select_pixels(score, b=1.0)
patches = select_patches(score, b=4.0, patch_side=5)
print(f"budget 1%: {pixels.pixels_covered} pixels; "
      f"patch mode at 4%: {len(patches.patches)} patches "
      f"({patches.pixels_covered} px)")

fig, axes = plt.subplots(1, 5, figsize=(16, 3.4))
panels = [
    (img.pixels, "shifted slice", "gray"),
    (ent, "entropy", "magma"),
    (imp, "regional impurity", "magma"),
    (score, "acquisition score", "magma"),
    (img.pixels, "selected queries", "gray"),
]
for ax, (data, title, cmap) in zip(axes, panels):
    ax.imshow(data, cmap=cmap)
    ax.set_title(title, fontsize=9)
    ax.axis("off")
xs = [x for x, _ in pixels.pixels]
ys = [y for _, y in pixels.pixels]
axes[4].scatter(xs, ys, s=4, c="#ffe14d", marker="s")
for cx, cy, side in patches.patches:
    r = side // 2
    axes[4].add_patch(plt.Rectangle((cx - r - 0.5, cy - r - 0.5), side, side,
                                    fill=False, edgecolor="#5ad45a", lw=1.2))
fig.tight_layout()
fig.savefig(os.path.join(OUT, "query_selection.png"), dpi=110)
print(f"wrote {OUT}/query_selection.png")
