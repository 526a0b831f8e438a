"""Generate a small dataset, train two models, compare them, and save an overlay.

This is a scaled-down version of the default benchmark (it runs in
under a minute); expect noisy numbers at this size.

Run:  python demos/03_small_end_to_end.py [out_dir]
"""

import sys
from pathlib import Path

from xview.cli import render_overlay
from xview.model import ModelConfig
from xview.synthgen import make_dataset
from xview.training import TrainConfig, alignment_distance, evaluate, train

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out_dir.mkdir(parents=True, exist_ok=True)

ds = make_dataset(seed=7, n_train=240, n_val=64)
val = ds.samples("val")
print(f"{len(ds.samples('train'))} training pairs, {len(val)} validation pairs")
print("visible in target view:", sum(s.visible_target for s in val), "of", len(val))

small = dict(model=ModelConfig(dim=16), epochs_s1=2, epochs_s2=3, seed=7)
models = {}
for name, mc, xo in (("base", False, False), ("full", True, True)):
    cfg = TrainConfig(mcfuse_enabled=mc, xobjalign_enabled=xo, **small)
    model, losses, _ = train(cfg, ds.samples("train"))
    models[name] = model
    print(f"{name}: stage-2 mask loss per epoch", [round(x, 3) for x in losses["s2"].l_mask])

for name, model in models.items():
    for mode in ("dual", "visual_only", "memory"):
        if name == "base" and mode != "dual":
            continue
        r = evaluate(model, ds.val, mode)
        print(f"{name:5s} {mode:11s} IoU {100 * r.iou:5.1f}  LE {r.le:.3f}  CA {r.ca:.3f}  VA {r.va:5.1f}")
    print(f"{name:5s} alignment distance {alignment_distance(model, val):.4f}")

# overlay: query on the left; prediction in cyan and the true boundary in red on the right
s = next(s for s in val if s.visible_query and s.visible_target)
pred = models["full"].predict_mask(s.query_image, s.query_mask, s.text_category, s.target_image)
render_overlay(s, pred, out_dir / "overlay.ppm")
print("wrote", out_dir / "overlay.ppm")
