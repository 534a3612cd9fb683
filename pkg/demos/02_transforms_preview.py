"""Where the patch lands and how it gets distorted.

Each person box gets its own random draw: a cloth-like thin plate spline warp,
a blur that grows as the person gets smaller (farther away), a rotation and
shift, and finally image-wide lighting changes.  This script writes a strip of
composites so the randomisation can be inspected by eye.
"""
from pathlib import Path

import torch

from ensemble_patch.data import save_image
from ensemble_patch.patch import init_patch
from ensemble_patch.synthetic import make_dataset
from ensemble_patch.transforms import TransformConfig, apply_patch, sample_draw

out = Path("demo_out")
out.mkdir(exist_ok=True)

patch = init_patch(32, 32, "random-uniform", seed=0)
scenes = make_dataset(4, size=64, seed=2, max_persons=2)
cfg = TransformConfig(patch_scale=0.3)

tiles = []
for i, scene in enumerate(scenes):
    draw = sample_draw(cfg, seed=7, image_index=i, n_boxes=len(scene.boxes), image_size=scene.size)
    adv, mask = apply_patch(patch, scene, cfg, draw, return_mask=True)
    angles = [f"{b.angle:+.1f}" for b in draw.boxes]
    print(f"scene {i}: {len(scene.boxes)} boxes, angles {angles}, "
          f"contrast {draw.contrast:.2f}, patched pixels {int(mask.sum())}")
    tiles.append(torch.cat([scene.image, adv.image], dim=1))

save_image(torch.cat(tiles, dim=2), out / "transforms_strip.png")
print("clean (top) vs patched (bottom) written to", out / "transforms_strip.png")

# Same seed, same draw: the pipeline is reproducible.
a = apply_patch(patch, scenes[0], cfg, sample_draw(cfg, 7, 0, len(scenes[0].boxes), (64, 64)))
b = apply_patch(patch, scenes[0], cfg, sample_draw(cfg, 7, 0, len(scenes[0].boxes), (64, 64)))
print("repeatable:", torch.equal(a.image, b.image))
