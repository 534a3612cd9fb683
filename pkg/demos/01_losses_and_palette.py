"""Patch-intrinsic losses and building a printable palette.

A patch is a (3, H, W) tensor in [0, 1].  Two penalties keep it printable:
the non-printability score (distance of every pixel to the nearest colour the
printer can reproduce) and total variation (neighbouring pixels should not
jump).  The printable colours come from measured print swatches, reduced to a
small representative set.
"""
import numpy as np
import torch

from ensemble_patch.data import build_palette
from ensemble_patch.patch import (LossWeights, grid_palette, init_patch, nps_loss,
                                  smoothness_loss, total_energy)

# Pretend these are 500 swatches measured off a printer.  Real printers lose
# saturation, so squash the cube toward gray.
rng = np.random.default_rng(0)
measured = 0.15 + 0.7 * rng.uniform(size=(500, 3))
palette = build_palette(measured, target_count=30)
print(f"reduced {len(measured)} measured colours to {len(palette)}")

noisy = init_patch(64, 64, "random-uniform", seed=1)
flat = torch.full((3, 64, 64), 0.5, dtype=torch.float64)

for name, p in [("random", noisy), ("gray", flat)]:
    nps = float(nps_loss(p, palette, "mean"))
    tv = float(smoothness_loss(p, "mean"))
    print(f"{name:>7}: nps/pixel {nps:.4f}  tv/element {tv:.4f}")

# The pixel energy from detectors is combined with both penalties.
print("total for (obj=1, nps=2, tv=3):", total_energy(1, 2, 3, LossWeights()))

# A palette containing the patch's own colours makes NPS vanish.
print("nps against the 6-level RGB grid for a grid colour:",
      float(nps_loss(torch.full((3, 2, 2), 0.6, dtype=torch.float64), grid_palette())))
