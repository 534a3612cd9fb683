"""Measuring an attack: AP drop, attack success rate and attention shift.

A short training run produces a patch, which is then pasted onto a held-out
set.  Person AP is compared on clean and patched images, ASR counts images
where every patched person vanished, and Grad-CAM shows how much of the
person box the detector stopped looking at.
"""
from pathlib import Path

import torch

from ensemble_patch.detectors import make_toy_detector
from ensemble_patch.ensemble import TrainConfig, train
from ensemble_patch.evaluation import (disruption_area_ratio, evaluate_patch, grad_cam,
                                       person_score_target, save_heatmap)
from ensemble_patch.synthetic import make_dataset
from ensemble_patch.transforms import TransformConfig, apply_patch, sample_draw

out = Path("demo_out")
out.mkdir(exist_ok=True)

model = make_toy_detector(seed=2, person_gain=1.0, inhibit_angle=270, name="B")
tcfg = TransformConfig()
patch, _ = train(make_dataset(16, seed=1), [model],
                 TrainConfig(epochs=40, batch_size=8, patch_size=(32, 32), seed=0), tcfg)

test = make_dataset(24, seed=99)
report = evaluate_patch(patch, test, model, tcfg, seed=5)
print(f"AP clean {report.ap_clean:.1f}  patched {report.ap_adv:.1f}  "
      f"drop {report.ap_drop:.1f}  ASR {report.asr:.2f}")

scene = test[0]
draw = sample_draw(tcfg, 5, 0, len(scene.boxes), scene.size)
with torch.no_grad():
    adv = apply_patch(patch, scene, tcfg, draw).image
target = person_score_target(model)
h_clean = grad_cam(model, scene.image, target, "trunk")
h_adv = grad_cam(model, adv, target, "trunk")
person = next(b for b in scene.boxes if b.class_id == 0)
print(f"disruption area ratio inside the person box: "
      f"{disruption_area_ratio(h_clean, h_adv, person):.2f}")
save_heatmap(h_clean, out / "cam_clean.png")
save_heatmap(h_adv, out / "cam_patched.png")
print("heatmaps written to", out)
