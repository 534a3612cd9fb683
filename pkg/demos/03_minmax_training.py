"""Training one patch against two detectors at once.

Detector A is ten times more sensitive to persons than detector B and each is
fooled by a different colour.  The min-max scheme moves weight onto whichever
detector is currently hardest to fool, while averaging keeps the weights at
one half each.  On this small problem both end up close; watch how the
dynamic weights drift toward A once B stops firing.  Runs in under a minute.
"""
import numpy as np

from ensemble_patch.detectors import make_toy_detector
from ensemble_patch.ensemble import TrainConfig, compute_energies, train
from ensemble_patch.patch import init_patch
from ensemble_patch.synthetic import make_dataset
from ensemble_patch.transforms import TransformConfig

data = make_dataset(16, seed=1)
models = [make_toy_detector(seed=1, person_gain=10.0, inhibit_angle=150, name="A"),
          make_toy_detector(seed=2, person_gain=1.0, inhibit_angle=270, name="B")]
tcfg = TransformConfig()

start = compute_energies(init_patch(32, 32, seed=0), data, models, tcfg, round_index=10**6)
print("person energy with the random starting patch:", np.round(start.per_model_obj, 3))

for mode in ("dynamic", "average"):
    cfg = TrainConfig(epochs=100, batch_size=8, patch_size=(32, 32), mode=mode, seed=0)
    patch, rows = train(data, models, cfg, tcfg)
    end = compute_energies(patch, data, models, tcfg, round_index=10**6)
    print(f"\n{mode}: final energies {np.round(end.per_model_obj, 3)}, "
          f"gap {abs(end.per_model_obj[0] - end.per_model_obj[1]):.4f}")
    for r in rows[::40] + rows[-1:]:
        print(f"  step {r.step:>3}  losses {np.round(r.losses, 3)}  w {np.round(r.w, 3)}")
