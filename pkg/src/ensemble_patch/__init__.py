"""Universal adversarial patches against an ensemble of object detectors."""
from .patch import (LossWeights, PrintPalette, init_patch, nps_loss, smoothness_loss,
                    total_energy, read_palette, grid_palette)
from .transforms import BoundingBox, LabeledImage, TransformConfig, apply_patch, sample_draw
from .detectors import DetectorAdapter, Candidates, make_toy_detector, obj_energy, build_adapter
from .ensemble import (TrainConfig, simplex_project, inner_max_step, train, compute_energies,
                       TrainingError, TrainingDiverged)
from .evaluation import compute_ap, compute_asr, nms, grad_cam, disruption_area_ratio, hue_similarity
from .data import RunConfig, load_dataset, build_palette, export_adv_dataset, load_config
from .synthetic import make_dataset

__version__ = "0.1.0"
