"""Detector adapters and the person-category objective energy.

Every adapter returns *raw* candidates (before non-maximum suppression) as
tensors so gradients can flow from the confidences back into the input
pixels.  Real one-/two-stage detectors plug in by subclassing
:class:`DetectorAdapter`; the package itself ships only :class:`ToyDetector`,
a tiny grid detector used for tests and demos.
"""
from __future__ import annotations

import importlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .transforms import BoundingBox

__all__ = [
    "Candidate",
    "Candidates",
    "DetectorAdapter",
    "ToyDetector",
    "make_toy_detector",
    "prepare_images",
    "person_confidence",
    "obj_energy",
    "build_adapter",
]

KINDS = ("one-stage", "two-stage", "toy")


@dataclass
class Candidate:
    """One detached candidate box, for inspection and reporting."""

    box: BoundingBox
    objectness: float
    class_scores: np.ndarray


@dataclass
class Candidates:
    """All raw candidates of one image.

    ``boxes`` is ``(N, 4)`` normalised ``(cx, cy, w, h)``, ``objectness`` is
    ``(N,)`` and ``class_scores`` is ``(N, C)``; every score lies in [0, 1].
    """

    boxes: torch.Tensor
    objectness: torch.Tensor
    class_scores: torch.Tensor

    def __len__(self):
        return int(self.objectness.shape[0])

    def __getitem__(self, j) -> Candidate:
        b = self.boxes[j].detach().double().clamp(0, 1).tolist()
        # clip so the box stays inside the frame
        w = max(min(b[2], 2 * b[0], 2 * (1 - b[0])), 1e-9)
        h = max(min(b[3], 2 * b[1], 2 * (1 - b[1])), 1e-9)
        scores = self.class_scores[j].detach().cpu().numpy()
        return Candidate(BoundingBox(int(np.argmax(scores)), b[0], b[1], w, h),
                         float(self.objectness[j]), scores)

    def detach(self) -> "Candidates":
        return Candidates(self.boxes.detach(), self.objectness.detach(),
                          self.class_scores.detach())


class DetectorAdapter(nn.Module):
    """Uniform interface over detectors.

    Subclasses implement :meth:`predict`, mapping a ``(B, 3, H, W)`` batch in
    [0, 1] to one :class:`Candidates` per image.
    """

    def __init__(self, name: str, kind: str, person_class_index: int,
                 input_size, num_classes: int):
        super().__init__()
        if kind not in KINDS:
            raise ValueError(f"unknown detector kind {kind!r}")
        if not 0 <= person_class_index < num_classes:
            raise ValueError("person_class_index outside the class range")
        self.name = name
        self.kind = kind
        self.person_class_index = person_class_index
        self.input_size = tuple(int(s) for s in input_size)
        self.num_classes = num_classes

    def predict(self, images: torch.Tensor) -> list:
        raise NotImplementedError

    def forward(self, images: torch.Tensor) -> list:
        if images.ndim != 4 or images.shape[1] != 3 or tuple(images.shape[2:]) != self.input_size:
            raise ValueError(f"{self.name}: expected (B, 3, {self.input_size[0]}, "
                             f"{self.input_size[1]}) input, got {tuple(images.shape)}")
        return self.predict(images)

    def person_scores(self, cands: Candidates) -> torch.Tensor:
        return person_confidence(cands, self.kind, self.person_class_index)


def prepare_images(images, size) -> torch.Tensor:
    """Stack images and bilinearly resize them to ``size`` where needed."""
    out = []
    for img in images:
        if tuple(img.shape[1:]) != tuple(size):
            img = F.interpolate(img[None], size=tuple(size), mode="bilinear",
                                align_corners=False)[0]
        out.append(img)
    return torch.stack(out)


def person_confidence(cands: Candidates, kind: str = "one-stage", person_index: int = 0):
    """Per-candidate person confidence.

    One-stage (and toy) detectors use ``objectness * p(person)``; two-stage
    adapters report the proposal's person score in ``class_scores`` directly.
    """
    if kind == "two-stage":
        return cands.class_scores[:, person_index]
    return cands.objectness * cands.class_scores[:, person_index]


def obj_energy(cands: Candidates, mu: float = 0.4, kind: str = "one-stage",
               person_index: int = 0):
    """Sum of the person confidences that exceed ``mu``."""
    s = person_confidence(cands, kind, person_index)
    return (s * (s > mu).to(s.dtype)).sum()


class ToyDetector(DetectorAdapter):
    """A grid detector small enough to run thousands of times on a CPU.

    ``trunk`` (3x3 conv + tanh) -> average pool to ``grid x grid`` cells ->
    ``head`` (3x3 conv over cells) emitting box, objectness and class logits.
    See :func:`make_toy_detector` for how the weights are laid out.
    """

    def __init__(self, name="toy", grid=4, num_classes=3, features=8,
                 input_size=(64, 64), person_class_index=0):
        super().__init__(name, "toy", person_class_index, input_size, num_classes)
        self.grid = grid
        self.trunk = nn.Sequential(nn.Conv2d(3, features, 3, padding=1), nn.Tanh())
        self.head = nn.Conv2d(features, 5 + num_classes, 3, padding=1)

    def features(self, images):
        return self.trunk(images)

    def predict(self, images):
        fmap = self.trunk(images)
        cells = F.adaptive_avg_pool2d(fmap, self.grid)
        out = self.head(cells)  # (B, 5 + C, g, g)
        b, _, g, _ = out.shape
        out = out.permute(0, 2, 3, 1).reshape(b, g * g, -1)
        idx = torch.arange(g, dtype=out.dtype)
        gy, gx = torch.meshgrid(idx, idx, indexing="ij")
        cx = (gx.reshape(-1) + torch.sigmoid(out[..., 0])) / g
        cy = (gy.reshape(-1) + torch.sigmoid(out[..., 1])) / g
        boxes = torch.stack([cx, cy, torch.sigmoid(out[..., 2]),
                             torch.sigmoid(out[..., 3])], dim=-1)
        obj = torch.sigmoid(out[..., 4])
        cls = torch.sigmoid(out[..., 5:])
        return [Candidates(boxes[i], obj[i], cls[i]) for i in range(b)]


def make_toy_detector(seed: int = 0, grid: int = 4, classes: int = 3, person_gain: float = 1.0,
                      input_size=(64, 64), features: int = 8, inhibit_angle: float | None = None,
                      name=None, dtype=torch.float64) -> ToyDetector:
    """Build a :class:`ToyDetector` with weights derived from ``seed``.

    Channel 0 of the trunk measures redness and excites the objectness and
    person logits.  Channel 1 fires on one chroma direction (``inhibit_angle``
    in degrees, measured from green-minus-blue toward red-minus-cyan; drawn
    from the non-red half plane when ``None``) and suppresses the person
    logit, so every toy detector has its own colour it can be fooled by.
    ``person_gain`` scales the person logit: a detector with gain 10 is ten
    times more sensitive to person evidence than one with gain 1.
    """
    if grid < 1 or classes < 2:
        raise ValueError("need grid >= 1 and classes >= 2")
    if features < 2:
        raise ValueError("need at least two trunk features")
    gen = torch.Generator().manual_seed(int(seed))

    def randn(*shape, std):
        return torch.randn(shape, generator=gen, dtype=torch.float64) * std

    def uniform(lo, hi):
        return lo + (hi - lo) * float(torch.rand((), generator=gen, dtype=torch.float64))

    det = ToyDetector(name or f"toy{seed}", grid, classes, features, input_size)
    w = randn(features, 3, 3, 3, std=0.3)
    b = randn(features, std=0.05)
    w[:2] = randn(2, 3, 3, 3, std=0.02)
    w[0, :, 1, 1] += torch.tensor([4.0, -2.0, -2.0], dtype=torch.float64)
    b[0] = 0.0
    angle = uniform(90.0, 270.0) if inhibit_angle is None else float(inhibit_angle)
    phi = np.radians(angle)
    e1 = torch.tensor([0.0, 1.0, -1.0], dtype=torch.float64) / np.sqrt(2.0)
    e2 = torch.tensor([2.0, -1.0, -1.0], dtype=torch.float64) / np.sqrt(6.0)
    w[1, :, 1, 1] += 6.0 * (np.cos(phi) * e1 + np.sin(phi) * e2)
    b[1] = -3.0  # fires only for saturated colours; rests near -1 elsewhere
    rest = float(np.tanh(3.0))

    hw = randn(5 + classes, features, 3, 3, std=0.1)
    hb = randn(5 + classes, std=0.1)
    hw[:, 1] = 0.0
    # boxes: cell-centred, sized like a typical synthetic person
    hw[:4] = 0.0
    hb[:4] = torch.tensor([0.0, 0.0, np.log(0.35 / 0.65), np.log(0.65 / 0.35)],
                          dtype=torch.float64)
    excite = torch.full((3, 3), 1.5, dtype=torch.float64)
    excite[1, 1] = 3.0
    inhibit = torch.full((3, 3), 1.5, dtype=torch.float64)
    inhibit[1, 1] = 6.0
    hw[4, 0] += excite
    hb[4] -= 3.0
    p = 5 + det.person_class_index
    hw[p, 0] += person_gain * excite
    hw[p, 1] -= person_gain * inhibit
    hb[p] -= person_gain * (3.0 + rest * float(inhibit.sum()))
    # the remaining classes light up where the inhibitor fires
    for k in range(classes):
        if k != det.person_class_index:
            hw[5 + k, 1, 1, 1] += uniform(0.5, 1.5)
            hb[5 + k] -= 2.0
    with torch.no_grad():
        det.trunk[0].weight.copy_(w)
        det.trunk[0].bias.copy_(b)
        det.head.weight.copy_(hw)
        det.head.bias.copy_(hb)
    det.inhibit_angle = angle
    det.to(dtype)
    det.eval()
    for prm in det.parameters():
        prm.requires_grad_(False)
    return det


def _load_factory(spec: str):
    module, _, attr = spec.partition(":")
    if not attr:
        raise ValueError(f"factory must look like 'package.module:callable', got {spec!r}")
    return getattr(importlib.import_module(module), attr)


def build_adapter(entry: dict) -> DetectorAdapter:
    """Instantiate an adapter from a registry entry.

    Toy entries need ``seed``/``grid``/``classes`` (and optionally
    ``person_gain``); one-/two-stage entries name a ``factory`` callable that
    receives the whole entry (``weights``, ``input_size``, ...).
    """
    kind = entry.get("kind", "toy")
    name = entry.get("name", kind)
    if kind == "toy":
        det = make_toy_detector(seed=int(entry.get("seed", 0)), grid=int(entry.get("grid", 4)),
                                classes=int(entry.get("classes", 3)),
                                person_gain=float(entry.get("person_gain", 1.0)),
                                inhibit_angle=(float(entry["inhibit_angle"])
                                               if "inhibit_angle" in entry else None),
                                input_size=tuple(entry.get("input_size", (64, 64))), name=name)
        if int(entry.get("person_class", 0)) != det.person_class_index:
            raise ValueError("toy detectors use person class 0")
        return det
    if kind in ("one-stage", "two-stage"):
        if "factory" not in entry:
            raise ValueError(f"adapter {name!r}: kind {kind!r} needs a 'factory' entry")
        det = _load_factory(entry["factory"])(entry)
        if not isinstance(det, DetectorAdapter):
            raise TypeError(f"factory for {name!r} did not return a DetectorAdapter")
        return det
    raise ValueError(f"unknown detector kind {kind!r}")
