"""Attack metrics and interpretability tools.

* detection post-processing (:func:`nms`) and person AP / attack success rate
* Grad-CAM heatmaps and the disruption area ratio between two heatmaps
* hue-histogram similarity for comparing a digital patch with a capture of
  its print
* per-class candidate counts before and after patching
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib.colors import rgb_to_hsv

from .detectors import Candidates, person_confidence, prepare_images
from .transforms import BoundingBox, apply_patch, sample_draw

__all__ = [
    "Detection",
    "EvalReport",
    "box_iou",
    "candidates_to_detections",
    "nms",
    "detect",
    "compute_ap",
    "compute_asr",
    "grad_cam",
    "person_score_target",
    "disruption_area_ratio",
    "hue_histogram",
    "hue_similarity",
    "category_box_histogram",
    "evaluate_patch",
    "save_heatmap",
    "plot_category_histogram",
]


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float
    class_id: int


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def _class_confidences(cands: Candidates, kind: str) -> np.ndarray:
    cls = cands.class_scores.detach().double().cpu().numpy()
    if kind == "two-stage":
        return cls
    return cls * cands.objectness.detach().double().cpu().numpy()[:, None]


def candidates_to_detections(cands: Candidates, kind: str = "one-stage",
                             conf_thresh: float = 0.0) -> list:
    """Give each candidate its best class and confidence; drop those under ``conf_thresh``."""
    conf = _class_confidences(cands, kind)
    out = []
    for j in range(len(cands)):
        c = int(np.argmax(conf[j]))
        if conf[j, c] >= conf_thresh:
            cand = cands[j]
            out.append(Detection(BoundingBox(c, cand.box.cx, cand.box.cy, cand.box.w, cand.box.h),
                                 float(conf[j, c]), c))
    return out


def nms(candidates, iou_thresh: float = 0.4, conf_thresh: float = 0.5,
        kind: str = "one-stage") -> list:
    """Greedy per-class non-maximum suppression.

    ``candidates`` is a :class:`Candidates` bundle or a list of
    :class:`Detection`.  Boxes are visited by descending score (input order
    breaks ties) and dropped when their IoU with an already kept box of the
    same class exceeds ``iou_thresh``.
    """
    if isinstance(candidates, Candidates):
        dets = candidates_to_detections(candidates, kind, conf_thresh)
    else:
        dets = [d for d in candidates if d.score >= conf_thresh]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or box_iou(k.box, d.box) <= iou_thresh for k in kept):
            kept.append(d)
    return kept


def detect(adapter, images, conf_thresh: float = 0.5, iou_thresh: float = 0.4) -> list:
    """Post-NMS detections for each image of ``images`` (list of ``(3, H, W)``)."""
    with torch.no_grad():
        cands = adapter(prepare_images(images, adapter.input_size))
    return [nms(c, iou_thresh, conf_thresh, adapter.kind) for c in cands]


def _as_mapping(per_image):
    return dict(per_image) if isinstance(per_image, dict) else dict(enumerate(per_image))


def compute_ap(detections, ground_truth, iou_thresh: float = 0.5, person_class: int = 0) -> float:
    """Person-class average precision in percent.

    ``detections`` and ``ground_truth`` map image ids to lists of
    :class:`Detection` / :class:`BoundingBox` (lists are indexed by
    position).  Detections are visited by descending score, ties broken by
    image id and then box coordinates, and each one is matched to the
    unmatched ground-truth box it overlaps most; IoU >= ``iou_thresh`` makes
    it a true positive.  AP is the area under the all-point interpolated
    precision/recall curve.
    """
    dets = _as_mapping(detections)
    gts = _as_mapping(ground_truth)
    gt_person = {k: [b for b in v if b.class_id == person_class] for k, v in gts.items()}
    n_gt = sum(len(v) for v in gt_person.values())
    if n_gt == 0:
        raise ValueError("no ground-truth person boxes: AP is undefined")
    pool = []
    for img_id, ds in dets.items():
        for d in ds:
            if d.class_id == person_class:
                pool.append((-d.score, str(img_id), d.box.cx, d.box.cy, d.box.w, d.box.h,
                             img_id, d))
    pool.sort(key=lambda t: t[:6])
    matched = {k: [False] * len(v) for k, v in gt_person.items()}
    tp = np.zeros(len(pool))
    for i, entry in enumerate(pool):
        img_id, d = entry[6], entry[7]
        best, best_iou = -1, -1.0
        for g, gt in enumerate(gt_person.get(img_id, [])):
            if matched[img_id][g]:
                continue
            iou = box_iou(d.box, gt)
            if iou > best_iou:
                best, best_iou = g, iou
        if best >= 0 and best_iou >= iou_thresh:
            matched[img_id][best] = True
            tp[i] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return 100.0 * float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def compute_asr(detections, targets, iou_thresh: float = 0.5, conf_thresh: float = 0.5,
                person_class: int = 0) -> float:
    """Fraction of images whose patched persons all go undetected.

    ``targets`` maps image ids to the ground-truth boxes of the persons
    wearing the patch.  A target counts as detected when a person detection
    with score >= ``conf_thresh`` overlaps it with IoU >= ``iou_thresh``.
    Images without targets are left out of the ratio.
    """
    dets = _as_mapping(detections)
    tg = _as_mapping(targets)
    flags = []
    for img_id, boxes in tg.items():
        boxes = [b for b in boxes if b.class_id == person_class]
        if not boxes:
            continue
        hits = [d for d in dets.get(img_id, [])
                if d.class_id == person_class and d.score >= conf_thresh]
        detected = any(box_iou(d.box, b) >= iou_thresh for b in boxes for d in hits)
        flags.append(not detected)
    if not flags:
        return 0.0
    return float(np.mean(flags))


# ---------------------------------------------------------------------------
# Grad-CAM and disruption area

def person_score_target(adapter):
    """Target selector summing the person confidences of one image's candidates."""
    def target(outputs):
        return sum(adapter.person_scores(c).sum() for c in outputs)
    return target


def grad_cam(model, image: torch.Tensor, target, layer: str) -> np.ndarray:
    """Grad-CAM heatmap of ``target`` at module ``layer``, upsampled to the image.

    ``target`` is a class index (for models returning ``(1, C)`` logits) or a
    callable mapping the model output to a scalar.  Returns an ``(H, W)``
    array scaled so its maximum is 1 (all zeros stays all zeros).
    """
    modules = dict(model.named_modules())
    if layer not in modules:
        raise ValueError(f"unknown layer {layer!r}")
    store = {}
    handle = modules[layer].register_forward_hook(lambda m, i, o: store.__setitem__("act", o))
    try:
        x = image.detach().clone()[None].requires_grad_(True)
        with torch.enable_grad():
            out = model(x)
            score = target(out) if callable(target) else out[0, int(target)]
            act = store["act"]
            grad, = torch.autograd.grad(score, act, allow_unused=True)
    finally:
        handle.remove()
    if grad is None:
        grad = torch.zeros_like(act)
    alpha = grad.mean(dim=(2, 3), keepdim=True)
    cam = torch.relu((alpha * act).sum(dim=1, keepdim=True)).detach()
    h, w = image.shape[1:]
    if tuple(cam.shape[2:]) != (h, w):
        cam = F.interpolate(cam, size=(h, w), mode="bilinear", align_corners=False)
    cam = cam[0, 0].double().cpu().numpy()
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)


def _box_slice(box: BoundingBox, shape):
    h, w = shape
    x0, y0, x1, y1 = box.xyxy(w, h)
    c0, c1 = int(round(x0)), int(round(x1))
    r0, r1 = int(round(y0)), int(round(y1))
    c0, r0 = max(c0, 0), max(r0, 0)
    c1, r1 = min(c1, w), min(r1, h)
    if c1 <= c0 or r1 <= r0:
        raise ValueError(f"box {box} covers no pixels of a {h}x{w} heatmap")
    return slice(r0, r1), slice(c0, c1)


def _binarize(h: np.ndarray, tau: float) -> np.ndarray:
    peak = h.max()
    if peak <= 0:
        return np.zeros(h.shape, dtype=bool)
    return h >= tau * peak


def disruption_area_ratio(h_clean, h_adv, box: BoundingBox, tau: float = 0.5) -> float:
    """Share of the box's pixels where the two thresholded heatmaps disagree."""
    a = np.asarray(h_clean, dtype=np.float64)
    b = np.asarray(h_adv, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"heatmap shapes differ: {a.shape} vs {b.shape}")
    rows, cols = _box_slice(box, a.shape)
    diff = _binarize(a, tau)[rows, cols] != _binarize(b, tau)[rows, cols]
    return float(diff.mean())


# ---------------------------------------------------------------------------
# print fidelity

def _to_hwc(img) -> np.ndarray:
    arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[-1] != 3:
        arr = np.moveaxis(arr, 0, -1)
    return np.clip(arr, 0.0, 1.0)


def hue_histogram(img, bins: int = 180) -> np.ndarray:
    hue = rgb_to_hsv(_to_hwc(img))[..., 0]
    hist, _ = np.histogram(hue, bins=bins, range=(0.0, 1.0))
    return hist.astype(np.float64)


def hue_similarity(img_a, img_b, bins: int = 180) -> float:
    """Correlation coefficient of the two images' hue histograms, in [-1, 1]."""
    a = hue_histogram(img_a, bins)
    b = hue_histogram(img_b, bins)
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    if denom == 0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(np.sum(da * db) / denom)


# ---------------------------------------------------------------------------
# candidate counts

def category_box_histogram(candidates_clean, candidates_adv, conf_thresh: float = 0.5,
                           kind: str = "one-stage") -> dict:
    """Per-class ``(clean, adversarial)`` counts of candidates above ``conf_thresh``.

    Each candidate is counted once, under its highest-confidence class.
    Inputs are single :class:`Candidates` bundles or lists of them.
    """
    def counts(bundles):
        if isinstance(bundles, Candidates):
            bundles = [bundles]
        tally = {}
        for c in bundles:
            conf = _class_confidences(c, kind)
            best = conf.argmax(axis=1)
            for j in range(len(best)):
                if conf[j, best[j]] >= conf_thresh:
                    tally[int(best[j])] = tally.get(int(best[j]), 0) + 1
            for k in range(conf.shape[1]):
                tally.setdefault(k, 0)
        return tally

    clean, adv = counts(candidates_clean), counts(candidates_adv)
    return {k: (clean.get(k, 0), adv.get(k, 0)) for k in sorted(set(clean) | set(adv))}


# ---------------------------------------------------------------------------
# end-to-end report

@dataclass
class EvalReport:
    ap_clean: float
    ap_adv: float
    ap_drop: float
    asr: float
    records: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def evaluate_patch(patch, dataset, adapter, transform_cfg, seed: int = 0,
                   conf_thresh: float = 0.5, nms_thresh: float = 0.4,
                   person_class: int = 0) -> EvalReport:
    """AP on clean vs patched images, plus ASR on the patched ones."""
    clean_dets, adv_dets, gts, records = {}, {}, {}, []
    for i, sample in enumerate(dataset):
        draw = sample_draw(transform_cfg, seed, i, len(sample.boxes), sample.size)
        with torch.no_grad():
            adv = apply_patch(patch, sample, transform_cfg, draw).image
        clean_dets[i], adv_dets[i] = detect(adapter, [sample.image, adv], conf_thresh, nms_thresh)
        gts[i] = [b for b in sample.boxes if b.class_id == person_class]
        hidden = compute_asr({0: adv_dets[i]}, {0: gts[i]}, conf_thresh=conf_thresh,
                             person_class=person_class)
        records.append({
            "image": i,
            "persons": len(gts[i]),
            "clean_person_detections": sum(d.class_id == person_class for d in clean_dets[i]),
            "adv_person_detections": sum(d.class_id == person_class for d in adv_dets[i]),
            "attack_success": bool(gts[i]) and hidden == 1.0,
        })
    ap_clean = compute_ap(clean_dets, gts, person_class=person_class)
    ap_adv = compute_ap(adv_dets, gts, person_class=person_class)
    asr = compute_asr(adv_dets, gts, conf_thresh=conf_thresh, person_class=person_class)
    return EvalReport(ap_clean, ap_adv, ap_clean - ap_adv, asr, records)


def save_heatmap(h, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.imsave(path, np.asarray(h), cmap="jet", vmin=0.0, vmax=1.0)


def plot_category_histogram(hist: dict, path, class_names=None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    keys = sorted(hist)
    names = [class_names[k] if class_names else str(k) for k in keys]
    x = np.arange(len(keys))
    fig, ax = plt.subplots(figsize=(max(4, len(keys)), 3))
    ax.bar(x - 0.2, [hist[k][0] for k in keys], 0.4, label="clean")
    ax.bar(x + 0.2, [hist[k][1] for k in keys], 0.4, label="patched")
    ax.set_xticks(x, names)
    ax.set_ylabel("candidates")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
