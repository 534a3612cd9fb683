"""Differentiable placement of a patch onto person boxes.

The pipeline for one person box is

    thin-plate-spline warp -> distance blur -> rotate/translate/scale into the
    box -> composite with the box mask

and once all boxes are composited the whole image goes through a lighting
jitter (contrast, brightness, additive noise).  Every stochastic parameter
lives in a :class:`RandomDraw` so that a draw can be replayed exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .patch import check_patch

__all__ = [
    "BoundingBox",
    "LabeledImage",
    "TransformConfig",
    "BoxDraw",
    "RandomDraw",
    "sample_draw",
    "identity_draw",
    "tps_warp",
    "blur_sigma",
    "distance_blur",
    "place_patch",
    "lighting_transform",
    "apply_patch",
    "parse_label_line",
    "read_labels",
    "format_labels",
]

_BOX_TOL = 1e-6


@dataclass(frozen=True)
class BoundingBox:
    """Normalised ``(cx, cy, w, h)`` box, all coordinates in [0, 1]."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if int(self.class_id) != self.class_id or self.class_id < 0:
            raise ValueError(f"class_id must be a nonnegative integer: {self}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValueError(f"non-finite box {self}")
        if not (0 <= self.cx <= 1 and 0 <= self.cy <= 1):
            raise ValueError(f"box centre outside [0, 1]: {self}")
        if not (0 < self.w <= 1 and 0 < self.h <= 1):
            raise ValueError(f"box size outside (0, 1]: {self}")
        if (self.cx - self.w / 2 < -_BOX_TOL or self.cx + self.w / 2 > 1 + _BOX_TOL
                or self.cy - self.h / 2 < -_BOX_TOL or self.cy + self.h / 2 > 1 + _BOX_TOL):
            raise ValueError(f"box extends past the image: {self}")

    def xyxy(self, width: float = 1.0, height: float = 1.0):
        return ((self.cx - self.w / 2) * width, (self.cy - self.h / 2) * height,
                (self.cx + self.w / 2) * width, (self.cy + self.h / 2) * height)


@dataclass
class LabeledImage:
    image: torch.Tensor  # (3, H, W) in [0, 1]
    boxes: list = field(default_factory=list)

    @property
    def size(self):
        return int(self.image.shape[1]), int(self.image.shape[2])


@dataclass(frozen=True)
class TransformConfig:
    rotation_range: float = 20.0  # degrees, symmetric
    translate_range: float = 0.1  # fraction of box size, symmetric
    patch_scale: float = 0.30  # patch width / box height
    tps_grid: int = 5
    tps_sigma: float = 0.05  # max control offset, fraction of patch size
    brightness_range: float = 0.1
    contrast_range: tuple = (0.8, 1.2)
    noise_std: float = 0.02
    blur_gain: float = 1.5  # pixels
    person_class: int = 0
    enable_tps: bool = True
    enable_blur: bool = True
    enable_rotation: bool = True
    enable_translation: bool = True
    enable_lighting: bool = True

    def __post_init__(self):
        vals = (self.rotation_range, self.translate_range, self.tps_sigma,
                self.brightness_range, self.noise_std, self.blur_gain, *self.contrast_range)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError("transform ranges must be finite")
        if not 0 < self.patch_scale <= 1:
            raise ValueError("patch_scale must lie in (0, 1]")
        if self.tps_grid < 2:
            raise ValueError("tps_grid must be >= 2")
        if len(self.contrast_range) != 2 or self.contrast_range[0] > self.contrast_range[1]:
            raise ValueError("contrast_range must be (low, high)")

    def disabled(self) -> "TransformConfig":
        """Same geometry, every stochastic stage switched off."""
        return replace(self, enable_tps=False, enable_blur=False, enable_rotation=False,
                       enable_translation=False, enable_lighting=False)


@dataclass
class BoxDraw:
    angle: float = 0.0  # degrees, positive turns clockwise on screen (y down)
    shift_x: float = 0.0  # fraction of box width
    shift_y: float = 0.0  # fraction of box height
    tps_offsets: np.ndarray | None = None  # (g, g, 2) as (dx, dy) fractions of patch size


@dataclass
class RandomDraw:
    boxes: list = field(default_factory=list)
    contrast: float = 1.0
    brightness: float = 0.0
    noise: np.ndarray | None = None  # (3, H, W)

    def box(self, k: int) -> BoxDraw:
        return self.boxes[k] if k < len(self.boxes) else BoxDraw()


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def sample_draw(cfg: TransformConfig, seed: int, image_index: int, n_boxes: int,
                image_size, round_index: int = 0) -> RandomDraw:
    """Draw transform parameters for one image.

    Box ``k`` uses the stream keyed by ``(seed, round_index, image_index, k + 1)``;
    lighting uses key ``... , 0``.  ``round_index`` is the training step.
    """
    boxes = []
    for k in range(n_boxes):
        rng = _rng(seed, round_index, image_index, k + 1)
        angle, sx, sy = rng.uniform(-1.0, 1.0, size=3)
        offsets = rng.uniform(-1.0, 1.0, size=(cfg.tps_grid, cfg.tps_grid, 2)) * cfg.tps_sigma
        boxes.append(BoxDraw(
            angle=float(angle * cfg.rotation_range) if cfg.enable_rotation else 0.0,
            shift_x=float(sx * cfg.translate_range) if cfg.enable_translation else 0.0,
            shift_y=float(sy * cfg.translate_range) if cfg.enable_translation else 0.0,
            tps_offsets=offsets if cfg.enable_tps else None,
        ))
    if not cfg.enable_lighting:
        return RandomDraw(boxes=boxes)
    rng = _rng(seed, round_index, image_index, 0)
    contrast = rng.uniform(*cfg.contrast_range)
    brightness = rng.uniform(-cfg.brightness_range, cfg.brightness_range)
    h, w = image_size
    noise = rng.standard_normal((3, h, w)) * cfg.noise_std if cfg.noise_std > 0 else None
    return RandomDraw(boxes=boxes, contrast=float(contrast), brightness=float(brightness),
                      noise=noise)


def identity_draw(n_boxes: int = 0) -> RandomDraw:
    return RandomDraw(boxes=[BoxDraw() for _ in range(n_boxes)])


# ---------------------------------------------------------------------------
# thin plate spline

def _tps_kernel(d2: torch.Tensor) -> torch.Tensor:
    # U(r) = r^2 log r^2, with U(0) = 0
    safe = torch.where(d2 > 0, d2, torch.ones_like(d2))
    return torch.where(d2 > 0, d2 * torch.log(safe), torch.zeros_like(d2))


def _control_grid(g: int, dtype) -> torch.Tensor:
    t = torch.linspace(-1.0, 1.0, g, dtype=dtype)
    yy, xx = torch.meshgrid(t, t, indexing="ij")
    return torch.stack([xx, yy], dim=-1)  # (g, g, 2) as (x, y)


def tps_warp(p: torch.Tensor, control_offsets) -> torch.Tensor:
    """Warp ``p`` so that control point ``c`` moves to ``c + offset``.

    Control points form a regular grid spanning the patch; offsets are
    ``(dx, dy)`` in fractions of the patch width/height.  Sampling is bilinear
    and samples falling outside the patch replicate the edge.
    """
    check_patch(p)
    off = torch.as_tensor(np.asarray(control_offsets, dtype=np.float64), dtype=torch.float64)
    if off.ndim != 3 or off.shape[0] != off.shape[1] or off.shape[2] != 2 or off.shape[0] < 2:
        raise ValueError(f"control offsets must have shape (g, g, 2), got {tuple(off.shape)}")
    if not torch.any(off != 0):
        return p.clone()
    g = off.shape[0]
    src = _control_grid(g, torch.float64).reshape(-1, 2)
    dst = src + 2.0 * off.reshape(-1, 2)  # fractions of size -> normalised [-1, 1] units

    # mapping from warped (dst) positions back to source positions
    n = dst.shape[0]
    kmat = _tps_kernel(((dst[:, None, :] - dst[None, :, :]) ** 2).sum(-1))
    pmat = torch.cat([torch.ones(n, 1, dtype=torch.float64), dst], dim=1)
    system = torch.zeros(n + 3, n + 3, dtype=torch.float64)
    system[:n, :n] = kmat
    system[:n, n:] = pmat
    system[n:, :n] = pmat.T
    rhs = torch.zeros(n + 3, 2, dtype=torch.float64)
    rhs[:n] = src
    coef = torch.linalg.solve(system, rhs)

    _, h, w = p.shape
    ys = (2.0 * torch.arange(h, dtype=torch.float64) + 1.0) / h - 1.0
    xs = (2.0 * torch.arange(w, dtype=torch.float64) + 1.0) / w - 1.0
    qy, qx = torch.meshgrid(ys, xs, indexing="ij")
    q = torch.stack([qx, qy], dim=-1).reshape(-1, 2)
    u = _tps_kernel(((q[:, None, :] - dst[None, :, :]) ** 2).sum(-1))
    mapped = u @ coef[:n] + coef[n] + q @ coef[n + 1:]
    grid = mapped.reshape(1, h, w, 2).to(p.dtype)
    out = F.grid_sample(p[None], grid, mode="bilinear", padding_mode="border",
                        align_corners=False)[0]
    return out.clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# distance blur

def blur_sigma(box_height_frac: float, blur_gain: float = 1.5) -> float:
    if not box_height_frac > 0:
        raise ValueError(f"box_height_frac must be positive, got {box_height_frac}")
    if box_height_frac >= 1.0:
        return 0.0
    return blur_gain * (1.0 / box_height_frac - 1.0)


def _reflect_index(n: int, pad: int) -> torch.Tensor:
    # reflection without repeating the edge sample (d c b | a b c d | c b a)
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return torch.zeros(len(idx), dtype=torch.long)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    idx = np.where(idx >= n, period - idx, idx)
    return torch.as_tensor(idx, dtype=torch.long)


def _gaussian_kernel(sigma: float, dtype) -> torch.Tensor:
    radius = int(math.ceil(3.0 * sigma))
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def distance_blur(p: torch.Tensor, box_height_frac: float, blur_gain: float = 1.5) -> torch.Tensor:
    """Gaussian blur whose width grows as the person box shrinks.

    ``sigma = blur_gain * (1 / box_height_frac - 1)`` pixels, kernel width
    ``2 * ceil(3 sigma) + 1``, reflective borders.
    """
    sigma = blur_sigma(box_height_frac, blur_gain)
    if sigma == 0.0:
        return p
    kernel = _gaussian_kernel(sigma, p.dtype)
    r = (len(kernel) - 1) // 2
    c, h, w = p.shape
    x = p[:, _reflect_index(h, r), :]
    x = x[:, :, _reflect_index(w, r)]
    x = x[:, None]  # (C, 1, H', W') so every channel is convolved separately
    x = F.conv2d(x, kernel.reshape(1, 1, -1, 1))
    x = F.conv2d(x, kernel.reshape(1, 1, 1, -1))
    return x[:, 0]


# ---------------------------------------------------------------------------
# placement, lighting, compositing

def place_patch(p: torch.Tensor, box: BoundingBox, image_size, draw: BoxDraw,
                patch_scale: float = 0.30):
    """Render ``p`` into an image-sized layer centred on ``box``.

    The patch is scaled to a width of ``patch_scale * box height`` (in image
    pixels), rotated by ``draw.angle`` and shifted by the drawn offsets.  Each
    image pixel whose centre falls inside the placed patch is filled by
    bilinear sampling of the patch.  Returns ``(layer, mask)`` with shapes
    ``(C, H, W)`` and ``(1, H, W)``; the mask is 0/1.
    """
    img_h, img_w = image_size
    c, ph, pw = p.shape
    layer = p.new_zeros((c, img_h, img_w))
    mask = p.new_zeros((1, img_h, img_w))
    if box.w * img_w < 1.0 or box.h * img_h < 1.0:
        return layer, mask
    side_w = patch_scale * box.h * img_h
    side_h = side_w * ph / pw
    ctr_x = box.cx * img_w + draw.shift_x * box.w * img_w
    ctr_y = box.cy * img_h + draw.shift_y * box.h * img_h
    theta = math.radians(draw.angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    # pixel window covering the rotated rectangle
    half_x = 0.5 * (abs(cos_t) * side_w + abs(sin_t) * side_h)
    half_y = 0.5 * (abs(sin_t) * side_w + abs(cos_t) * side_h)
    x0 = max(0, int(math.floor(ctr_x - half_x - 0.5)))
    x1 = min(img_w, int(math.ceil(ctr_x + half_x + 0.5)))
    y0 = max(0, int(math.floor(ctr_y - half_y - 0.5)))
    y1 = min(img_h, int(math.ceil(ctr_y + half_y + 0.5)))
    if x1 <= x0 or y1 <= y0:
        return layer, mask

    ys = torch.arange(y0, y1, dtype=torch.float64) + 0.5 - ctr_y
    xs = torch.arange(x0, x1, dtype=torch.float64) + 0.5 - ctr_x
    dy, dx = torch.meshgrid(ys, xs, indexing="ij")
    # inverse rotation takes image offsets back into the patch frame
    u = cos_t * dx + sin_t * dy
    v = -sin_t * dx + cos_t * dy
    nx = 2.0 * u / side_w
    ny = 2.0 * v / side_h
    valid = (nx >= -1) & (nx < 1) & (ny >= -1) & (ny < 1)
    grid = torch.stack([nx, ny], dim=-1)[None].to(p.dtype)
    sampled = F.grid_sample(p[None], grid, mode="bilinear", padding_mode="border",
                            align_corners=False)[0]
    m = valid.to(p.dtype)[None]
    pad = (x0, img_w - x1, y0, img_h - y1)
    layer = F.pad(sampled * m, pad)
    mask = F.pad(m, pad)
    return layer, mask


def lighting_transform(img: torch.Tensor, draw: RandomDraw) -> torch.Tensor:
    out = draw.contrast * img + draw.brightness
    if draw.noise is not None:
        out = out + torch.as_tensor(draw.noise, dtype=img.dtype, device=img.device)
    return out.clamp(0.0, 1.0)


def apply_patch(p: torch.Tensor, sample: LabeledImage, cfg: TransformConfig,
                draw: RandomDraw, return_mask: bool = False):
    """Composite the patch onto every person box of ``sample``.

    Boxes are handled in list order, so later boxes overwrite earlier ones
    where they overlap.  The boxes themselves are passed through unchanged.
    """
    x = sample.image.to(p.dtype)
    h, w = x.shape[1:]
    union = x.new_zeros((1, h, w))
    for k, box in enumerate(sample.boxes):
        if box.class_id != cfg.person_class:
            continue
        bd = draw.box(k)
        q = p
        if cfg.enable_tps and bd.tps_offsets is not None:
            q = tps_warp(q, bd.tps_offsets)
        if cfg.enable_blur:
            q = distance_blur(q, box.h, cfg.blur_gain)
        layer, mask = place_patch(q, box, (h, w), bd, cfg.patch_scale)
        x = (1 - mask) * x + mask * layer
        union = torch.maximum(union, mask)
    if cfg.enable_lighting:
        x = lighting_transform(x, draw)
    out = LabeledImage(image=x, boxes=list(sample.boxes))
    return (out, union) if return_mask else out


# ---------------------------------------------------------------------------
# label text format: "class_id cx cy w h" per line

def parse_label_line(line: str) -> BoundingBox:
    parts = line.split()
    if len(parts) != 5:
        raise ValueError(f"expected 5 fields, got {len(parts)}")
    try:
        cls = int(parts[0])
        cx, cy, bw, bh = (float(v) for v in parts[1:])
    except ValueError:
        raise ValueError(f"non-numeric field in {line.strip()!r}") from None
    return BoundingBox(cls, cx, cy, bw, bh)


def read_labels(path) -> list:
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                boxes.append(parse_label_line(line))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return boxes


def format_labels(boxes) -> str:
    return "".join(f"{b.class_id} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r}\n" for b in boxes)
