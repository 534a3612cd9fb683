"""Patch parameter, printable palette and the patch-intrinsic losses.

Patches are torch tensors of shape ``(3, H, W)`` with values in ``[0, 1]``.
The losses are written with torch ops so that they can be backpropagated
into the patch during training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

__all__ = [
    "LossWeights",
    "PrintPalette",
    "init_patch",
    "clamp_patch",
    "check_patch",
    "nps_loss",
    "smoothness_loss",
    "total_energy",
    "save_patch",
    "load_patch",
    "read_palette",
    "write_palette",
    "grid_palette",
]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01  # NPS weight
    beta: float = 0.165  # smoothness weight

    def __post_init__(self):
        if not (self.alpha >= 0 and self.beta >= 0):
            raise ValueError(f"loss weights must be nonnegative, got {self}")


class PrintPalette:
    """A set of printable RGB colours, each channel in [0, 1]."""

    def __init__(self, colors):
        arr = np.asarray(colors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
            raise ValueError("palette must be a nonempty list of RGB triplets")
        if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
            raise ValueError("palette channels must lie in [0, 1]")
        # drop duplicates but keep first-seen order (tie-breaking uses it)
        _, first = np.unique(arr, axis=0, return_index=True)
        self.colors = arr[np.sort(first)]

    def __len__(self):
        return len(self.colors)

    def __repr__(self):
        return f"PrintPalette({len(self)} colors)"

    def __eq__(self, other):
        return isinstance(other, PrintPalette) and np.array_equal(self.colors, other.colors)

    def as_tensor(self, dtype=torch.float64, device=None) -> torch.Tensor:
        return torch.as_tensor(self.colors, dtype=dtype, device=device)


def check_patch(p: torch.Tensor) -> None:
    if p.ndim != 3 or p.shape[0] != 3:
        raise ValueError(f"patch must have shape (3, H, W), got {tuple(p.shape)}")
    if p.shape[1] < 2 or p.shape[2] < 2:
        raise ValueError("patch height and width must be at least 2")


def init_patch(height: int = 300, width: int = 300, mode: str = "random-uniform",
               seed: int = 0, path=None, dtype=torch.float64) -> torch.Tensor:
    """Create the initial patch.

    ``mode`` is one of ``"random-uniform"`` (i.i.d. U[0, 1] drawn from a
    torch generator seeded with ``seed``), ``"gray"`` (all 0.5) or
    ``"from-file"`` (decode the PNG at ``path``; it must be ``height x width``).
    """
    if height < 2 or width < 2:
        raise ValueError(f"patch dimensions must be >= 2, got {height}x{width}")
    if mode == "gray":
        return torch.full((3, height, width), 0.5, dtype=dtype)
    if mode == "random-uniform":
        gen = torch.Generator().manual_seed(int(seed))
        return torch.rand((3, height, width), generator=gen, dtype=dtype)
    if mode == "from-file":
        if path is None:
            raise ValueError("mode 'from-file' needs a path")
        p = load_patch(path, dtype=dtype)
        if tuple(p.shape[1:]) != (height, width):
            raise OSError(f"{path}: expected {height}x{width} patch, got "
                          f"{p.shape[1]}x{p.shape[2]}")
        return p
    raise ValueError(f"unknown init mode {mode!r}")


def clamp_patch(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(0.0, 1.0)


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # sqrt with a zero (sub)gradient at 0 instead of inf * 0 = nan
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))),
                       torch.zeros_like(x))


def _reduce(x: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return x.sum()
    if reduction == "mean":
        return x.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def nps_loss(p: torch.Tensor, palette: PrintPalette, reduction: str = "sum") -> torch.Tensor:
    """Euclidean RGB distance from each pixel to its nearest printable colour.

    Summed over pixels by default; ``reduction="mean"`` averages instead.
    """
    if palette is None or len(palette) == 0:
        raise ValueError("palette must be nonempty")
    pixels = p.reshape(3, -1).T  # (N, 3)
    colors = palette.as_tensor(dtype=p.dtype, device=p.device)
    d2 = ((pixels[:, None, :] - colors[None, :, :]) ** 2).sum(-1)
    # torch.min returns the first minimal index on ties
    nearest, _ = d2.min(dim=1)
    return _reduce(_safe_sqrt(nearest), reduction)


def smoothness_loss(p: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Isotropic total variation over rows, columns and channels.

    Differences toward a neighbour past the last row/column count as zero.
    ``reduction="mean"`` divides the sum by the number of elements.
    """
    dv = torch.zeros_like(p)
    dh = torch.zeros_like(p)
    dv[:, :-1, :] = p[:, :-1, :] - p[:, 1:, :]
    dh[:, :, :-1] = p[:, :, :-1] - p[:, :, 1:]
    return _reduce(_safe_sqrt(dv ** 2 + dh ** 2), reduction)


def total_energy(l_patch, l_nps, l_smooth, weights: LossWeights = LossWeights()):
    """``l_patch + alpha * l_nps + beta * l_smooth``.

    Tensors are combined with autograd-friendly ops; plain numbers are summed
    with :func:`math.fsum` so the result is correctly rounded.
    """
    terms = (l_patch, weights.alpha * l_nps, weights.beta * l_smooth)
    if any(isinstance(t, torch.Tensor) for t in terms):
        return terms[0] + terms[1] + terms[2]
    return math.fsum(terms)


def save_patch(p: torch.Tensor, path) -> None:
    """Write ``p`` as an 8-bit RGB PNG (value v stored as round(255 v))."""
    arr = p.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
    img = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def load_patch(path, dtype=torch.float64) -> torch.Tensor:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read patch image {path}: {exc}") from exc
    return torch.as_tensor(arr, dtype=dtype).permute(2, 0, 1).contiguous()


def read_palette(path) -> PrintPalette:
    """Parse a palette file: one ``r,g,b`` line per colour, ``#`` comments."""
    colors = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        try:
            if len(parts) != 3:
                raise ValueError("expected three comma-separated values")
            rgb = [float(v) for v in parts]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad colour line {line!r}: {exc}") from None
        if not all(0.0 <= v <= 1.0 for v in rgb):
            raise ValueError(f"{path}:{lineno}: channel outside [0, 1]")
        colors.append(rgb)
    return PrintPalette(colors)


def write_palette(palette: PrintPalette, path) -> None:
    lines = ["# r,g,b in [0,1]"]
    lines += [",".join(repr(float(v)) for v in c) for c in palette.colors]
    Path(path).write_text("\n".join(lines) + "\n")


def grid_palette(levels: int = 6) -> PrintPalette:
    """Regular RGB lattice with ``levels`` values per channel (default steps of 1/5)."""
    v = np.linspace(0.0, 1.0, levels)
    r, g, b = np.meshgrid(v, v, v, indexing="ij")
    return PrintPalette(np.stack([r.ravel(), g.ravel(), b.ravel()], axis=1))
