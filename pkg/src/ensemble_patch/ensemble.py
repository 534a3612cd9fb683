"""Min-max ensemble training of a universal patch.

The outer problem minimises the weighted person energy of K detectors over
the patch (Adam on the pixels); the inner problem maximises the same
weighted energy minus ``gamma/2 * ||w - 1/K||^2`` over the probability
simplex with one projected ascent step per batch.  ``mode="average"`` keeps
``w`` uniform and ``mode="fixed"`` keeps user-given weights, which gives the
fixed-weight ensemble used as an ablation baseline.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .detectors import obj_energy, prepare_images
from .patch import LossWeights, PrintPalette, grid_palette, init_patch, nps_loss, \
    save_patch, smoothness_loss, total_energy
from .transforms import TransformConfig, apply_patch, sample_draw

__all__ = [
    "TrainConfig",
    "TrainLogRow",
    "EnergyReport",
    "TrainingError",
    "TrainingDiverged",
    "simplex_project",
    "regularizer",
    "inner_objective",
    "inner_max_step",
    "make_patch_optimizer",
    "outer_min_step",
    "compute_energies",
    "train",
    "write_log_csv",
    "read_log_csv",
    "save_checkpoint",
]

log = logging.getLogger(__name__)

MODES = ("dynamic", "average", "fixed")


class TrainingError(RuntimeError):
    """An adapter failed during training; ``step`` is the failing step."""

    def __init__(self, message, step):
        super().__init__(f"step {step}: {message}")
        self.step = step


class TrainingDiverged(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 8
    patch_lr: float = 0.03
    nu: float = 0.78
    gamma: float = 0.1
    mu: float = 0.4
    loss_weights: LossWeights = LossWeights()
    mode: str = "dynamic"
    fixed_weights: tuple | None = None
    seed: int = 0
    patch_size: tuple = (300, 300)
    init_mode: str = "random-uniform"
    init_path: str | None = None
    eot_samples: int = 1
    inner_scheme: str = "proximal"
    max_steps: int | None = None
    shuffle: bool = True
    loss_reduction: str = "mean"

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if not self.gamma >= 0:
            raise ValueError("gamma must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1 or self.eot_samples < 1:
            raise ValueError("epochs, batch_size and eot_samples must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "fixed" and not self.fixed_weights:
            raise ValueError("mode 'fixed' needs fixed_weights")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")
        if self.inner_scheme not in ("proximal", "explicit"):
            raise ValueError("inner_scheme must be 'proximal' or 'explicit'")


@dataclass
class TrainLogRow:
    epoch: int
    step: int
    losses: tuple  # per-model objective energy
    w: tuple  # weights used for this step's patch update
    nps: float
    smooth: float
    total: float


@dataclass
class EnergyReport:
    per_model_obj: np.ndarray
    combined: float
    nps: float
    smooth: float
    total: float

    def __post_init__(self):
        vals = [*np.ravel(self.per_model_obj), self.combined, self.nps, self.smooth, self.total]
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError("energy report contains non-finite values")


# ---------------------------------------------------------------------------
# inner maximisation

def simplex_project(v) -> np.ndarray:
    """Euclidean projection onto ``{w : sum(w) = 1, w >= 0}``.

    Sort-and-threshold algorithm, O(K log K).
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot project an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("entries must be finite")
    k = v.size
    if np.all(v == v[0]):
        return np.full(k, 1.0 / k)
    if np.all(v >= 0) and v.sum() == 1.0:
        return v.copy()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, k + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    w = np.maximum(v - theta, 0.0)
    # put the rounding residue on the largest entry
    w[np.argmax(w)] += 1.0 - w.sum()
    return w


def regularizer(w, gamma: float) -> float:
    w = np.asarray(w, dtype=np.float64)
    return 0.5 * gamma * float(np.sum((w - 1.0 / w.size) ** 2))


def inner_objective(w, losses, gamma: float) -> float:
    return float(np.dot(w, losses)) - regularizer(w, gamma)


def inner_max_step(w, losses, nu: float, gamma: float, scheme: str = "proximal") -> np.ndarray:
    """One projected ascent step on ``sum_i w_i L_i - gamma/2 ||w - 1/K||^2``.

    ``scheme="explicit"`` is the plain step ``proj(w + nu * grad)``.  The
    default ``"proximal"`` treats the quadratic term implicitly,
    ``proj((w + nu L + nu gamma / K) / (1 + nu gamma))``, which is the same
    step when ``gamma = 0``, stays stable for any ``nu * gamma`` and never
    decreases the objective.
    """
    w = np.asarray(w, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if w.shape != losses.shape or w.ndim != 1:
        raise ValueError(f"weights {w.shape} and losses {losses.shape} differ in shape")
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    k = w.size
    if scheme == "explicit":
        return simplex_project(w + nu * (losses - gamma * (w - 1.0 / k)))
    if scheme == "proximal":
        return simplex_project((w + nu * losses + nu * gamma / k) / (1.0 + nu * gamma))
    raise ValueError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# outer minimisation

def make_patch_optimizer(patch: torch.Tensor, lr: float = 0.03) -> torch.optim.Adam:
    return torch.optim.Adam([patch], lr=lr)


def outer_min_step(patch: torch.Tensor, grad: torch.Tensor, optimizer) -> torch.Tensor:
    """Adam step on ``patch`` along ``grad``, then clip back into [0, 1] in place."""
    if grad.shape != patch.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} != patch {tuple(patch.shape)}")
    patch.grad = grad.detach().clone()
    optimizer.step()
    with torch.no_grad():
        patch.clamp_(0.0, 1.0)
    return patch


# ---------------------------------------------------------------------------
# training loop

def _draws(sample, tcfg, seed, index, round_index):
    return sample_draw(tcfg, seed, index, len(sample.boxes), sample.size, round_index)


def _model_energies(patch, samples, indices, adapters, tcfg, mu, seed, round_index,
                    eot_samples=1, step=None):
    adv = []
    for e in range(eot_samples):
        r = round_index * eot_samples + e
        for s, i in zip(samples, indices):
            adv.append(apply_patch(patch, s, tcfg, _draws(s, tcfg, seed, i, r)).image)
    energies = []
    for det in adapters:
        try:
            cands = det(prepare_images(adv, det.input_size))
            e = torch.stack([obj_energy(c, mu, det.kind, det.person_class_index)
                             for c in cands]).mean()
        except Exception as exc:
            raise TrainingError(f"adapter {det.name!r} failed: {exc}", step) from exc
        energies.append(e)
    return energies


def compute_energies(patch, dataset, adapters, tcfg=TransformConfig(), mu=0.4, seed=0,
                     w=None, palette=None, loss_weights=LossWeights(),
                     round_index=0, batch_size=16, reduction="mean") -> EnergyReport:
    """Evaluate every energy term for a fixed patch over a whole dataset.

    Transform draws are keyed by ``round_index`` so two patches evaluated with
    the same arguments see identical placements.
    """
    k = len(adapters)
    w = np.full(k, 1.0 / k) if w is None else np.asarray(w, dtype=np.float64)
    palette = palette or grid_palette()
    sums = np.zeros(k)
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = list(range(start, min(start + batch_size, len(dataset))))
            es = _model_energies(patch, [dataset[i] for i in idx], idx, adapters, tcfg, mu,
                                 seed, round_index)
            sums += np.array([float(e) for e in es]) * len(idx)
        per_model = sums / max(len(dataset), 1)
        nps = float(nps_loss(patch, palette, reduction))
        smooth = float(smoothness_loss(patch, reduction))
    combined = float(np.dot(w, per_model))
    return EnergyReport(per_model, combined, nps, smooth,
                        total_energy(combined, nps, smooth, loss_weights))


def _initial_weights(cfg: TrainConfig, k: int) -> np.ndarray:
    if cfg.mode == "fixed":
        w = np.asarray(cfg.fixed_weights, dtype=np.float64)
        if w.size != k:
            raise ValueError(f"fixed_weights has {w.size} entries for {k} adapters")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("fixed_weights must lie on the probability simplex")
        return w
    return np.full(k, 1.0 / k)


def train(dataset, adapters, cfg: TrainConfig = TrainConfig(),
          transform_cfg: TransformConfig = TransformConfig(),
          palette: PrintPalette | None = None, callback=None):
    """Optimise a patch against ``adapters`` on ``dataset``.

    Returns ``(patch, rows)`` where ``rows`` holds one :class:`TrainLogRow`
    per optimisation step.  ``callback(step, patch, w)`` is invoked after
    every step (e.g. for checkpointing).
    """
    if not adapters:
        raise ValueError("need at least one adapter")
    if not dataset:
        raise ValueError("dataset is empty")
    palette = palette or grid_palette()
    dtype = dataset[0].image.dtype
    h, w_px = cfg.patch_size
    patch = init_patch(h, w_px, cfg.init_mode, cfg.seed, cfg.init_path, dtype=dtype)
    patch.requires_grad_(True)
    opt = make_patch_optimizer(patch, cfg.patch_lr)
    k = len(adapters)
    w = _initial_weights(cfg, k)
    rows = []
    step = 0
    n = len(dataset)
    for epoch in range(cfg.epochs):
        if cfg.shuffle:
            order = np.random.default_rng(
                np.random.SeedSequence(cfg.seed, spawn_key=(epoch,))).permutation(n)
        else:
            order = np.arange(n)
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return patch.detach(), rows
            idx = [int(i) for i in order[start:start + cfg.batch_size]]
            energies = _model_energies(patch, [dataset[i] for i in idx], idx, adapters,
                                       transform_cfg, cfg.mu, cfg.seed, step,
                                       cfg.eot_samples, step)
            combined = sum(float(wi) * e for wi, e in zip(w, energies))
            l_nps = nps_loss(patch, palette, cfg.loss_reduction)
            l_smooth = smoothness_loss(patch, cfg.loss_reduction)
            total = total_energy(combined, l_nps, l_smooth, cfg.loss_weights)
            if not torch.isfinite(total):
                raise TrainingDiverged("loss is not finite", step)
            grad, = torch.autograd.grad(total, patch)
            outer_min_step(patch, grad, opt)

            losses = np.array([float(e.detach()) for e in energies])
            rows.append(TrainLogRow(epoch, step, tuple(map(float, losses)), tuple(map(float, w)),
                                    float(l_nps.detach()), float(l_smooth.detach()),
                                    float(total.detach())))
            if cfg.mode == "dynamic":
                w = inner_max_step(w, losses, cfg.nu, cfg.gamma, cfg.inner_scheme)
            if callback is not None:
                callback(step, patch.detach(), w)
            step += 1
        log.info("epoch %d: total %.4f, w %s", epoch, rows[-1].total, np.round(w, 3))
    return patch.detach(), rows


# ---------------------------------------------------------------------------
# persistence

def log_header(k: int) -> list:
    return (["epoch", "step"] + [f"model_{i}_loss" for i in range(k)]
            + [f"w_{i}" for i in range(k)] + ["nps", "smooth", "total"])


def write_log_csv(rows, path) -> None:
    k = len(rows[0].losses) if rows else 0
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(log_header(k))
        for r in rows:
            wr.writerow([r.epoch, r.step, *map(repr, r.losses), *map(repr, r.w),
                         repr(r.nps), repr(r.smooth), repr(r.total)])


def read_log_csv(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        k = (len(header) - 5) // 2
        rows = []
        for rec in rd:
            vals = [float(v) for v in rec[2:]]
            rows.append(TrainLogRow(int(rec[0]), int(rec[1]), tuple(vals[:k]),
                                    tuple(vals[k:2 * k]), *vals[2 * k:]))
    return rows


def save_checkpoint(patch, w, step: int, seed: int, out_dir, stem="checkpoint") -> Path:
    """Write ``<stem>.png`` plus a ``<stem>.txt`` sidecar (step, RNG digest, weights)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_patch(patch, out / f"{stem}.png")
    digest = hashlib.sha256(f"{seed}:{step}".encode()).hexdigest()
    lines = [f"step = {step}", f"rng_digest = {digest}",
             "w = " + ",".join(repr(float(x)) for x in w)]
    (out / f"{stem}.txt").write_text("\n".join(lines) + "\n")
    return out / f"{stem}.png"
