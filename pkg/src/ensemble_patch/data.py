"""Datasets on disk, run configuration, palette construction and export."""
from __future__ import annotations

import configparser
import io
import shutil
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .ensemble import TrainConfig
from .patch import LossWeights, PrintPalette
from .transforms import LabeledImage, TransformConfig, apply_patch, read_labels, sample_draw

__all__ = [
    "IMAGE_SUFFIXES",
    "DatasetIndex",
    "RunConfig",
    "load_dataset",
    "load_samples",
    "load_image",
    "save_image",
    "write_dataset",
    "build_palette",
    "export_adv_dataset",
    "load_config",
    "loads_config",
    "dumps_config",
]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class DatasetIndex:
    pairs: list = field(default_factory=list)  # (image path, label path)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def load_image(path, dtype=torch.float64) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    return torch.as_tensor(arr, dtype=dtype).permute(2, 0, 1).contiguous()


def save_image(img: torch.Tensor, path) -> None:
    arr = img.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path, format="PNG")


def load_dataset(images_dir, labels_dir) -> DatasetIndex:
    """Pair every image with ``<labels_dir>/<stem>.txt``, sorted by file name bytes.

    All label files are parsed up front so malformed lines fail early.
    """
    images_dir, labels_dir = Path(images_dir), Path(labels_dir)
    for d in (images_dir, labels_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"dataset directory {d} does not exist")
    images = sorted((p for p in images_dir.iterdir()
                     if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
                    key=lambda p: p.name.encode())
    missing = [p.name for p in images if not (labels_dir / f"{p.stem}.txt").is_file()]
    if missing:
        raise FileNotFoundError(f"no label file for: {', '.join(missing)}")
    pairs = [(p, labels_dir / f"{p.stem}.txt") for p in images]
    for _, lbl in pairs:
        read_labels(lbl)
    return DatasetIndex(pairs)


def load_samples(index: DatasetIndex, dtype=torch.float64) -> list:
    return [LabeledImage(load_image(img, dtype), read_labels(lbl)) for img, lbl in index]


def write_dataset(samples, out_dir, prefix="img") -> DatasetIndex:
    """Write samples as ``images/*.png`` plus ``labels/*.txt`` under ``out_dir``."""
    from .transforms import format_labels
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i, s in enumerate(samples):
        img, lbl = out / "images" / f"{prefix}{i:04d}.png", out / "labels" / f"{prefix}{i:04d}.txt"
        save_image(s.image, img)
        lbl.write_text(format_labels(s.boxes))
        pairs.append((img, lbl))
    return DatasetIndex(pairs)


def build_palette(measured_colors, target_count: int = 30) -> PrintPalette:
    """Reduce measured printer colours to ``target_count`` representatives.

    Greedy farthest-point (k-center) selection starting from the smallest
    colour in lexicographic order.  The covering radius is within a factor
    of two of the optimum.
    """
    arr = np.asarray(measured_colors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] != 3:
        raise ValueError("measured_colors must be a nonempty list of RGB triplets")
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    uniq = np.unique(arr, axis=0)
    if len(uniq) <= target_count:
        return PrintPalette(uniq)
    chosen = [0]
    dist = np.linalg.norm(uniq - uniq[0], axis=1)
    while len(chosen) < target_count:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(uniq - uniq[nxt], axis=1))
    return PrintPalette(uniq[chosen])


def export_adv_dataset(patch, index: DatasetIndex, transform_cfg: TransformConfig, out_dir,
                       seed: int = 0) -> int:
    """Write patched copies of every image plus its label file; returns the count."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    n = 0
    for i, (img_path, lbl_path) in enumerate(index):
        sample = LabeledImage(load_image(img_path, patch.dtype), read_labels(lbl_path))
        draw = sample_draw(transform_cfg, seed, i, len(sample.boxes), sample.size)
        with torch.no_grad():
            adv = apply_patch(patch, sample, transform_cfg, draw)
        target = out / "images" / f"{Path(img_path).stem}.png"
        try:
            save_image(adv.image, target)
            shutil.copyfile(lbl_path, out / "labels" / Path(lbl_path).name)
        except OSError as exc:
            raise OSError(f"failed writing {target}: {exc}") from exc
        n += 1
    return n


# ---------------------------------------------------------------------------
# run configuration (INI text)

@dataclass
class RunConfig:
    images_dir: str
    labels_dir: str
    adapters: list
    train: TrainConfig = TrainConfig()
    transform: TransformConfig = TransformConfig()
    palette_path: str | None = None
    output_dir: str = "out"
    seed: int = 0

    @property
    def loss_weights(self) -> LossWeights:
        return self.train.loss_weights


def _parse_value(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if text.lower() in ("none", ""):
        return None
    if "," in text:
        return tuple(_parse_value(t) for t in text.split(","))
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _section_kwargs(parser, section, cls, skip=()):
    if not parser.has_section(section):
        return {}
    known = {f.name for f in fields(cls)}
    kw = {}
    for key, raw in parser.items(section):
        if key in skip:
            continue
        if key not in known:
            raise ValueError(f"[{section}] unknown key {key!r}")
        kw[key] = _parse_value(raw)
    return kw


def loads_config(text: str, base_dir=None, check_paths: bool = True) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    parser.read_string(text)
    base = Path(base_dir) if base_dir is not None else Path(".")

    def resolve(p):
        if p is None:
            return None
        p = Path(str(p))
        return str(p if p.is_absolute() else base / p)

    run = dict(parser.items("run")) if parser.has_section("run") else {}
    seed = int(run.get("seed", 0))
    loss = LossWeights(**{k: float(v) for k, v in
                          _section_kwargs(parser, "loss", LossWeights).items()})
    tkw = _section_kwargs(parser, "train", TrainConfig, skip=("seed", "loss_weights"))
    for key in ("patch_size", "fixed_weights"):
        if key in tkw and tkw[key] is not None and not isinstance(tkw[key], tuple):
            tkw[key] = (tkw[key],)
    train = TrainConfig(**tkw, loss_weights=loss, seed=seed)
    xkw = _section_kwargs(parser, "transform", TransformConfig)
    transform = TransformConfig(**xkw)
    adapters = []
    for section in parser.sections():
        if section.startswith("adapter."):
            entry = {k: _parse_value(v) for k, v in parser.items(section)}
            entry["name"] = section[len("adapter."):]
            if "weights" in entry and entry["weights"] is not None:
                entry["weights"] = resolve(entry["weights"])
            adapters.append(entry)
    if not adapters:
        raise ValueError("config defines no [adapter.<name>] section")
    if not parser.has_section("dataset"):
        raise ValueError("config needs a [dataset] section")
    cfg = RunConfig(
        images_dir=resolve(parser.get("dataset", "images")),
        labels_dir=resolve(parser.get("dataset", "labels")),
        adapters=adapters, train=train, transform=transform,
        palette_path=resolve(_parse_value(run.get("palette", ""))),
        output_dir=resolve(run.get("output", "out")), seed=seed,
    )
    if check_paths:
        for p in (cfg.images_dir, cfg.labels_dir):
            if not Path(p).is_dir():
                raise FileNotFoundError(f"dataset directory {p} does not exist")
        if cfg.palette_path and not Path(cfg.palette_path).is_file():
            raise FileNotFoundError(f"palette file {cfg.palette_path} does not exist")
    return cfg


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    return loads_config(path.read_text(), base_dir=path.parent, check_paths=check_paths)


def dumps_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"seed": str(cfg.seed), "output": cfg.output_dir,
                     "palette": cfg.palette_path or "none"}
    parser["dataset"] = {"images": cfg.images_dir, "labels": cfg.labels_dir}
    parser["train"] = {f.name: _format_value(getattr(cfg.train, f.name))
                       for f in fields(TrainConfig) if f.name not in ("seed", "loss_weights")}
    parser["loss"] = {"alpha": repr(cfg.loss_weights.alpha), "beta": repr(cfg.loss_weights.beta)}
    parser["transform"] = {f.name: _format_value(getattr(cfg.transform, f.name))
                           for f in fields(TransformConfig)}
    for entry in cfg.adapters:
        parser[f"adapter.{entry['name']}"] = {k: _format_value(v) for k, v in entry.items()
                                              if k != "name"}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
