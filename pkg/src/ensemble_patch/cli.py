"""Command-line entry point: ``ensemble-patch {train,eval,preview,palette,export-adv}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .data import (build_palette, export_adv_dataset, load_config, load_dataset, load_samples,
                   save_image, with_seed)
from .detectors import build_adapter
from .ensemble import save_checkpoint, train, write_log_csv
from .evaluation import evaluate_patch
from .patch import grid_palette, init_patch, load_patch, read_palette, save_patch, write_palette
from .transforms import apply_patch, sample_draw

CONFIG_ENV = "ENSEMBLE_PATCH_CONFIG"

log = logging.getLogger("ensemble_patch")


def _config(args):
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        raise ValueError(f"no config given (use --config or set {CONFIG_ENV})")
    cfg = load_config(path)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def _palette(cfg):
    return read_palette(cfg.palette_path) if cfg.palette_path else grid_palette()


def _out_dir(cfg, args) -> Path:
    out = Path(getattr(args, "out", None) or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg, args)
    samples = load_samples(load_dataset(cfg.images_dir, cfg.labels_dir))
    adapters = [build_adapter(e) for e in cfg.adapters]
    every = args.checkpoint_every

    def checkpoint(step, patch, w):
        if every and (step + 1) % every == 0:
            save_checkpoint(patch, w, step, cfg.seed, out / "checkpoints", f"step_{step + 1:06d}")

    patch, rows = train(samples, adapters, cfg.train, cfg.transform, _palette(cfg), checkpoint)
    save_patch(patch, out / "patch.png")
    write_log_csv(rows, out / "log.csv")
    print(f"wrote {out / 'patch.png'} and {out / 'log.csv'} ({len(rows)} steps)")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg, args)
    patch = load_patch(args.patch)
    samples = load_samples(load_dataset(cfg.images_dir, cfg.labels_dir))
    reports = {}
    for entry in cfg.adapters:
        det = build_adapter(entry)
        rep = evaluate_patch(patch, samples, det, cfg.transform, cfg.seed,
                             args.conf, args.nms, cfg.transform.person_class)
        reports[det.name] = json.loads(rep.to_json())
        print(f"{det.name}: AP {rep.ap_clean:.2f} -> {rep.ap_adv:.2f}, ASR {rep.asr:.3f}")
    target = out / args.report
    target.write_text(json.dumps(reports, indent=2) + "\n")
    print(f"wrote {target}")
    return 0


def cmd_preview(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg, args) / "preview"
    out.mkdir(parents=True, exist_ok=True)
    if args.patch:
        patch = load_patch(args.patch)
    else:
        h, w = cfg.train.patch_size
        patch = init_patch(h, w, cfg.train.init_mode, cfg.seed, cfg.train.init_path)
    index = load_dataset(cfg.images_dir, cfg.labels_dir)
    samples = load_samples(index)
    if not samples:
        raise ValueError("dataset is empty, nothing to preview")
    for n in range(args.count):
        i = n % len(samples)
        s = samples[i]
        draw = sample_draw(cfg.transform, cfg.seed, i, len(s.boxes), s.size, round_index=n)
        with torch.no_grad():
            adv = apply_patch(patch, s, cfg.transform, draw)
        save_image(adv.image, out / f"preview_{n:03d}.png")
    print(f"wrote {args.count} previews to {out}")
    return 0


def cmd_palette(args) -> int:
    measured = read_palette(args.input)
    pal = build_palette(measured.colors, args.count)
    target = Path(args.output)
    target.parent.mkdir(parents=True, exist_ok=True)
    write_palette(pal, target)
    print(f"wrote {len(pal)} colours to {target}")
    return 0


def cmd_export_adv(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "adv"
    index = load_dataset(cfg.images_dir, cfg.labels_dir)
    n = export_adv_dataset(load_patch(args.patch), index, cfg.transform, out, cfg.seed)
    print(f"exported {n} samples to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ensemble-patch",
                                 description="Adversarial patches against detector ensembles.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help=f"run config (default: ${CONFIG_ENV})")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "optimise a patch")
    p.add_argument("--out", help="output directory (default: from config)")
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="N")

    p = add("eval", cmd_eval, "AP / ASR of a patch on the config dataset")
    p.add_argument("--patch", required=True)
    p.add_argument("--out")
    p.add_argument("--report", default="report.json", help="file name inside the out dir")
    p.add_argument("--conf", type=float, default=0.5)
    p.add_argument("--nms", type=float, default=0.4)

    p = add("preview", cmd_preview, "write composited samples as PNG")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--patch", help="patch PNG (default: the configured initial patch)")
    p.add_argument("--out")

    p = add("palette", cmd_palette, "reduce measured printer colours to a palette")
    p.add_argument("--input", required=True, help="measured colours, palette text format")
    p.add_argument("--output", required=True)
    p.add_argument("--count", type=int, default=30)

    p = add("export-adv", cmd_export_adv, "write a patched copy of the dataset")
    p.add_argument("--patch", required=True)
    p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, TypeError, RuntimeError) as exc:
        print(f"ensemble-patch {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
