"""Command-line entry point: ``ccgan {synth,train,translate,evaluate,gradcheck}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import gradcheck
from .core import ConfigError, Direction, TissueClass, config_from_dict, denormalize_image, normalize_image
from .data import SyntheticSpec, generate_synthetic, load_manifest
from .evaluation import evaluate, render_report
from .inference import PRESETS, preset_mode, translate_tiled
from .networks import load_checkpoint
from .training import run_training

CACHE_ENV = "CCGAN_CACHE_DIR"

log = logging.getLogger("ccgan")


class UsageError(Exception):
    """Bad arguments or configuration; exit code 2."""


def _parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="ccgan", description="Class-conditioned cycle-consistent stain translation.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", help="write the synthetic two-domain fixture", formatter_class=fmt)
    s.add_argument("--classes", type=int, default=3, help="number of tissue classes (first k of H F N TF HF HB TN BG)")
    s.add_argument("--size", type=int, default=64, help="patch edge length in pixels")
    s.add_argument("--per-class", type=int, default=20, help="patches per class and domain")
    s.add_argument("--seed", type=int, default=7, help="fixture seed")
    s.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train the six networks", formatter_class=fmt)
    t.add_argument("--config", default=None, help="YAML config file (flags override it)")
    t.add_argument("--manifest", required=True, help="dataset manifest (TSV)")
    t.add_argument("--out", required=True, help="run directory for checkpoints and metrics")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.add_argument("--iterations", type=int, default=None, help="override total_iterations")
    t.add_argument("--seed", type=int, default=None, help="override seed")
    t.add_argument("--batch-size", type=int, default=None, help="override batch_size")
    t.add_argument("--checkpoint-every", type=int, default=None, help="override checkpoint_every")
    t.add_argument("--unconditioned", action="store_true", help="ablation: generators without class input")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any config key, e.g. loss_weights.beta_pho=0")
    t.add_argument("--cache-dir", default=os.environ.get(CACHE_ENV), help=f"Laplacian cache directory (env {CACHE_ENV})")

    r = sub.add_parser("translate", help="translate one image of any size", formatter_class=fmt)
    r.add_argument("--checkpoint", required=True, help="checkpoint file")
    r.add_argument("--input", required=True, help="input RGB image")
    r.add_argument("--output", required=True, help="output PNG path")
    r.add_argument("--direction", choices=[d.value for d in Direction], default=None, help="defaults to the preset or the checkpoint config")
    r.add_argument("--preset", choices=PRESETS, default=None, help="named dataset direction preset")
    cls = r.add_mutually_exclusive_group()
    cls.add_argument("--class", dest="tissue_class", default=None, help="condition every tile on this class token")
    cls.add_argument("--predict-class", action="store_true", help="condition each tile on the source classifier (the default)")
    r.add_argument("--tile", type=int, default=None, help="tile size (defaults to the training patch size)")
    r.add_argument("--overlap", type=int, default=None, help="tile overlap (defaults to tile // 4)")

    e = sub.add_parser("evaluate", help="per-class evaluation report", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--manifest", required=True, help="evaluation manifest")
    e.add_argument("--direction", choices=[d.value for d in Direction], default=Direction.X_to_Y.value, help="translation direction")
    e.add_argument("--n-per-class", type=int, default=30, help="patches sampled per class")
    e.add_argument("--seed", type=int, default=0, help="sampling seed")
    e.add_argument("--format", choices=("tsv", "markdown"), default="tsv", help="report format")
    e.add_argument("--output", default=None, help="report path (default: next to the checkpoint)")

    g = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients", formatter_class=fmt)
    g.add_argument("--seed", type=int, default=0, help="random seed of the test inputs")
    g.add_argument("--size", type=int, default=8, help="image edge length")
    g.add_argument("--step", type=float, default=1e-3, help="central-difference step")
    g.add_argument("--tolerance", type=float, default=1e-4, help="max relative error")
    return p


def _parse_set(items: list[str]) -> dict:
    out: dict = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        target = out
        *parents, leaf = key.split(".")
        for part in parents:
            target = target.setdefault(part, {})
        target[leaf] = yaml.safe_load(value)
    return out


def _merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for k, v in extra.items():
        merged[k] = _merge(merged.get(k) or {}, v) if isinstance(v, dict) else v
    return merged


def cmd_synth(args) -> list[Path]:
    if args.classes < 1 or args.classes > len(TissueClass):
        raise UsageError(f"--classes must be in 1..{len(TissueClass)}")
    try:
        spec = SyntheticSpec(num_classes=args.classes, patch_size=args.size, per_class_count=args.per_class, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    generate_synthetic(spec, args.out)
    return [Path(args.out) / "manifest.tsv"]


def cmd_train(args) -> list[Path]:
    data: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: top level must be a mapping")
    flags = {
        "total_iterations": args.iterations,
        "seed": args.seed,
        "batch_size": args.batch_size,
        "checkpoint_every": args.checkpoint_every,
    }
    data = _merge(data, {k: v for k, v in flags.items() if v is not None})
    if args.unconditioned:
        data["condition_generators"] = False
    data = _merge(data, _parse_set(args.set))
    manifest = load_manifest(args.manifest)
    data.setdefault("patch_size", manifest.patch_size)
    data.setdefault("num_classes", len(manifest.classes()))
    cfg = config_from_dict(data)
    result = run_training(cfg, manifest, args.out, resume=args.resume, cache_dir=args.cache_dir)
    return [result.checkpoint, result.metrics_log]


def cmd_translate(args) -> list[Path]:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    if args.preset:
        cfg = preset_mode(cfg, args.preset)
    direction = Direction(args.direction or cfg.default_direction)
    class_map = "predicted"
    if args.tissue_class is not None:
        try:
            class_map = TissueClass.parse(args.tissue_class)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if class_map.index >= ckpt.bundle.num_classes:
            raise UsageError(f"class {class_map.value} was not part of this {ckpt.bundle.num_classes}-class model")
    tile = args.tile or cfg.patch_size
    with Image.open(args.input) as im:
        pixels = normalize_image(np.asarray(im.convert("RGB")))
    try:
        out = translate_tiled(ckpt.bundle, pixels, direction, tile=tile, overlap=args.overlap, class_map=class_map)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    path = Path(args.output)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(denormalize_image(out)).save(path)
    return [path]


def cmd_evaluate(args) -> list[Path]:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    report = evaluate(ckpt.bundle, manifest, args.direction, n_per_class=args.n_per_class, seed=args.seed)
    text = render_report(report, args.format)
    sys.stdout.write(text)
    ext = "md" if args.format == "markdown" else "tsv"
    path = Path(args.output) if args.output else Path(args.checkpoint).with_name(f"{Path(args.checkpoint).stem}_report_{args.direction}.{ext}")
    path.write_text(text, encoding="utf-8")
    return [path]


def cmd_gradcheck(args) -> bool:
    results = gradcheck.run_gradchecks(seeds=(args.seed,), size=args.size, step=args.step, tolerance=args.tolerance)
    sys.stdout.write(gradcheck.render_results(results))
    return all(r.passed for r in results)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            return 0 if cmd_gradcheck(args) else 1
        handler = {"synth": cmd_synth, "train": cmd_train, "translate": cmd_translate, "evaluate": cmd_evaluate}[args.command]
        for path in handler(args):
            print(path)
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"ccgan {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"ccgan {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            log.exception("traceback")
        return 1


if __name__ == "__main__":
    sys.exit(main())
