"""Command-line interface.

Subcommands: synth, train, evaluate, predict, verify. Exit codes: 0
success, 1 validation error, 2 runtime failure, 3 verification failure.
MSU_THREADS bounds the worker/thread count; --seed overrides config seeds.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .checkpoint import load_checkpoint
from .data import CLASS_NAMES, OVERLAY_COLORS, load_dataset, split_dataset
from .errors import (CheckpointError, ConfigError, DataError, EvaluationError,
                     MSUError, ShapeError)
from .metrics import ConfusionCounts, compute_metrics, confusion_accumulate
from .phantom import PhantomSpec, synthesize_dataset
from .train import RunConfig, evaluate_model, run_training, samples_to_tensors
from .verify import run_suites

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3


def _apply_threads() -> None:
    threads = os.environ.get("MSU_THREADS")
    if threads:
        try:
            torch.set_num_threads(int(threads))
        except ValueError:
            raise ConfigError(f"MSU_THREADS must be an integer, got {threads!r}") from None


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ConfigError(f"--size must look like 256x256, got {text!r}") from None


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} is not empty; pass --force to write into it")
    h, w = _parse_size(args.size)
    spec = PhantomSpec(canvas=(h, w))
    synthesize_dataset(out, args.count, args.seed, spec)
    print(f"wrote {args.count} phantoms to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_json_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.model.seed = args.seed
    cfg.validate()
    result = run_training(cfg, resume=args.resume)
    summary = {"steps": cfg.steps, "best_mDC": result["best"]["mDC"],
               "splits": result["splits"], "checkpoints": result["checkpoints"]}
    print(json.dumps(summary, indent=2))
    print(f"training done; best mDC {result['best']['mDC']:.4f} "
          f"at step {result['best']['step']}", file=sys.stderr)
    return EXIT_OK


def _select_split(samples, split: str, ratios, seed: int):
    if split == "all":
        return samples
    train, val, test = split_dataset(samples, ratios, seed)
    return {"train": train, "val": val, "test": test}[split]


def cmd_evaluate(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.ckpt)
    if model.cfg.num_classes != len(CLASS_NAMES):
        raise ConfigError(f"checkpoint has {model.cfg.num_classes} classes, dataset "
                          f"taxonomy has {len(CLASS_NAMES)}")
    samples = load_dataset(args.data)
    ratios = tuple(float(r) for r in args.ratios.split(","))
    if len(ratios) != 3:
        raise ConfigError(f"--ratios needs three comma-separated values, got {args.ratios!r}")
    subset = _select_split(samples, args.split, ratios, args.split_seed)
    if not subset:
        raise DataError(f"split {args.split!r} of {args.data} is empty")
    report = evaluate_model(model, subset, batch_size=args.batch_size)
    print(report.to_json())
    print(report.to_table(), file=sys.stderr)
    if args.out:
        Path(args.out).write_text(report.to_json())
    return EXIT_OK


def _pad_to_32(arr: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = arr.shape[:2]
    ph, pw = (-h) % 32, (-w) % 32
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return arr, (h, w)


def cmd_predict(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.ckpt)
    model.eval()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in args.input:
        try:
            image = np.asarray(Image.open(path).convert("RGB"))
        except (OSError, ValueError) as e:
            print(f"error: cannot read {path}: {e}", file=sys.stderr)
            failures += 1
            continue
        h, w = image.shape[:2]
        if (h % 32 or w % 32) and not args.pad_to_32:
            print(f"error: {path} is {h}x{w}, not divisible by 32 "
                  f"(pass --pad-to-32)", file=sys.stderr)
            failures += 1
            continue
        padded, (oh, ow) = _pad_to_32(image)
        tensor = torch.from_numpy(padded.astype(np.float32) / 255.0).permute(2, 0, 1)[None]
        with torch.no_grad():
            pred = model(tensor).argmax(dim=1)[0].numpy().astype(np.uint8)
        pred = pred[:oh, :ow]
        stem = Path(path).stem
        from .data import _mask_to_png
        _mask_to_png(pred).save(out_dir / f"{stem}_mask.png")
        if args.overlay:
            overlay = image.copy()
            for idx, color in OVERLAY_COLORS.items():
                sel = pred == idx
                overlay[sel] = (0.5 * overlay[sel] + 0.5 * np.array(color)).astype(np.uint8)
            Image.fromarray(overlay).save(out_dir / f"{stem}_overlay.png")
        print(f"wrote {out_dir / (stem + '_mask.png')}", file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    summary = run_suites(args.suite, trials=args.trials, seed=args.seed or 0,
                         log=lambda line: print(line, file=sys.stderr))
    print(json.dumps(summary, indent=2))
    return EXIT_OK if summary["passed"] else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msumamba",
                                     description="Hybrid convolutional/state-space "
                                                 "segmentation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", default="256x256", help="canvas as HxW (default 256x256)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--ratios", default="0.7,0.2,0.1")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("predict", help="segment images with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", action="store_true")
    p.add_argument("--pad-to-32", action="store_true",
                   help="pad inputs to a multiple of 32, crop the masks back")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("verify", help="run the gradient/oracle verification suites")
    p.add_argument("--suite", default="all", choices=("gradcheck", "oracles", "all"))
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_threads()
        return args.fn(args)
    except (ConfigError, DataError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CheckpointError, EvaluationError, MSUError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
