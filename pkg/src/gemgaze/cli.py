"""Command-line entry points: gen-data, train, eval, predict.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .formats import (
    FormatError,
    atomic_write_bytes,
    atomic_write_text,
    encode_ppm,
    load_model,
    load_split,
    manifest_record,
    read_config,
    read_pgm,
    render_overlay,
    save_checkpoint,
    write_manifest,
    write_pgm,
)
from .pipeline import GEMModel, NonFiniteLossError, TrainConfig, evaluate, fit, make_split

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_KEYS = ("epoch", "train_loss", "train_ce", "mse", "mae", "pck02", "pck03", "pck04")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _resolve_config(path: str | None, overrides: dict) -> TrainConfig:
    cfg = read_config(path) if path else TrainConfig()
    if "GEM_SEED" in os.environ:
        try:
            overrides = {**overrides, "seed": int(os.environ["GEM_SEED"])}
        except ValueError:
            raise FormatError(f"GEM_SEED must be an integer, got {os.environ['GEM_SEED']!r}") from None
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(EXIT_DATA, f"cannot create {out}: {exc.strerror}")
    if not os.access(out, os.W_OK):
        return _fail(EXIT_DATA, f"{out} is not writable")
    cfg = TrainConfig(seed=args.seed, image_size=args.image_size)
    records = []
    try:
        for split, n in (("train", args.train), ("val", args.val), ("test", args.test)):
            for i, sample in enumerate(make_split(cfg, split, n)):
                rel = f"images/{split}_{i:05d}.pgm"
                write_pgm(out / rel, sample.image)
                records.append(manifest_record(rel, sample, split))
        write_manifest(out / "manifest.jsonl", records)
    except OSError as exc:
        return _fail(EXIT_DATA, f"writing dataset failed: {exc}")
    print(json.dumps({"out": str(out), "images": len(records)}))
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.no_vbmatch:
        overrides["beta"] = 0.0
    if args.baseline_fusion:
        overrides["fusion"] = "addition"
    if args.text_blind:
        overrides["text_blind"] = True
    cfg = _resolve_config(args.config, overrides)
    train = load_split(args.data, "train", cfg)
    val = load_split(args.data, "val", cfg)
    model = GEMModel(cfg)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".metrics.jsonl")
    lines: list[str] = []

    def on_epoch(rec):
        lines.append(json.dumps({k: rec.get(k) for k in LOG_KEYS}) + "\n")
        atomic_write_text(log_path, "".join(lines))

    atomic_write_text(log_path, "")
    best_state, _ = fit(model, train, val, on_epoch)
    save_checkpoint(args.out, cfg, best_state)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = read_config(args.config) if args.config else None
    model = load_model(args.checkpoint, cfg)
    data = load_split(args.data, args.split, model.cfg)
    if not data:
        return _fail(EXIT_DATA, f"split {args.split!r} is empty or missing")
    print(json.dumps(evaluate(model, data).to_dict()))
    return EXIT_OK


def _parse_points(text: str | None) -> np.ndarray | None:
    if text is None:
        return None
    pts = np.asarray(json.loads(text), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise FormatError("--gt must be a JSON list of [x, y] pairs")
    return pts


def cmd_predict(args) -> int:
    cfg = read_config(args.config) if args.config else None
    model = load_model(args.checkpoint, cfg)
    image = read_pgm(args.image)
    size = model.cfg.image_size
    if image.shape != (size, size):
        return _fail(EXIT_DATA, f"image is {image.shape[1]}×{image.shape[0]}, model expects {size}×{size}")
    tokens = np.asarray(args.tokens, dtype=np.int64)
    if tokens.shape != (model.cfg.tokens,) or tokens.min() < 0 or tokens.max() >= model.cfg.vocab:
        return _fail(EXIT_DATA, f"tokens {args.tokens} invalid for vocab {model.cfg.vocab}, length {model.cfg.tokens}")
    points = model.predict(image[None, None], tokens[None])[0]
    gt = _parse_points(args.gt)
    if args.overlay:
        atomic_write_bytes(args.overlay, encode_ppm(render_overlay(image, points, gt)))
    print(json.dumps({"points": points.tolist()}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gem", description="Context-aware gaze estimation on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset (PGM images + manifest)")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=2000)
    g.add_argument("--val", type=int, default=200)
    g.add_argument("--test", type=int, default=200)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--image-size", type=int, default=128)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and save the best-val checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="per-epoch metrics JSONL (default: <out>.metrics.jsonl)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--no-vbmatch", action="store_true", help="drop the matching loss (beta = 0)")
    t.add_argument("--baseline-fusion", action="store_true", help="element-wise addition baseline")
    t.add_argument("--text-blind", action="store_true", help="zero all text features")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print metrics JSON for one split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("predict", help="predict gaze points for one image and query")
    q.add_argument("--image", required=True)
    q.add_argument("--tokens", type=int, nargs="+", required=True)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--overlay")
    q.add_argument("--gt", help='ground-truth points as JSON, e.g. "[[0.5, 0.5]]"')
    q.add_argument("--config")
    q.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (FormatError, FileNotFoundError, KeyError) as exc:
        return _fail(EXIT_DATA, str(exc))
    except (NonFiniteLossError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except ValueError as exc:
        return _fail(EXIT_DATA, str(exc))


if __name__ == "__main__":
    sys.exit(main())
