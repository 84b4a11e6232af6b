"""On-disk formats: binary PGM/PPM images, JSONL manifests, JSON checkpoints.

All writers go through a temp file in the target directory and an atomic
rename, so a failure never leaves a truncated file behind.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable

import numpy as np

from .pipeline import GEMModel, Sample, TrainConfig, fit_gaze_count

CHECKPOINT_VERSION = 1
SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """Malformed file contents or a file that disagrees with the config."""


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- netpbm -------------------------------------------------------------------------
def _read_header(buf: bytes, n_fields: int) -> tuple[list[bytes], int]:
    fields, pos = [], 0
    while len(fields) < n_fields:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        fields.append(buf[start:pos])
    return fields, pos + 1  # exactly one whitespace byte before the raster


def encode_pgm(image: np.ndarray) -> bytes:
    """H×W floats in [0, 1] -> binary 8-bit graymap."""
    img = np.asarray(image, dtype=np.float64)
    raster = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = raster.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    fields, pos = _read_header(buf, 4)
    if fields[0] != b"P5":
        raise FormatError(f"not a binary graymap (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"only 8-bit graymaps are supported (maxval {maxval})")
    if len(buf) - pos < w * h:
        raise FormatError("graymap raster is truncated")
    raster = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos)
    return raster.reshape(h, w).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(path, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pgm(image))


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    fields, pos = _read_header(buf, 4)
    if fields[0] != b"P6":
        raise FormatError(f"not a binary pixmap (magic {fields[0]!r})")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)


def point_pixel(point, h: int, w: int) -> tuple[int, int]:
    col = min(max(int(np.floor(point[0] * w)), 0), w - 1)
    row = min(max(int(np.floor(point[1] * h)), 0), h - 1)
    return row, col


def render_overlay(image: np.ndarray, pred, gt=None) -> np.ndarray:
    """Gray image -> RGB with 3×3 squares: GT red, predictions blue (drawn last)."""
    gray = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    layers = []
    if gt is not None:
        layers.append((gt, (255, 0, 0)))
    layers.append((pred, (0, 0, 255)))
    for points, color in layers:
        for p in np.asarray(points, dtype=np.float64).reshape(-1, 2):
            r, c = point_pixel(p, h, w)
            rgb[max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2] = color
    return rgb


# -- manifest -------------------------------------------------------------------------
def manifest_record(image_rel: str, sample: Sample, split: str) -> dict:
    return {
        "image": image_rel,
        "tokens": [int(t) for t in sample.tokens],
        "gaze": [[float(x), float(y)] for x, y in sample.gaze],
        "class": int(sample.meta.get("cls", -1)),
        "split": split,
    }


def write_manifest(path, records: Iterable[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_manifest(path) -> list[dict]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest line {lineno}: invalid JSON ({exc.msg})") from None
        for key in ("image", "tokens", "gaze", "split"):
            if key not in rec:
                raise FormatError(f"manifest line {lineno}: missing field {key!r}")
        if rec["split"] not in SPLITS:
            raise FormatError(f"manifest line {lineno}: field 'split' has unknown value {rec['split']!r}")
        gaze = np.asarray(rec["gaze"], dtype=np.float64)
        if gaze.ndim != 2 or gaze.shape[1] != 2 or len(gaze) == 0:
            raise FormatError(f"manifest line {lineno}: field 'gaze' must be a non-empty list of [x, y]")
        if gaze.min() < 0 or gaze.max() > 1:
            raise FormatError(f"manifest line {lineno}: field 'gaze' has coordinates outside [0, 1]")
        records.append(rec)
    return records


def load_split(data_dir, split: str, cfg: TrainConfig) -> list[Sample]:
    """Samples of one split, gaze counts fitted to cfg.k deterministically."""
    data_dir = Path(data_dir)
    samples = []
    for i, rec in enumerate(r for r in read_manifest(data_dir / "manifest.jsonl") if r["split"] == split):
        img_path = data_dir / rec["image"]
        if not img_path.exists():
            raise FormatError(f"manifest field 'image': missing file {rec['image']}")
        image = read_pgm(img_path)
        if image.shape != (cfg.image_size, cfg.image_size):
            raise FormatError(f"field 'image': {rec['image']} is {image.shape}, expected {cfg.image_size}²")
        tokens = np.asarray(rec["tokens"], dtype=np.int64)
        if tokens.shape != (cfg.tokens,) or tokens.min() < 0 or tokens.max() >= cfg.vocab:
            raise FormatError(f"field 'tokens': {rec['tokens']} invalid for config")
        rng = np.random.default_rng([cfg.seed, 7919, i])
        gaze = fit_gaze_count(rec["gaze"], cfg.k, rng)
        samples.append(
            Sample(image=image, tokens=tokens, gaze=gaze, valid=np.ones(cfg.k, dtype=bool),
                   meta={"cls": rec.get("class", -1)})
        )
    return samples


# -- config / checkpoint ----------------------------------------------------------------
def read_config(path) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"config: invalid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise FormatError("config: expected a JSON object")
    try:
        return TrainConfig.from_dict(raw)
    except KeyError as exc:
        raise FormatError(f"config: {exc.args[0]}") from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"config: {exc}") from None


def checkpoint_dict(cfg: TrainConfig, state: dict[str, np.ndarray]) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "params": [
            {
                "name": name,
                "shape": list(arr.shape),
                "values": [float(v) for v in np.asarray(arr, dtype=np.float32).reshape(-1)],
            }
            for name, arr in state.items()
        ],
    }


def save_checkpoint(path, cfg: TrainConfig, state: dict[str, np.ndarray]) -> None:
    atomic_write_text(path, json.dumps(checkpoint_dict(cfg, state)))


def read_checkpoint(path) -> tuple[TrainConfig, dict[str, np.ndarray]]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint: invalid JSON ({exc.msg})") from None
    if raw.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint: unsupported format_version {raw.get('format_version')!r}")
    cfg = TrainConfig.from_dict(raw["config"])
    state = {}
    for entry in raw["params"]:
        values = np.asarray(entry["values"], dtype=np.float32)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape)):
            raise FormatError(f"checkpoint: parameter {entry['name']!r} has {values.size} values for shape {shape}")
        state[entry["name"]] = values.astype(np.float64).reshape(shape)
    return cfg, state


def load_model(path, cfg: TrainConfig | None = None) -> GEMModel:
    """Model from a checkpoint; ``cfg`` overrides the echoed config."""
    saved_cfg, state = read_checkpoint(path)
    model = GEMModel(cfg or saved_cfg)
    try:
        model.params.load_state(state)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint does not match config: {exc}") from None
    return model
