"""Procedural vessel-like tree images with ground-truth masks, plus PGM I/O.

Each sample is a recursive binary tree of line segments rasterized as stroked
capsules (distance-to-segment <= width/2). Stroke width shrinks per depth
down to 1 px, so every mask carries the thin-branch regime. The grayscale
image is the mask rendered at two intensity levels, optionally box-blurred,
with Gaussian noise clipped back to [0, 1]. Generation is deterministic per
(config, seed).

Datasets live as <root>/{images,masks}/<id>.pgm plus a manifest.tsv with
columns (id, seed, split).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import (ContractViolation, PgmHeaderError, PgmMaxvalError,
                     PgmPayloadError)

SPLITS = ("train", "val", "test")


@dataclass
class SynthConfig:
    size: int = 64
    depth: int = 3
    root_width: float = 4.0
    width_decay: float = 0.6
    angle_jitter: float = 0.35      # radians
    vessel_intensity: float = 0.68
    background_intensity: float = 0.32
    noise_sigma: float = 0.06
    blur: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.size < 16:
            raise ContractViolation(f"size must be >= 16, got {self.size}")
        if self.root_width < 1:
            raise ContractViolation(f"root_width must be >= 1, got {self.root_width}")
        if not 0 < self.width_decay <= 1:
            raise ContractViolation(f"width_decay must be in (0, 1], got {self.width_decay}")
        if self.depth < 1:
            raise ContractViolation(f"depth must be >= 1, got {self.depth}")


@dataclass
class Sample:
    image: np.ndarray   # (h, w) grayscale in [0, 1]
    mask: np.ndarray    # (h, w) binary
    id: str


def _clamp_point(p: np.ndarray, size: int, margin: float = 1.5) -> np.ndarray:
    return np.clip(p, margin, size - 1 - margin)


def _grow(segments: List[Tuple[np.ndarray, np.ndarray, float]], p: np.ndarray,
          angle: float, length: float, width: float, level: int,
          config: SynthConfig, rng: np.random.Generator) -> None:
    angle = angle + rng.uniform(-config.angle_jitter, config.angle_jitter)
    q = p + length * np.array([math.sin(angle), math.cos(angle)])
    q = _clamp_point(q, config.size)
    segments.append((p, q, width))
    if level >= config.depth:
        return
    spread = 0.55 + rng.uniform(-0.15, 0.15)
    child_w = max(1.0, width * config.width_decay)
    child_len = length * rng.uniform(0.62, 0.78)
    for side in (-1.0, 1.0):
        _grow(segments, q, angle + side * spread, child_len, child_w,
              level + 1, config, rng)


def _rasterize(segments, size: int) -> np.ndarray:
    rows = np.arange(size, dtype=np.float64)[:, None]
    cols = np.arange(size, dtype=np.float64)[None, :]
    mask = np.zeros((size, size), dtype=bool)
    for p, q, width in segments:
        d = q - p
        den = float(d @ d)
        if den < 1e-12:
            dist2 = (rows - p[0]) ** 2 + (cols - p[1]) ** 2
        else:
            t = ((rows - p[0]) * d[0] + (cols - p[1]) * d[1]) / den
            t = np.clip(t, 0.0, 1.0)
            dist2 = (rows - (p[0] + t * d[0])) ** 2 + (cols - (p[1] + t * d[1])) ** 2
        mask |= dist2 <= (width / 2.0) ** 2
    return mask


def _box_blur3(img: np.ndarray) -> np.ndarray:
    pad = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            out += pad[di:di + img.shape[0], dj:dj + img.shape[1]]
    return out / 9.0


def generate(config: SynthConfig, seed: int) -> Sample:
    """One vessel-tree sample, deterministic for a given (config, seed)."""
    rng = np.random.default_rng(seed)
    size = config.size
    # root on a random edge, trunk heading inward
    edge = int(rng.integers(4))
    along = rng.uniform(0.25, 0.75) * (size - 1)
    margin = 2.0
    if edge == 0:
        p, angle = np.array([margin, along]), math.pi / 2    # top, heading down
    elif edge == 1:
        p, angle = np.array([size - 1 - margin, along]), -math.pi / 2  # bottom, up
    elif edge == 2:
        p, angle = np.array([along, margin]), 0.0            # left, heading right
    else:
        p, angle = np.array([along, size - 1 - margin]), math.pi
    angle += rng.uniform(-0.25, 0.25)

    segments: List[Tuple[np.ndarray, np.ndarray, float]] = []
    _grow(segments, p, angle, length=0.30 * size, width=config.root_width,
          level=0, config=config, rng=rng)
    mask = _rasterize(segments, size)

    img = np.where(mask, config.vessel_intensity, config.background_intensity)
    img = img.astype(np.float64)
    if config.blur:
        img = _box_blur3(img)
    if config.noise_sigma > 0:
        img = img + rng.normal(0.0, config.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(image=img, mask=mask.astype(np.uint8), id="")


# ---------------------------------------------------------------------------
# PGM (P5) round trip
# ---------------------------------------------------------------------------

def write_pgm(plane: np.ndarray, path) -> None:
    """Binary PGM, maxval 255, rounding half-up. Values must be in [0, 1]."""
    if plane.ndim != 2:
        raise ContractViolation(f"plane must be 2-D, got {plane.shape}")
    arr = np.asarray(plane, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ContractViolation("plane values must lie in [0, 1] for PGM write")
    data = np.floor(arr * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Reads a binary PGM back to a float32 plane in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise PgmHeaderError(f"{path}: not a P5 PGM")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise PgmHeaderError(f"{path}: malformed header field")
        fields.append(int(data[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise PgmMaxvalError(f"{path}: maxval {maxval} != 255")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PgmHeaderError(f"{path}: missing separator after maxval")
    pos += 1
    payload = data[pos:pos + h * w]
    if len(payload) < h * w:
        raise PgmPayloadError(
            f"{path}: payload has {len(payload)} bytes, expected {h * w}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return (arr.astype(np.float32) / 255.0)


# ---------------------------------------------------------------------------
# dataset directory layout
# ---------------------------------------------------------------------------

def write_dataset(root, config: SynthConfig, seed: int,
                  counts: Tuple[int, int, int]) -> List[Tuple[str, int, str]]:
    """Generates counts = (train, val, test) samples under `root`.

    Per-sample seeds are drawn deterministically from the master seed and
    recorded in manifest.tsv, so any sample can be regenerated on its own.
    """
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    master = np.random.default_rng(seed)
    rows = []
    idx = 0
    for split, count in zip(SPLITS, counts):
        for _ in range(count):
            sample_seed = int(master.integers(0, 2 ** 31 - 1))
            sample = generate(config, sample_seed)
            sid = f"s{idx:04d}"
            write_pgm(sample.image, os.path.join(root, "images", f"{sid}.pgm"))
            write_pgm(sample.mask.astype(np.float32),
                      os.path.join(root, "masks", f"{sid}.pgm"))
            rows.append((sid, sample_seed, split))
            idx += 1
    with open(os.path.join(root, "manifest.tsv"), "w", encoding="utf-8") as f:
        f.write("id\tseed\tsplit\n")
        for sid, sample_seed, split in rows:
            f.write(f"{sid}\t{sample_seed}\t{split}\n")
    return rows


def read_manifest(root) -> List[Tuple[str, int, str]]:
    rows = []
    with open(os.path.join(root, "manifest.tsv"), encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if header != ["id", "seed", "split"]:
            raise ContractViolation(f"unexpected manifest columns {header}")
        for line in f:
            sid, sample_seed, split = line.rstrip("\n").split("\t")
            rows.append((sid, int(sample_seed), split))
    return rows


def load_split(root, split: Optional[str] = None) -> List[Sample]:
    """Loads image/mask pairs for one split (or all when split is None)."""
    samples = []
    for sid, _, row_split in read_manifest(root):
        if split is not None and row_split != split:
            continue
        image = read_pgm(os.path.join(root, "images", f"{sid}.pgm"))
        mask = read_pgm(os.path.join(root, "masks", f"{sid}.pgm"))
        samples.append(Sample(image=image, mask=(mask > 0.5).astype(np.uint8), id=sid))
    return samples
