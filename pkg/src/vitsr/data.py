"""Training pairs for both stages, dataset scanning and a synthetic image generator.

A dataset root holds ``train/`` and ``val/`` folders of PNG files.
Stage ``colorization`` pairs a gray (replicated to 3 channels) input with
the color crop; stage ``super_resolution`` pairs the bicubic
down-then-up-sampled crop with the original.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import os
from pathlib import Path

import numpy as np
from PIL import Image

from . import imageops
from .errors import DataError, DimensionError

log = logging.getLogger(__name__)

COLORIZATION = "colorization"
SUPER_RESOLUTION = "super_resolution"
STAGES = (COLORIZATION, SUPER_RESOLUTION)
IMAGE_SUFFIXES = (".png",)


@dataclasses.dataclass(frozen=True)
class DatasetSpec:
    root: str
    split: str = "train"
    crop_size: int = 256
    scale: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.crop_size % self.scale:
            raise DimensionError(f"crop_size {self.crop_size} not divisible by scale {self.scale}")

    @property
    def directory(self):
        return Path(self.root) / self.split


@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    path: str
    width: int
    height: int


@dataclasses.dataclass
class TrainPair:
    input: np.ndarray  # (3, S, S) float32
    target: np.ndarray
    stage: str


def scan_dataset(spec):
    """Sorted manifest of images at least ``crop_size`` on both sides."""
    directory = spec.directory
    if not directory.is_dir():
        raise DataError(f"dataset split directory not found: {directory}")
    entries = []
    for name in sorted(os.listdir(directory)):
        if not name.lower().endswith(IMAGE_SUFFIXES):
            continue
        path = directory / name
        try:
            with Image.open(path) as im:
                width, height = im.size
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        if min(width, height) < spec.crop_size:
            log.warning("skipping %s: %dx%d smaller than crop %d",
                        path, width, height, spec.crop_size)
            continue
        entries.append(ManifestEntry(str(path), width, height))
    if not entries:
        raise DataError(f"no usable images in {directory}")
    log.info("%s: %d usable images", directory, len(entries))
    return entries


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for e in entries:
            f.write(f"{e.path}\t{e.width}\t{e.height}\n")


def read_manifest(path):
    entries = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                p, w, h = line.rstrip("\n").split("\t")
                entries.append(ManifestEntry(p, int(w), int(h)))
    return entries


@functools.lru_cache(maxsize=256)
def _load(path):
    img = imageops.read_png(path)
    img.flags.writeable = False
    return img


def load_image(path):
    return _load(str(path))


def _chw(img):
    return np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1))


def make_sr_pair(hr_crop, scale=4):
    hr = np.asarray(hr_crop, dtype=np.float32)
    h, w = hr.shape[:2]
    if h % scale or w % scale:
        raise DimensionError(f"crop {h}x{w} not divisible by scale {scale}")
    lr = imageops.bicubic_resize(hr, h // scale, w // scale)
    upsampled = imageops.bicubic_resize(lr, h, w)
    return TrainPair(_chw(upsampled), _chw(hr), SUPER_RESOLUTION)


def make_colorization_pair(hr_crop):
    hr = np.asarray(hr_crop, dtype=np.float32)
    gray = imageops.rgb_to_gray(hr)
    return TrainPair(_chw(np.repeat(gray[..., None], 3, axis=2)), _chw(hr), COLORIZATION)


def make_pair(hr_crop, stage, scale=4):
    if stage == COLORIZATION:
        return make_colorization_pair(hr_crop)
    if stage == SUPER_RESOLUTION:
        return make_sr_pair(hr_crop, scale)
    raise ValueError(f"unknown stage {stage!r}")


def random_crop(img, size, rng):
    h, w = img.shape[:2]
    if h < size or w < size:
        raise DimensionError(f"image {h}x{w} smaller than crop {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[top:top + size, left:left + size]


def center_crop(img, size):
    h, w = img.shape[:2]
    if h < size or w < size:
        raise DimensionError(f"image {h}x{w} smaller than crop {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


def epoch_rng(seed, epoch):
    return np.random.default_rng([seed, epoch])


def batch_iterator(manifest, spec, stage, batch_size, rng):
    """Yield (inputs, targets) arrays of shape (B, 3, S, S).

    Files are shuffled and cropped with ``rng``; the last partial batch is
    dropped.
    """
    order = rng.permutation(len(manifest))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        pairs = []
        for i in order[start:start + batch_size]:
            crop = random_crop(load_image(manifest[i].path), spec.crop_size, rng)
            pairs.append(make_pair(crop, stage, spec.scale))
        yield (np.stack([p.input for p in pairs]), np.stack([p.target for p in pairs]))


def validation_pairs(manifest, spec, stage):
    """Deterministic center-crop pairs for every file in the manifest."""
    return [make_pair(center_crop(load_image(e.path), spec.crop_size), stage, spec.scale)
            for e in manifest]


def _hue(h, sat=0.8):
    # unit-brightness RGB on a cyclic palette, h in [0, 1)
    angles = 2 * np.pi * (h + np.array([0.0, 1 / 3, 2 / 3]))
    return 0.5 + 0.5 * sat * np.cos(angles)


def synthetic_image(size, rng):
    """Random mix of a colored gradient, Gaussian blobs and sinusoid gratings.

    Colors follow structure visible in the luminance (gradient direction,
    blob polarity, grating frequency), with a little jitter, so gray-to-color
    prediction is learnable.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))

    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / (np.ptp(t) + 1e-12)
    hue = angle / (2 * np.pi)
    dark, light = 0.3 * _hue(hue + 0.5), 0.9 * _hue(hue)
    img += (1 - t)[..., None] * dark + t[..., None] * light

    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, 1, 2)
        sigma = rng.uniform(0.04, 0.2)
        sign = rng.choice([-1.0, 1.0])
        color = _hue(0.05 if sign > 0 else 0.6) + rng.normal(0, 0.05, 3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        img += 0.45 * sign * blob[..., None] * color

    for _ in range(int(rng.integers(1, 4))):
        freq = rng.uniform(2, size / 6)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        color = _hue(0.35 if freq < size / 16 else 0.8) - 0.5
        img += 0.15 * wave[..., None] * color

    return np.clip(img, 0.0, 1.0)


def generate_synthetic(count, size, seed, out_dir):
    """Write ``count`` synthetic PNGs to ``out_dir``; returns their manifest."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}") from exc
    entries = []
    for i in range(count):
        img = synthetic_image(size, np.random.default_rng([seed, i]))
        path = out_dir / f"synth_{i:05d}.png"
        try:
            imageops.write_png(path, img)
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
        entries.append(ManifestEntry(str(path), size, size))
    return entries


def make_synthetic_dataset(root, train_count, val_count, size, seed):
    """``root/train`` and ``root/val`` with disjoint seeds."""
    root = Path(root)
    train = generate_synthetic(train_count, size, seed, root / "train")
    val = generate_synthetic(val_count, size, seed + 1_000_003, root / "val")
    return train, val
