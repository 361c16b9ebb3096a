"""CT-style normalisation, synthetic ellipse datasets and sample directories."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, values
from .errors import ConfigError, ValidationError
from .formats import load_tensor, save_tensor

CT_SCALE = 1024.0

_IMG_RE = re.compile(r"^img_(\d{4,})\.tnsr$")


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W), normalised
    mask: np.ndarray  # (1, H, W), values in {0, 1}

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ValidationError(f"bad sample shapes {self.image.shape}, {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValidationError(f"image {self.image.shape} and mask {self.mask.shape} differ spatially")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValidationError("mask is not binary")

    def astype(self, dtype) -> Sample:
        return Sample(self.image.astype(dtype), self.mask.astype(dtype))


def normalize(raw):
    """Divide raw intensities by 1024. No clipping or windowing."""
    data = values(raw)
    out = data.astype(np.result_type(data.dtype, np.float32)) / CT_SCALE
    return Tensor(out, dtype=out.dtype) if isinstance(raw, Tensor) else out


def _smooth_field(rng: np.random.Generator, size: int, lo: float, hi: float) -> np.ndarray:
    # Coarse uniform grid, bilinearly interpolated: values stay inside [lo, hi].
    grid = max(3, size // 8)
    coarse = rng.uniform(lo, hi, size=(grid, grid))
    pos = np.linspace(0.0, grid - 1, size)
    left = np.minimum(np.floor(pos).astype(int), grid - 2)
    frac = pos - left
    interp = np.zeros((size, grid))
    interp[np.arange(size), left] = 1.0 - frac
    interp[np.arange(size), left + 1] = frac
    return interp @ coarse @ interp.T


def _ellipse(rng: np.random.Generator, size: int) -> np.ndarray:
    cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
    ay, ax = rng.uniform(0.06 * size, 0.22 * size, size=2)
    theta = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _synth_one(rng: np.random.Generator, size: int) -> Sample:
    while True:
        background = _smooth_field(rng, size, -0.3, 0.3)
        mask = np.zeros((size, size), dtype=bool)
        image = background.copy()
        for _ in range(int(rng.integers(1, 4))):
            for _attempt in range(50):
                blob = _ellipse(rng, size)
                if blob.any() and not (blob & mask).any():
                    break
            else:
                continue
            mask |= blob
            image[blob] += rng.uniform(0.3, 0.7)
        fraction = mask.mean()
        if 0.01 <= fraction <= 0.40 and -0.2 <= image.mean() <= 0.5:
            return Sample(image[None], mask[None].astype(np.float64))


def synth_dataset(seed: int, count: int, height: int, width: int | None = None) -> list[Sample]:
    """Deterministic ellipse-segmentation fixtures.

    Background is smooth noise in [-0.3, 0.3]; 1-3 non-overlapping filled
    ellipses are brightened by 0.3-0.7 and form the mask. Every image has
    between 1% and 40% foreground.
    """
    width = height if width is None else width
    if height != width or height < 32 or height & (height - 1):
        raise ConfigError(f"synthetic images must be square powers of two >= 32, got {height}x{width}")
    if count < 0:
        raise ConfigError(f"count must be non-negative, got {count}")
    rng = np.random.default_rng(seed)
    return [_synth_one(rng, height) for _ in range(count)]


def split_dataset(samples: list[Sample], val_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Seeded shuffle split. ``val_fraction == 0`` validates on the training set."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    if val_fraction == 0.0:
        return list(samples), list(samples)
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = max(1, int(round(len(samples) * val_fraction)))
    if n_val >= len(samples):
        raise ConfigError(f"{len(samples)} samples leave nothing to train on at val_fraction={val_fraction}")
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val


def save_samples(directory, samples: list[Sample]) -> list[Path]:
    """Write ``img_%04d.tnsr`` / ``msk_%04d.tnsr`` pairs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, sample in enumerate(samples):
        for prefix, arr in (("img", sample.image), ("msk", sample.mask)):
            path = directory / f"{prefix}_{i:04d}.tnsr"
            save_tensor(path, arr)
            written.append(path)
    return written


def load_samples(directory, raw: bool = False) -> list[Sample]:
    """Read image/mask pairs; ``raw`` images are divided by 1024 on load."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"sample directory {directory} does not exist")
    samples = []
    for path in sorted(directory.iterdir()):
        match = _IMG_RE.match(path.name)
        if not match:
            continue
        mask_path = directory / f"msk_{match.group(1)}.tnsr"
        if not mask_path.exists():
            raise FileNotFoundError(f"missing mask {mask_path} for {path}")
        image = load_tensor(path).data
        if raw:
            image = normalize(image)
        samples.append(Sample(image, load_tensor(mask_path).data))
    return samples
