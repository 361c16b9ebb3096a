"""End-to-end comparison of backprop gradients with central differences."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Sample, synth_dataset
from .errors import ContractError
from .model import ModelConfig, TUnetParams, forward, init_params
from .train import bce_loss

# Below this magnitude both gradients are treated as zero-level noise.
ABS_FLOOR = 1e-8


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ABS_FLOOR)


@dataclass
class CoordinateCheck:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


@dataclass
class GradcheckResult:
    checks: list[CoordinateCheck] = field(default_factory=list)
    tolerance: float = 1e-3

    @property
    def worst(self) -> CoordinateCheck:
        return max(self.checks, key=lambda c: c.rel_error)

    @property
    def worst_rel_error(self) -> float:
        return self.worst.rel_error

    @property
    def passed(self) -> bool:
        return all(c.rel_error <= self.tolerance for c in self.checks)


def _fixture(config: ModelConfig, seed: int) -> Sample:
    if config.height >= 32 and config.channels == 1:
        return synth_dataset(seed, 1, config.height)[0]
    rng = np.random.default_rng(seed)
    image = rng.uniform(-0.3, 0.8, size=(config.channels, config.height, config.width))
    mask = (rng.uniform(size=(1, config.height, config.width)) < 0.3).astype(np.float64)
    return Sample(image, mask)


def gradcheck_model(
    config: ModelConfig,
    samples: int = 200,
    seed: int = 0,
    step: float = 1e-4,
    tolerance: float = 1e-3,
    params: TUnetParams | None = None,
    sample: Sample | None = None,
) -> GradcheckResult:
    """Check ``samples`` uniformly drawn parameter coordinates of the BCE loss.

    Runs in 64-bit. Coordinates are drawn without replacement over the
    concatenation of all parameter tensors.
    """
    if samples < 1:
        raise ContractError(f"samples must be positive, got {samples}")
    params = (params or init_params(config, seed)).astype(np.float64)
    sample = (sample or _fixture(config, seed)).astype(np.float64)

    def loss_value() -> float:
        with ad.no_grad():
            return bce_loss(forward(sample.image, params, config), sample.mask).item()

    params.zero_grad()
    ad.backward(bce_loss(forward(sample.image, params, config), sample.mask))

    names = params.names()
    sizes = np.array([params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(offsets[-1]), size=min(samples, int(offsets[-1])), replace=False)

    result = GradcheckResult(tolerance=tolerance)
    for f in np.sort(flat):
        which = int(np.searchsorted(offsets, f, side="right") - 1)
        name = names[which]
        tensor = params[name]
        index = np.unravel_index(int(f - offsets[which]), tensor.shape)
        original = tensor.data[index]
        tensor.data[index] = original + step
        plus = loss_value()
        tensor.data[index] = original - step
        minus = loss_value()
        tensor.data[index] = original
        result.checks.append(
            CoordinateCheck(
                name=name,
                index=tuple(int(i) for i in index),
                analytic=float(tensor.grad[index]),
                numeric=(plus - minus) / (2 * step),
            )
        )
    return result
