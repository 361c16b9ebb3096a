"""BCE loss, AdamW with a step-halving schedule, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Sample
from .errors import ConfigError, ContractError, DimensionError, TrainingError, ValidationError
from .formats import save_checkpoint
from .metrics import CSV_HEADER, ConfusionCounts, MetricsReport, binarize, compute_metrics, confusion
from .model import ModelConfig, TUnetParams, forward, init_params

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean pixel-wise binary cross-entropy with ``pred`` clamped to [eps, 1-eps]."""
    y = ad.values(target)
    if pred.shape != y.shape:
        raise DimensionError(f"bce_loss: prediction {pred.shape} vs target {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("bce_loss: target must be binary")
    y = Tensor(y.astype(pred.dtype), dtype=pred.dtype)
    p = ad.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    ll = ad.add(ad.mul(y, ad.log(p)), ad.mul(ad.sub(1.0, y), ad.log(ad.sub(1.0, p))))
    return ad.neg(ad.mean_all(ll))


# ---------------------------------------------------------------------------
# optimiser


def _no_decay(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("gamma", "beta") or leaf.startswith("b")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    no_decay: frozenset[str] = frozenset()

    @classmethod
    def zeros_like(
        cls,
        params: Mapping[str, Tensor] | TUnetParams,
        weight_decay: float = 1e-6,
        exclude_norms_and_biases: bool = False,
        **kwargs,
    ) -> AdamWState:
        items = list(params.items())
        skip = frozenset(k for k, _ in items if exclude_norms_and_biases and _no_decay(k))
        return cls(
            m={k: np.zeros_like(t.data) for k, t in items},
            v={k: np.zeros_like(t.data) for k, t in items},
            weight_decay=weight_decay,
            no_decay=skip,
            **kwargs,
        )


def adamw_step(
    params: Mapping[str, Tensor] | TUnetParams,
    state: AdamWState,
    lr: float,
    grads: Mapping[str, np.ndarray] | None = None,
) -> None:
    """One AdamW update in place.

    ``theta <- theta*(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)``; the
    decay never enters the moment estimates. Gradients default to each
    tensor's ``grad``.
    """
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad if grads is None else np.asarray(grads[name])
        if g is None:
            raise ContractError(f"adamw_step: no gradient for {name!r}")
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise DimensionError(f"adamw_step: {name!r} has shape {p.shape}, gradient {g.shape}")
        dt = p.dtype.type
        m = state.m[name] = dt(b1) * state.m[name] + dt(1.0 - b1) * g
        v = state.v[name] = dt(b2) * state.v[name] + dt(1.0 - b2) * g * g
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        wd = 0.0 if name in state.no_decay else state.weight_decay
        p.data = p.data * dt(1.0 - lr * wd) - dt(lr) * (m_hat / (np.sqrt(v_hat) + dt(state.eps)))


# ---------------------------------------------------------------------------
# schedule / config


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    base_lr: float = 1e-3
    milestones: tuple[int, ...] = (60, 100)
    batch_size: int = 1
    weight_decay: float = 1e-6
    seed: int = 0
    gradcheck_mode: bool = False
    decay_exclude_norms_and_biases: bool = False
    threshold: float = 0.8

    def __post_init__(self) -> None:
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("base_lr must be positive and weight_decay non-negative")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m <= 0 for m in ms):
            raise ConfigError(f"milestones must be positive and strictly increasing, got {ms}")
        # An empty run never consults the schedule.
        if self.epochs > 0 and any(m >= self.epochs for m in ms):
            raise ConfigError(f"milestones {ms} must all be < epochs={self.epochs}")

    @property
    def dtype(self):
        return np.float64 if self.gradcheck_mode else np.float32


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Base rate halved once for every milestone ``<= epoch`` (0-indexed epochs)."""
    if not 0 <= epoch < config.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {config.epochs})")
    passed = sum(1 for m in config.milestones if epoch >= m)
    return config.base_lr * 0.5**passed


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    report: MetricsReport

    def csv_row(self) -> str:
        return self.report.csv_row(self.epoch, self.split, self.loss)


@dataclass
class TrainResult:
    params: TUnetParams
    best_params: TUnetParams
    best_epoch: int | None
    log: list[EpochRecord] = field(default_factory=list)
    steps: int = 0
    step_losses: list[float] = field(default_factory=list)
    # (steps, epoch) at the first epoch whose train row met the overfit targets
    first_fit: tuple[int, int] | None = None

    def csv_text(self) -> str:
        return "\n".join([CSV_HEADER] + [r.csv_row() for r in self.log]) + "\n"


def evaluate_split(
    params: TUnetParams, config: ModelConfig, samples: Sequence[Sample], threshold: float
) -> tuple[float, MetricsReport]:
    """Mean per-image BCE and micro-averaged metrics over ``samples``."""
    if not samples:
        raise ContractError("evaluate_split: empty split")
    counts = ConfusionCounts()
    total = 0.0
    with ad.no_grad():
        for s in samples:
            prob = forward(s.image, params, config)
            total += bce_loss(prob, s.mask).item()
            counts = counts + confusion(binarize(prob, threshold), s.mask)
    return total / len(samples), compute_metrics(counts)


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample] | None = None,
    out_dir=None,
    fit_targets: tuple[float, float] = (0.05, 0.95),
    stop_at_fit: bool = False,
) -> TrainResult:
    """Train from a seeded initialisation.

    Each epoch shuffles ``train_set`` (seeded), takes one AdamW step per
    batch with gradients averaged over the batch, then evaluates the train
    and validation splits and logs one row for each. ``val_set`` defaults to
    ``train_set``. With ``out_dir``, writes ``metrics.csv``, ``last.ckpt`` and
    ``best.ckpt`` (highest validation Dice, first wins on ties).

    ``fit_targets`` is a (max train BCE, min train Dice) pair; the first epoch
    meeting both is recorded in ``first_fit`` and, with ``stop_at_fit``, ends
    the run there.

    Raises:
        TrainingError: a batch produced a non-finite loss.
    """
    if not train_set:
        raise ContractError("train: empty training set")
    val_set = train_set if val_set is None else val_set
    same_split = val_set is train_set or (
        len(val_set) == len(train_set) and all(a is b for a, b in zip(val_set, train_set))
    )
    dtype = train_config.dtype
    train_set = [s.astype(dtype) for s in train_set]
    val_set = [s.astype(dtype) for s in val_set]

    params = init_params(model_config, train_config.seed, dtype=dtype)
    state = AdamWState.zeros_like(
        params,
        weight_decay=train_config.weight_decay,
        exclude_norms_and_biases=train_config.decay_exclude_norms_and_biases,
    )
    rng = np.random.default_rng(train_config.seed)
    result = TrainResult(params=params, best_params=params.copy(), best_epoch=None)
    best_dice = -math.inf
    bs = train_config.batch_size

    for epoch in range(train_config.epochs):
        lr = lr_at(epoch, train_config)
        order = rng.permutation(len(train_set))
        for b, start in enumerate(range(0, len(order), bs)):
            batch = [train_set[i] for i in order[start : start + bs]]
            params.zero_grad()
            batch_loss = 0.0
            for sample in batch:
                loss = ad.scale(bce_loss(forward(sample.image, params, model_config), sample.mask), 1.0 / len(batch))
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
                batch_loss += value
                ad.backward(loss)
            adamw_step(params, state, lr)
            result.steps += 1
            result.step_losses.append(batch_loss)

        train_loss, train_report = evaluate_split(params, model_config, train_set, train_config.threshold)
        if same_split:
            val_loss, val_report = train_loss, train_report
        else:
            val_loss, val_report = evaluate_split(params, model_config, val_set, train_config.threshold)
        result.log.append(EpochRecord(epoch, "train", train_loss, train_report))
        result.log.append(EpochRecord(epoch, "val", val_loss, val_report))
        logger.info(
            "epoch %d lr %.2e train loss %.4f dice %.4f | val loss %.4f dice %.4f",
            epoch, lr, train_loss, train_report.dice, val_loss, val_report.dice,
        )
        if (
            result.first_fit is None
            and train_loss < fit_targets[0]
            and train_report.dice > fit_targets[1]
        ):
            result.first_fit = (result.steps, epoch)
        if val_report.dice > best_dice:
            best_dice = val_report.dice
            result.best_params = params.copy()
            result.best_epoch = epoch
        if stop_at_fit and result.first_fit is not None:
            break

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(result.csv_text())
        save_checkpoint(out / "last.ckpt", params, model_config)
        save_checkpoint(out / "best.ckpt", result.best_params, model_config)
    return result
