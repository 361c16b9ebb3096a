"""JSON run configuration: strict keys, published defaults for anything absent."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig

# JSON key -> ModelConfig field
_MODEL_KEYS = {
    "height": "height",
    "width": "width",
    "channels": "channels",
    "patch_size": "patch_size",
    "heads": "num_heads",
    "layers": "num_layers",
    "mlp_ratio": "mlp_ratio",
    "embed_channels": "embed_channels",
    "encoder_widths": "encoder_widths",
    "decoder_widths": "decoder_widths",
    "decoder_convs": "decoder_convs",
    "alpha": "alpha",
}
_TRAIN_KEYS = {
    "epochs": "epochs",
    "base_lr": "base_lr",
    "milestones": "milestones",
    "batch_size": "batch_size",
    "weight_decay": "weight_decay",
    "seed": "seed",
    "gradcheck_mode": "gradcheck_mode",
    "decay_exclude_norms_and_biases": "decay_exclude_norms_and_biases",
}
_DATA_DEFAULTS = {"source": "synth", "count": 16, "path": None, "raw": False, "val_fraction": 0.2}
_EVAL_DEFAULTS = {"threshold": 0.8}
_SECTIONS = ("model", "train", "data", "eval")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"
    count: int = 16
    path: str | None = None
    raw: bool = False
    val_fraction: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    threshold: float = 0.8


def _section(doc: dict, name: str, allowed) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"'{name}' must be a JSON object")
    unknown = sorted(set(sec) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    return sec


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")

    model_sec = _section(doc, "model", _MODEL_KEYS)
    train_sec = _section(doc, "train", _TRAIN_KEYS)
    data_sec = {**_DATA_DEFAULTS, **_section(doc, "data", _DATA_DEFAULTS)}
    eval_sec = {**_EVAL_DEFAULTS, **_section(doc, "eval", _EVAL_DEFAULTS)}

    train_kwargs = {_TRAIN_KEYS[k]: v for k, v in train_sec.items()}
    model_kwargs = {_MODEL_KEYS[k]: v for k, v in model_sec.items()}
    model_kwargs["seed"] = train_kwargs.get("seed", 0)
    threshold = float(eval_sec["threshold"])
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    try:
        model = ModelConfig.from_dict(model_kwargs)
        train = TrainConfig(**train_kwargs, threshold=threshold)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None

    if data_sec["source"] not in ("synth", "dir"):
        raise ConfigError(f"data.source must be 'synth' or 'dir', got {data_sec['source']!r}")
    if data_sec["source"] == "dir" and not data_sec["path"]:
        raise ConfigError("data.path is required when data.source is 'dir'")
    data = DataConfig(**data_sec)
    return RunConfig(model=model, train=train, data=data, threshold=threshold)


def load_run_config(path) -> RunConfig:
    """Read and validate a run config file.

    Raises:
        ConfigError: unreadable file, malformed JSON (with line/column) or
            invalid values.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_run_config(doc)
