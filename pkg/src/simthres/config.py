"""Training configuration and its flat key-value file form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .losses import LossConfig
from .threshold import STRATEGIES


@dataclass
class TrainConfig:
    # data
    data: str = ""
    format: str = "ml1m"
    min_seq_len: int = 3
    min_item_count: int = 1
    max_len: int = 50
    # encoder
    dim: int = 64
    layers: int = 2
    heads: int = 2
    dropout: float = 0.1
    ffn_mult: int = 2
    dtype: str = "float32"
    # optimisation
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # thresholds
    strategy: str = "learnable"
    k0: float = 1.0
    q: float = 90.0
    g_hidden: int = 64
    g_learning_rate: float = 1e-2
    g_warm_start: bool = True
    reservoir_size: int = 100_000
    # loss
    lam: float = 0.1
    lam_cl: float = 0.1
    tau: float = 1.0
    positive_sampling: bool = False
    augmentation: str = "UN"
    surrogate_temperature: float = 0.05
    surrogate_gain: float = 0.01
    # evaluation and diagnostics
    eval_every: int = 1
    eval_setting: str = "whole"
    eval_candidates: int = 100  # list size for the random and popular settings
    patience: int = 10
    hist_bins: int = 40
    snapshot_size: int = 1000
    save_histograms: bool = True

    def __post_init__(self):
        self.augmentation = self.augmentation.upper()
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.learning_rate <= 0 or self.g_learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if not -1.0 <= self.k0 <= 1.0:
            raise ValueError("k0 must lie in [-1, 1]")
        if not 0 < self.q <= 100:
            raise ValueError("q must lie in (0, 100]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.loss_config()  # validates the loss fields

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, lam_cl=self.lam_cl, tau=self.tau,
                          positive_sampling=self.positive_sampling, augmentation=self.augmentation,
                          surrogate_temperature=self.surrogate_temperature,
                          surrogate_gain=self.surrogate_gain)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def coerce(key: str, value):
    if key not in FIELD_TYPES:
        raise KeyError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    if kind == "bool":
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "on", "yes"):
                return True
            if low in ("0", "false", "off", "no"):
                return False
            raise ValueError(f"{key}: cannot read {value!r} as a boolean")
        return bool(value)
    if kind == "int":
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{key}: expected an integer, got {value}")
        return int(value)
    if kind == "float":
        return float(value)
    return str(value)


def load_config_file(path) -> dict:
    """Read flat ``key = value`` pairs (TOML syntax, no tables)."""
    with open(Path(path), "rb") as fh:
        raw = tomllib.load(fh)
    out = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ValueError(f"config {path}: nested table {key!r} not supported; keys are flat")
        key = key.replace("-", "_")
        out[key] = coerce(key, value)
    return out


def resolve(config_path=None, **overrides) -> TrainConfig:
    """File values first, then non-None overrides (flags win)."""
    values = load_config_file(config_path) if config_path else {}
    for key, value in overrides.items():
        if value is not None:
            values[key] = coerce(key, value)
    return TrainConfig(**values)
