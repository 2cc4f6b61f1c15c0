"""Per-anchor similarity thresholds: fixed, percentile-based, or learned."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .similarity import BatchViews, candidate_similarities

logger = logging.getLogger(__name__)

STRATEGIES = ("fixed", "statistical", "learnable")


@dataclass
class ThresholdVector:
    k: torch.Tensor  # (2B,)
    strategy: str

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    def __len__(self):
        return self.k.shape[0]


@dataclass
class StatTarget:
    value: Optional[float] = None
    sample_count: int = 0

    @property
    def defined(self) -> bool:
        return self.value is not None


def nearest_rank_index(n: int, q: float) -> int:
    """1-based nearest-rank position ``ceil(q/100 * n)``, computed exactly."""
    if not 0 < q <= 100:
        raise ValueError(f"percentile {q} outside (0, 100]")
    if n < 1:
        raise ValueError("empty sample")
    return max(1, math.ceil(Fraction(str(q)) * n / 100))


def nearest_rank(values, q: float) -> float:
    arr = np.sort(np.asarray(values, dtype=np.float64).ravel())
    return float(arr[nearest_rank_index(arr.size, q) - 1])


def fixed_thresholds(k0: float, size: int) -> ThresholdVector:
    if not -1.0 <= k0 <= 1.0:
        raise ValueError(f"fixed threshold {k0} outside [-1, 1]")
    return ThresholdVector(torch.full((size,), float(k0), dtype=torch.float64), "fixed")


def statistical_thresholds(matrix: torch.Tensor, q: float = 90.0) -> ThresholdVector:
    """Row-wise nearest-rank ``q``-th percentile of each anchor's candidate similarities."""
    sims = candidate_similarities(matrix.detach())
    idx = nearest_rank_index(sims.shape[1], q) - 1
    k = sims.sort(dim=1).values[:, idx]
    return ThresholdVector(k, "statistical")


class ThresholdNet(nn.Module):
    """Two-layer tanh MLP mapping ``[f_i, mean_j f_j]`` to a threshold in (-1, 1)."""

    def __init__(self, dim: int, hidden: int = 64):
        super().__init__()
        self.hidden = nn.Linear(2 * dim, hidden)
        self.out = nn.Linear(hidden, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, reprs: torch.Tensor) -> torch.Tensor:
        unit = reprs / reprs.norm(dim=1, keepdim=True).clamp_min(1e-12)
        ctx = unit.mean(dim=0, keepdim=True).expand_as(unit)
        h = torch.tanh(self.hidden(torch.cat([unit, ctx], dim=1)))
        return torch.tanh(self.out(h)).squeeze(-1)

    def warm_start(self, k: float):
        """Shift the output bias so that an untrained net emits roughly ``k``."""
        k = min(max(k, -0.999), 0.999)
        with torch.no_grad():
            self.out.bias.fill_(math.atanh(k))


def learnable_thresholds(g: ThresholdNet, views) -> ThresholdVector:
    """Thresholds from ``g``; representations enter as constants so no gradient
    reaches the encoder along this path."""
    reprs = views.reprs if isinstance(views, BatchViews) else views
    k = g(reprs.detach())
    if not bool(torch.isfinite(k).all()):
        raise FloatingPointError("threshold net produced non-finite output")
    return ThresholdVector(k, "learnable")


def update_stat_target(accumulated_sims, q: float = 90.0, previous: Optional[StatTarget] = None) -> StatTarget:
    values = np.asarray(accumulated_sims, dtype=np.float64).ravel()
    if values.size == 0:
        logger.warning("no similarities accumulated; keeping previous statistical target")
        return previous if previous is not None else StatTarget()
    return StatTarget(nearest_rank(values, q), int(values.size))


def regularization_loss(k, stat_target: StatTarget) -> torch.Tensor:
    """Squared distance of the thresholds to the statistical target; zero while
    the target is still undefined (warm-up)."""
    k = k.k if isinstance(k, ThresholdVector) else k
    if not stat_target.defined:
        return (k * 0.0).sum()
    return ((k - stat_target.value) ** 2).sum()


class SimilarityReservoir:
    """Fixed-capacity uniform sample (algorithm R) of negative-candidate similarities."""

    def __init__(self, capacity: int = 100_000, seed: int = 0):
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self.buffer = np.empty(capacity, dtype=np.float64)
        self.seen = 0

    def __len__(self):
        return min(self.seen, self.capacity)

    def add(self, values):
        values = np.asarray(values, dtype=np.float64).ravel()
        fill = min(max(self.capacity - self.seen, 0), values.size)
        if fill:
            self.buffer[self.seen:self.seen + fill] = values[:fill]
        rest = values[fill:]
        if rest.size:
            t = self.seen + fill + np.arange(rest.size)
            slots = self.rng.integers(0, t + 1)
            for m in np.flatnonzero(slots < self.capacity):
                self.buffer[slots[m]] = rest[m]
        self.seen += values.size

    def values(self) -> np.ndarray:
        return self.buffer[:len(self)].copy()

    def reset(self):
        self.seen = 0
