"""Pairwise similarity over the 2B views of a batch and anchor bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch


@dataclass
class BatchViews:
    """2B representations stored as ``[originals, augmented]`` so that the
    positive partner of view ``i`` is ``i ± B``."""

    reprs: torch.Tensor  # (2B, D)
    targets: Optional[np.ndarray] = None  # (2B,) dense item index per view
    positive_source: Optional[Sequence[str]] = None  # per anchor: "augmented" | "target_shared"

    def __post_init__(self):
        n = self.reprs.shape[0]
        if n < 4 or n % 2:
            raise ValueError(f"need an even number of views >= 4, got {n}")

    @classmethod
    def pair(cls, originals: torch.Tensor, augmented: torch.Tensor, targets=None, positive_source=None):
        reprs = torch.cat([originals, augmented], dim=0)
        if targets is not None:
            targets = np.concatenate([np.asarray(targets), np.asarray(targets)])
        return cls(reprs, targets, positive_source)

    @property
    def size(self) -> int:
        return self.reprs.shape[0]

    @property
    def batch_size(self) -> int:
        return self.size // 2

    def pos(self, i=None):
        idx = np.arange(self.size) if i is None else np.asarray(i)
        return (idx + self.batch_size) % self.size

    def candidates(self, i: int) -> np.ndarray:
        """N(i): every view except ``i`` and its positive partner, ascending."""
        return np.array([j for j in range(self.size) if j != i and j != self.pos(i)], dtype=np.int64)


def positive_index(n: int) -> torch.Tensor:
    return (torch.arange(n) + n // 2) % n


def candidate_mask(n: int) -> torch.Tensor:
    """Boolean ``(n, n)`` mask of N(i) for every anchor row."""
    mask = ~torch.eye(n, dtype=torch.bool)
    mask[torch.arange(n), positive_index(n)] = False
    return mask


def cosine_matrix(views) -> torch.Tensor:
    """Raw cosine similarities; differentiable w.r.t. the representations."""
    reprs = views.reprs if isinstance(views, BatchViews) else torch.as_tensor(views)
    norms = reprs.norm(dim=1)
    zero = torch.nonzero(norms == 0).flatten().tolist()
    if zero:
        raise ValueError(f"zero-norm representation at view index {zero[0]}")
    unit = reprs / norms[:, None]
    return unit @ unit.T


def candidate_similarities(matrix: torch.Tensor) -> torch.Tensor:
    """``(2B, 2B-2)`` similarities of each anchor to N(i), in ascending view order."""
    n = matrix.shape[0]
    return matrix[candidate_mask(n)].view(n, n - 2)


def sorted_row(matrix, i: int) -> list[int]:
    """Indices of N(i) ordered by ascending similarity to ``i``; ties go to the
    lower view index."""
    m = np.asarray(torch.as_tensor(matrix).detach().cpu().numpy())
    n = m.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"anchor {i} out of range for {n} views")
    pos = (i + n // 2) % n
    cand = np.array([j for j in range(n) if j != i and j != pos], dtype=np.int64)
    order = np.lexsort((cand, m[i, cand]))
    return cand[order].tolist()


def split_by_threshold(matrix, i: int, k_i: float) -> tuple[list[int], list[int]]:
    """Partition N(i) into retained negatives (sim <= k) and relabeled positives."""
    if not -1.0 <= k_i <= 1.0:
        raise ValueError(f"threshold {k_i} outside [-1, 1]")
    m = np.asarray(torch.as_tensor(matrix).detach().cpu().numpy())
    n = m.shape[0]
    pos = (i + n // 2) % n
    minus, plus = [], []
    for j in range(n):
        if j == i or j == pos:
            continue
        (minus if m[i, j] <= k_i else plus).append(j)
    return minus, plus


def negative_masks(matrix: torch.Tensor, thresholds: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Vectorised ``(M-, M+)`` boolean masks over the full ``(2B, 2B)`` grid."""
    n = matrix.shape[0]
    cand = candidate_mask(n)
    below = matrix.detach() <= thresholds.detach()[:, None]
    return cand & below, cand & ~below
