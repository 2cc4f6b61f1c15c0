"""Training objectives: next-item cross-entropy, InfoNCE, threshold-filtered
contrastive loss, the positive-sampling variant and their composition."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .similarity import candidate_mask, positive_index
from .threshold import StatTarget, ThresholdVector, regularization_loss

AUGMENTATIONS = ("SU", "UN", "US_X")
LN2 = math.log(2.0)


@dataclass
class LossConfig:
    lam: float = 0.1  # weight of the threshold regulariser
    lam_cl: float = 0.1  # weight of the contrastive loss
    tau: float = 1.0
    positive_sampling: bool = False
    augmentation: str = "UN"
    # straight-through surrogate for d(loss)/d(threshold); gain 0 disables it
    surrogate_temperature: float = 0.05
    surrogate_gain: float = 0.01

    def __post_init__(self):
        self.augmentation = self.augmentation.upper()
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"augmentation must be one of {AUGMENTATIONS}")
        if self.lam < 0 or self.lam_cl < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.tau <= 0 or self.surrogate_temperature <= 0:
            raise ValueError("temperatures must be positive")


def basic_loss(scores: torch.Tensor, target) -> torch.Tensor:
    """Mean softmax cross-entropy of the next item over the full item set.

    ``scores`` columns are dense item indices (padding excluded); a negative
    target marks the padding token and is rejected.
    """
    target = torch.as_tensor(np.asarray(target), dtype=torch.long).reshape(-1)
    if scores.ndim == 1:
        scores = scores.unsqueeze(0)
    if bool((target < 0).any()):
        raise ValueError("target refers to the padding token")
    return F.cross_entropy(scores, target)


def _unpack(thresholds) -> torch.Tensor:
    return thresholds.k if isinstance(thresholds, ThresholdVector) else torch.as_tensor(thresholds)


def info_nce(matrix: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    return info_nce_terms(matrix, tau).sum()


def info_nce_terms(matrix: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    n = matrix.shape[0]
    logits = matrix / tau
    pos = logits[torch.arange(n), positive_index(n)]
    # M(i) = N(i) + {i+} is every column but the diagonal
    denom = logits.masked_fill(torch.eye(n, dtype=torch.bool), float("-inf"))
    return torch.logsumexp(denom, dim=1) - pos


def _membership(matrix, k, temperature, gain):
    """Hard M- membership weights in {0, 1}; when ``k`` carries gradient and
    ``gain`` > 0 the backward pass sees ``gain * sigmoid((k - sim) / T)``."""
    n = matrix.shape[0]
    cand = candidate_mask(n)
    sims = matrix.detach()
    kk = k.to(sims.dtype)
    hard = (cand & (sims <= kk.detach()[:, None])).to(sims.dtype)
    if gain > 0 and kk.requires_grad:
        soft = torch.sigmoid((kk[:, None] - sims) / temperature) * cand
        hard = hard + gain * (soft - soft.detach())
    return hard


def _log_denominator(matrix, weights, tau):
    """log of e^{s(i,i+)/tau} + sum_j w_ij e^{s(i,j)/tau}, stabilised row-wise."""
    n = matrix.shape[0]
    logits = matrix / tau
    pidx = positive_index(n)
    pos = logits[torch.arange(n), pidx]
    members = weights.detach() > 0
    shift = logits.detach().masked_fill(~members, float("-inf")).max(dim=1).values
    shift = torch.maximum(shift, pos.detach())
    total = torch.exp(pos - shift) + (weights * torch.exp(logits - shift[:, None])).sum(dim=1)
    return torch.log(total) + shift, pos, logits


def learn_loss_terms(matrix, thresholds, tau=1.0, surrogate_temperature=0.05, surrogate_gain=0.0):
    k = _unpack(thresholds)
    w = _membership(matrix, k, surrogate_temperature, surrogate_gain)
    log_z, pos, _ = _log_denominator(matrix, w, tau)
    return log_z - pos


def learn_loss(matrix, thresholds, tau=1.0, surrogate_temperature=0.05, surrogate_gain=0.0) -> torch.Tensor:
    """Contrastive loss whose denominator keeps only candidates at or below each
    anchor's threshold. An anchor with no retained negatives contributes 0."""
    return learn_loss_terms(matrix, thresholds, tau, surrogate_temperature, surrogate_gain).sum()


def positive_sampling_terms(matrix, thresholds, tau=1.0, surrogate_temperature=0.05, surrogate_gain=0.0):
    n = matrix.shape[0]
    k = _unpack(thresholds)
    w = _membership(matrix, k, surrogate_temperature, surrogate_gain)
    log_z, pos, logits = _log_denominator(matrix, w, tau)

    plus = candidate_mask(n) & (matrix.detach() > k.detach().to(matrix.dtype)[:, None])
    counts = plus.sum(dim=1)
    for c in counts.tolist():
        if c:
            assert math.isclose(0.5 + c * (1.0 / (2 * c)), 1.0, abs_tol=1e-12)

    c = counts.to(matrix.dtype)
    has_plus = (counts > 0).to(matrix.dtype)
    # anchors without relabelled positives keep the unweighted term
    anchor = log_z - pos + LN2 * has_plus
    extra_logits = (logits * plus).sum(dim=1)
    log_w = torch.where(counts > 0, torch.log(2 * c.clamp_min(1)), torch.zeros_like(c))
    # relabelled-positive terms share the denominator but not its threshold
    # surrogate, which would otherwise be amplified |M+| times
    log_z_hard = _log_denominator(matrix, w.detach(), tau)[0]
    extra = c * log_z_hard - extra_logits + c * log_w
    return anchor + extra


def positive_sampling_loss(matrix, thresholds, tau=1.0, surrogate_temperature=0.05, surrogate_gain=0.0) -> torch.Tensor:
    """Threshold-filtered loss that also relabels candidates above the threshold
    as positives, weighted 1/2 for the augmented view and 1/(2|M+|) each."""
    return positive_sampling_terms(matrix, thresholds, tau, surrogate_temperature, surrogate_gain).sum()


@dataclass
class Arrangement:
    """One 2B-view similarity structure with its thresholds."""

    matrix: torch.Tensor
    thresholds: ThresholdVector
    name: str = "UN"


@dataclass
class LossBreakdown:
    l_basic: torch.Tensor
    l_learn: torch.Tensor
    l_reg: torch.Tensor
    l_cl: torch.Tensor
    l_total: torch.Tensor
    per_anchor: torch.Tensor
    n_minus: np.ndarray
    n_plus: np.ndarray
    mean_k: float
    warmup: bool = False

    def record(self, step: int, **extra) -> dict:
        rec = {
            "step": step,
            "l_basic": self.l_basic.item(),
            "l_learn": self.l_learn.item(),
            "l_reg": self.l_reg.item(),
            "l_cl": self.l_cl.item(),
            "l_total": self.l_total.item(),
            "mean_k": self.mean_k,
            "mean_Mminus": float(self.n_minus.mean()) if self.n_minus.size else 0.0,
            "mean_Mplus": float(self.n_plus.mean()) if self.n_plus.size else 0.0,
        }
        rec.update(extra)
        return rec


def contrastive_terms(arr: Arrangement, config: LossConfig) -> torch.Tensor:
    fn = positive_sampling_terms if config.positive_sampling else learn_loss_terms
    return fn(arr.matrix, arr.thresholds, config.tau, config.surrogate_temperature, config.surrogate_gain)


def total_loss(l_basic: torch.Tensor, arrangements: Sequence[Arrangement], config: LossConfig,
               stat_target: Optional[StatTarget] = None) -> LossBreakdown:
    """Compose ``l_basic + lam_cl * (l_learn + lam * l_reg)``.

    With several arrangements (the mixed augmentation setting) both the
    contrastive and the regularisation parts are averaged over them.
    """
    stat_target = stat_target or StatTarget()
    learns, regs, per_anchor, n_minus, n_plus, ks = [], [], [], [], [], []
    for arr in arrangements:
        terms = contrastive_terms(arr, config)
        learns.append(terms.sum())
        per_anchor.append(terms)
        if arr.thresholds.strategy == "learnable":
            regs.append(regularization_loss(arr.thresholds, stat_target))
        else:
            regs.append(terms.new_zeros(()))
        n = arr.matrix.shape[0]
        cand = candidate_mask(n)
        below = arr.matrix.detach() <= arr.thresholds.k.detach().to(arr.matrix.dtype)[:, None]
        n_minus.append((cand & below).sum(dim=1).numpy())
        n_plus.append((cand & ~below).sum(dim=1).numpy())
        ks.append(arr.thresholds.k.detach().double())

    if learns:
        l_learn = torch.stack(learns).mean()
        l_reg = torch.stack(regs).mean()
    else:
        l_learn = l_basic.new_zeros(())
        l_reg = l_basic.new_zeros(())
    l_learn = l_learn.to(l_basic.dtype)
    l_reg = l_reg.to(l_basic.dtype)
    l_cl = l_learn + config.lam * l_reg
    l_total = l_basic + config.lam_cl * l_cl
    return LossBreakdown(
        l_basic=l_basic,
        l_learn=l_learn,
        l_reg=l_reg,
        l_cl=l_cl,
        l_total=l_total,
        per_anchor=torch.cat(per_anchor) if per_anchor else l_basic.new_zeros(0),
        n_minus=np.concatenate(n_minus) if n_minus else np.zeros(0),
        n_plus=np.concatenate(n_plus) if n_plus else np.zeros(0),
        mean_k=float(torch.cat(ks).mean()) if ks else float("nan"),
        warmup=not stat_target.defined,
    )
