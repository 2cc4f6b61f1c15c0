"""Finite-difference audit of every training objective on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .encoder import EncoderConfig, SequenceEncoder
from .losses import Arrangement, LossConfig, basic_loss, info_nce, learn_loss, positive_sampling_loss, total_loss
from .similarity import BatchViews, cosine_matrix
from .threshold import StatTarget, ThresholdNet, learnable_thresholds

TOLERANCE = 1e-3
STEP = 1e-4


@dataclass
class GradcheckConfig:
    dim: int = 8
    batch_size: int = 4
    num_items: int = 19  # vocabulary of 20 tokens with padding
    max_len: int = 5
    layers: int = 1
    heads: int = 2
    dropout: float = 0.1
    tau: float = 0.5
    lam: float = 0.5
    lam_cl: float = 0.5
    stat_target: float = 0.2
    seed: int = 3
    step: float = STEP
    tolerance: float = TOLERANCE

    def __post_init__(self):
        if self.dim > 8 or self.batch_size > 4 or self.num_items + 1 > 20:
            raise ValueError("gradcheck is limited to D <= 8, B <= 4, vocab <= 20")


@dataclass
class GradcheckReport:
    errors: dict = field(default_factory=dict)  # case -> {param: rel err}
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max((max(v.values()) for v in self.errors.values() if v), default=0.0)

    def case_error(self, case: str) -> float:
        return max(self.errors[case].values())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def lines(self) -> list[str]:
        out = [f"{case:<16} max rel err {max(errs.values()):.3e}" for case, errs in self.errors.items()]
        out.append(f"max rel. error {self.max_error:.3e} -> {'PASS' if self.passed else 'FAIL'}")
        return out


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> float:
    diff = float((a - b).norm())
    scale = max(float(a.norm()), float(b.norm()), floor)
    return diff / scale


def numeric_gradient(fn: Callable[[], torch.Tensor], param: torch.nn.Parameter, h: float) -> torch.Tensor:
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def check(fn: Callable[[], torch.Tensor], modules, h: float = STEP) -> dict[str, float]:
    named = [(f"{tag}.{n}", p) for tag, m in modules for n, p in m.named_parameters()]
    for _, p in named:
        p.grad = None
    fn().backward()
    errs = {}
    for name, p in named:
        analytic = p.grad if p.grad is not None else torch.zeros_like(p)
        errs[name] = relative_error(analytic, numeric_gradient(fn, p, h))
    return errs


class _Problem:
    """A fixed tiny batch with both augmentation views and a threshold net."""

    def __init__(self, cfg: GradcheckConfig):
        torch.manual_seed(cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        enc = EncoderConfig(vocab_size=cfg.num_items + 1, max_len=cfg.max_len, dim=cfg.dim,
                            layers=cfg.layers, heads=cfg.heads, dropout_rate=cfg.dropout)
        self.model = SequenceEncoder(enc).double()
        self.g = ThresholdNet(cfg.dim, 8).double()
        with torch.no_grad():
            self.g.out.weight.normal_(0.0, 0.5)
            self.g.out.bias.fill_(0.1)
            for p in self.model.parameters():
                p.add_(0.05 * torch.randn_like(p))
            self.model.item_emb[0].zero_()
        b, n = cfg.batch_size, cfg.max_len
        lengths = rng.integers(1, n + 1, size=b)
        tokens = np.zeros((b, n), dtype=np.int64)
        for r, L in enumerate(lengths):
            tokens[r, n - L:] = rng.integers(1, cfg.num_items + 1, size=L)
        self.tokens = torch.as_tensor(tokens)
        self.targets = rng.integers(0, cfg.num_items, size=b)
        # same-target partners for half the rows; the rest fall back to themselves
        su = tokens.copy()
        for r in range(0, b, 2):
            L = int(rng.integers(1, n + 1))
            su[r] = 0
            su[r, n - L:] = rng.integers(1, cfg.num_items + 1, size=L)
        self.su_tokens = torch.as_tensor(su)
        self.stat = StatTarget(cfg.stat_target, 1)
        self.seeds = [int(s) for s in np.random.SeedSequence(cfg.seed).generate_state(3)]

    def encode(self, tokens, seed):
        return self.model(tokens, torch.Generator().manual_seed(seed))

    def loss_cfg(self, aug, positive_sampling=True):
        c = self.cfg
        return LossConfig(lam=c.lam, lam_cl=c.lam_cl, tau=c.tau, positive_sampling=positive_sampling,
                          augmentation=aug, surrogate_gain=0.0)

    def cases(self) -> dict[str, Callable[[], torch.Tensor]]:
        c = self.cfg

        def views(name):
            orig = self.encode(self.tokens, self.seeds[0])
            other = self.tokens if name == "UN" else self.su_tokens
            aug = self.encode(other, self.seeds[1 if name == "UN" else 2])
            v = BatchViews.pair(orig, aug)
            return orig, v, cosine_matrix(v)

        # g sees the representations as constants, so perturbing the encoder
        # must not move g's input either
        with torch.no_grad():
            frozen = {name: views(name)[1].reprs.clone() for name in ("UN", "SU")}

        def k_for(name):
            return learnable_thresholds(self.g, frozen[name])

        def basic():
            orig = self.encode(self.tokens, self.seeds[0])
            return basic_loss(orig @ self.model.item_vectors().T, self.targets)

        def nce():
            return info_nce(views("UN")[2], c.tau)

        def eq8():
            m = views("UN")[2]
            return learn_loss(m, k_for("UN"), c.tau)

        def eq9():
            m = views("UN")[2]
            return positive_sampling_loss(m, k_for("UN"), c.tau)

        def total(aug):
            def fn():
                orig, _, m_un = views("UN")
                l_basic = basic_loss(orig @ self.model.item_vectors().T, self.targets)
                arrs = []
                if aug in ("UN", "US_X"):
                    arrs.append(Arrangement(m_un, k_for("UN"), "UN"))
                if aug in ("SU", "US_X"):
                    arrs.append(Arrangement(views("SU")[2], k_for("SU"), "SU"))
                return total_loss(l_basic, arrs, self.loss_cfg(aug), self.stat).l_total
            return fn

        return {"L_basic": basic, "InfoNCE": nce, "L_learn": eq8, "L_learn_pos": eq9,
                "L_total_UN": total("UN"), "L_total_SU": total("SU"), "L_total_US_X": total("US_X")}


def quadratic_head_error(cfg: GradcheckConfig | None = None) -> float:
    """Max deviation between the autograd gradient of 0.5*|f(s)|^2 w.r.t. the
    encoder output and the output itself."""
    prob = _Problem(cfg or GradcheckConfig())
    out = prob.encode(prob.tokens, prob.seeds[0])
    out.retain_grad()
    (0.5 * (out ** 2).sum()).backward()
    return float((out.grad - out.detach()).abs().max())


def gradcheck(cfg: GradcheckConfig | None = None, cases=None) -> GradcheckReport:
    cfg = cfg or GradcheckConfig()
    prob = _Problem(cfg)
    report = GradcheckReport(tolerance=cfg.tolerance)
    modules = [("encoder", prob.model), ("g", prob.g)]
    for name, fn in prob.cases().items():
        if cases and name not in cases:
            continue
        report.errors[name] = check(fn, modules, cfg.step)
    return report
