"""Rank metrics for a single held-out item per user."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .dataset import SETTINGS, SplitView, candidate_set, pad_left

METRICS = ("NDCG", "MRR", "Recall")


@dataclass(frozen=True)
class RankResult:
    rank: int
    num_candidates: int


def rank_of_target(scores, target_position: int) -> RankResult:
    """1-based rank of the target; every other candidate scoring at least as
    high is placed ahead of it."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("empty score vector")
    t = s[target_position]
    ahead = int(np.count_nonzero(s >= t)) - 1
    return RankResult(ahead + 1, s.size)


def _rank(r) -> int:
    return r.rank if isinstance(r, RankResult) else int(r)


def ndcg_at_k(rank, k: int) -> float:
    r = _rank(rank)
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 / math.log2(r + 1) if r <= k else 0.0


def mrr_at_k(rank, k: int) -> float:
    r = _rank(rank)
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 / r if r <= k else 0.0


def recall_at_k(rank, k: int) -> float:
    r = _rank(rank)
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if r <= k else 0.0


METRIC_FNS = {"NDCG": ndcg_at_k, "MRR": mrr_at_k, "Recall": recall_at_k}


@dataclass
class MetricReport:
    setting: str
    cutoffs: tuple[int, ...]
    values: dict[str, float]
    user_count: int
    stage: str = "test"

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def to_dict(self) -> dict:
        return {"setting": self.setting, "stage": self.stage, "user_count": self.user_count,
                "cutoffs": list(self.cutoffs), "metrics": self.values}

    def rows(self) -> list[tuple[str, str, str, int, float]]:
        out = []
        for name in METRICS:
            for k in self.cutoffs:
                out.append((self.stage, self.setting, name, k, self.values[f"{name}@{k}"]))
        return out


def summarize(ranks: Sequence[int], setting: str, cutoffs: Iterable[int] = (5, 10), stage: str = "test") -> MetricReport:
    cutoffs = tuple(cutoffs)
    if not len(ranks):
        raise ValueError("no users to evaluate")
    values = {}
    for name in METRICS:
        fn = METRIC_FNS[name]
        for k in cutoffs:
            values[f"{name}@{k}"] = float(np.mean([fn(r, k) for r in ranks]))
    return MetricReport(setting, cutoffs, values, len(ranks), stage)


def evaluate_scores(
    score_fn: Callable[[np.ndarray], np.ndarray],
    split_view: SplitView,
    setting: str = "whole",
    cutoffs: Iterable[int] = (5, 10),
    stage: str = "valid",
    size: int = 100,
    seed: int = 0,
    users: Sequence[int] | None = None,
    batch_size: int = 256,
    exclude_history: bool = True,
) -> MetricReport:
    """Rank every user's target among its candidates using ``score_fn``.

    ``score_fn`` maps an array of user positions to a ``(U, num_items)`` score
    matrix over dense item indices.
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    users = list(range(split_view.num_users)) if users is None else list(users)
    if not users:
        raise ValueError("empty user set")
    ranks = []
    for start in range(0, len(users), batch_size):
        chunk = np.asarray(users[start:start + batch_size])
        scores = np.asarray(score_fn(chunk), dtype=np.float64)
        for row, u in zip(scores, chunk):
            if setting == "whole":
                target = split_view.target(int(u), stage)
                keep = np.ones(row.size, dtype=bool)
                if exclude_history:
                    keep[list(split_view.history(int(u), stage))] = False
                keep[target] = True
                ahead = np.count_nonzero(row[keep] >= row[target]) - 1
                ranks.append(int(ahead) + 1)
                continue
            cand = candidate_set(split_view, int(u), setting, size, seed, stage, exclude_history)
            ranks.append(rank_of_target(row[cand], 0).rank)
    return summarize(ranks, setting, cutoffs, stage)


def model_scorer(model, split_view: SplitView, stage: str):
    """Score function for :func:`evaluate_scores` backed by an encoder (dropout off)."""
    max_len = model.config.max_len

    def score(users):
        tokens = np.stack([pad_left(split_view.history(int(u), stage), max_len) for u in users])
        was_training = model.training
        model.eval()
        with torch.no_grad():
            reprs = model(torch.as_tensor(tokens))
            out = (reprs @ model.item_vectors().T).double().numpy()
        model.train(was_training)
        return out

    return score


def evaluate(model, split_view: SplitView, setting: str = "whole", cutoffs: Iterable[int] = (5, 10),
             stage: str = "valid", size: int = 100, seed: int = 0, **kwargs) -> MetricReport:
    return evaluate_scores(model_scorer(model, split_view, stage), split_view, setting, cutoffs,
                           stage, size, seed, **kwargs)


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "setting", "metric", "cutoff", "value"])
    for rep in reports:
        for stage, setting, name, k, v in rep.rows():
            w.writerow([stage, setting, name, k, repr(v)])
    return buf.getvalue()


def reports_to_json(reports: Sequence[MetricReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
