"""Alignment/uniformity of representations, similarity histograms and
per-epoch threshold trajectories written as plot-ready CSV files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .similarity import candidate_mask

QUANTILES = np.linspace(0.0, 1.0, 101)


def _unit(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm representation in snapshot")
    return x / norms


@dataclass
class EmbeddingSnapshot:
    """Unit-normalised representations and their positive partners."""

    points: np.ndarray
    partners: Optional[np.ndarray] = None
    epoch: int = 0

    @classmethod
    def from_arrays(cls, points, partners=None, epoch: int = 0):
        return cls(_unit(points), None if partners is None else _unit(partners), epoch)


def alignment(snapshot: EmbeddingSnapshot) -> float:
    """Mean squared distance between each point and its positive partner."""
    if snapshot.partners is None or len(snapshot.partners) == 0:
        raise ValueError("alignment needs at least one positive pair")
    d = snapshot.points - snapshot.partners
    return float(np.mean(np.sum(d * d, axis=1)))


def uniformity(snapshot: EmbeddingSnapshot) -> float:
    """log of the mean Gaussian potential exp(-2|x - y|^2) over ordered pairs x != y."""
    x = snapshot.points
    n = len(x)
    if n < 2:
        raise ValueError("uniformity needs at least two points")
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    vals = -2.0 * d2[~np.eye(n, dtype=bool)]
    top = vals.max()
    return float(top + math.log(np.mean(np.exp(vals - top))))


@dataclass
class SimilarityHistogram:
    edges: np.ndarray
    counts: np.ndarray
    sorted_curve: np.ndarray  # mean of per-anchor sorted similarities at QUANTILES

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def similarity_histogram(matrix, bins: int = 40) -> SimilarityHistogram:
    """Histogram over [-1, 1] of every anchor-to-candidate similarity in a batch,
    plus the anchor-averaged sorted-similarity curve."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    m = np.asarray(matrix.detach().cpu().numpy() if hasattr(matrix, "detach") else matrix, dtype=np.float64)
    n = m.shape[0]
    sims = m[candidate_mask(n).numpy()].reshape(n, n - 2)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.clip(sims, -1.0, 1.0), bins=edges)
    curve = np.quantile(np.sort(sims, axis=1), QUANTILES, axis=1, method="inverted_cdf").mean(axis=1)
    return SimilarityHistogram(edges, counts.astype(np.int64), curve)


class HistogramAccumulator:
    def __init__(self, bins: int = 40):
        self.bins = bins
        self.edges = np.linspace(-1.0, 1.0, bins + 1)
        self.counts = np.zeros(bins, dtype=np.int64)
        self.curve_sum = np.zeros(len(QUANTILES))
        self.batches = 0

    def add(self, matrix):
        h = similarity_histogram(matrix, self.bins)
        self.counts += h.counts
        self.curve_sum += h.sorted_curve
        self.batches += 1

    def result(self) -> SimilarityHistogram:
        curve = self.curve_sum / max(self.batches, 1)
        return SimilarityHistogram(self.edges.copy(), self.counts.copy(), curve)


def trailing_std(values, fraction: float = 0.2) -> float:
    """Population std of the last ``fraction`` of ``values`` (at least one element)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan")
    w = max(1, int(math.ceil(fraction * v.size)))
    return float(np.std(v[-w:]))


AU_FIELDS = ("epoch", "alignment", "uniformity", "negated_uniformity")
THRESHOLD_FIELDS = ("epoch", "mean_k", "min_k", "max_k", "k_stat_target")


@dataclass
class TrajectoryLog:
    records: list = field(default_factory=list)
    out_dir: Optional[Path] = None

    @property
    def last_epoch(self) -> Optional[int]:
        return self.records[-1]["epoch"] if self.records else None

    def series(self, key: str) -> list:
        return [r.get(key) for r in self.records]

    def flush(self):
        if self.out_dir is None:
            return
        out = Path(self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "diag_alignment_uniformity.csv", AU_FIELDS, self.records)
        _write_csv(out / "diag_threshold.csv", THRESHOLD_FIELDS, self.records)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, fields, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in records:
            w.writerow([_fmt(r.get(f)) for f in fields])


def write_histogram(path, hist: SimilarityHistogram):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def write_sorted_curve(path, hist: SimilarityHistogram):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantile", "similarity"])
        for q, s in zip(QUANTILES, hist.sorted_curve):
            w.writerow([repr(float(q)), repr(float(s))])


def log_epoch(trajectory: TrajectoryLog, record: dict, histogram: Optional[SimilarityHistogram] = None) -> TrajectoryLog:
    """Append one epoch record and flush all diagnostic files."""
    epoch = int(record["epoch"])
    if trajectory.last_epoch is not None and epoch <= trajectory.last_epoch:
        raise ValueError(f"epoch {epoch} does not follow logged epoch {trajectory.last_epoch}")
    rec = dict(record)
    if rec.get("uniformity") is not None and "negated_uniformity" not in rec:
        rec["negated_uniformity"] = -rec["uniformity"]
    trajectory.records.append(rec)
    if trajectory.out_dir is not None and histogram is not None:
        out = Path(trajectory.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_histogram(out / f"diag_sim_hist_{epoch}.csv", histogram)
        write_sorted_curve(out / f"diag_sim_sorted_{epoch}.csv", histogram)
    trajectory.flush()
    return trajectory
