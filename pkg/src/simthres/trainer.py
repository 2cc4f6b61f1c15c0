"""Epoch loop: dropout views, thresholds, contrastive losses, Adam steps,
statistical target updates, diagnostics, validation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import diagnostics as diag
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .dataset import Batch, SplitView, make_batch, make_batches, pad_left, training_rows
from .encoder import EncoderConfig, NonFiniteLossError, SequenceEncoder
from .losses import Arrangement, LossBreakdown, basic_loss, total_loss
from .metrics import evaluate
from .similarity import BatchViews, candidate_similarities, cosine_matrix
from .threshold import (
    SimilarityReservoir,
    StatTarget,
    ThresholdNet,
    ThresholdVector,
    fixed_thresholds,
    learnable_thresholds,
    statistical_thresholds,
    update_stat_target,
)

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
SNAPSHOT_BATCH_ID = 2**31 - 1  # seed slot for diagnostic dropout views, never a real batch


def step_seeds(seed: int, epoch: int, batch_id: int, n: int = 4) -> list[int]:
    ss = np.random.SeedSequence([seed, epoch, batch_id])
    return [int(s) for s in ss.generate_state(n)]


def build_models(config: TrainConfig, num_items: int):
    torch.manual_seed(config.seed)
    enc_cfg = EncoderConfig(vocab_size=num_items + 1, max_len=config.max_len, dim=config.dim,
                            layers=config.layers, heads=config.heads, dropout_rate=config.dropout,
                            ffn_mult=config.ffn_mult)
    model = SequenceEncoder(enc_cfg).to(DTYPES[config.dtype])
    g = ThresholdNet(config.dim, config.g_hidden).to(DTYPES[config.dtype])
    return model, g


class SamePartner:
    """Draws, for a training row, another row sharing its target item."""

    def __init__(self, rows):
        self.rows = rows
        self.by_target = defaultdict(list)
        for idx, (_, _, t) in enumerate(rows):
            self.by_target[t].append(idx)
        self.row_of_user = {u: idx for idx, (u, _, _) in enumerate(rows)}

    def partners(self, batch: Batch, rng: np.random.Generator):
        """Histories of same-target partners; ``None`` where no partner exists."""
        out = []
        for u, t in zip(batch.users.tolist(), batch.targets.tolist()):
            own = self.row_of_user[u]
            pool = [r for r in self.by_target[t] if r != own]
            out.append(self.rows[pool[int(rng.integers(len(pool)))]][1] if pool else None)
        return out


@dataclass
class TrainState:
    model: SequenceEncoder
    g: ThresholdNet
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    stat_target: StatTarget = field(default_factory=StatTarget)
    best_ndcg: float = -math.inf
    best_epoch: int = -1
    trajectory: diag.TrajectoryLog = field(default_factory=diag.TrajectoryLog)
    history: list = field(default_factory=list)  # per-epoch summaries
    step_k: list = field(default_factory=list)  # mean threshold per step


class Trainer:
    def __init__(self, config: TrainConfig, split_view: SplitView, out_dir=None):
        self.config = config
        self.split = split_view
        self.out = Path(out_dir) if out_dir else None
        self.loss_cfg = config.loss_config()
        self.rows = training_rows(split_view)
        if len(self.rows) < 2:
            raise ValueError("need at least two training users")
        self.partners = SamePartner(self.rows)
        model, g = build_models(config, split_view.num_items)
        groups = [{"params": list(model.parameters())},
                  {"params": list(g.parameters()), "lr": config.g_learning_rate}]
        opt = torch.optim.Adam(groups, lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.eps)
        self.state = TrainState(model, g, opt, config)
        self.reservoir = SimilarityReservoir(config.reservoir_size, seed=config.seed)
        self.state.trajectory.out_dir = self.out
        self._loss_log = None
        self._su_fallbacks = 0
        self._su_rows = 0

    # ------------------------------------------------------------------ batch
    def _thresholds(self, matrix: torch.Tensor, views: BatchViews) -> ThresholdVector:
        cfg = self.config
        n = matrix.shape[0]
        if cfg.strategy == "fixed":
            return fixed_thresholds(cfg.k0, n)
        if cfg.strategy == "statistical" or not self.state.stat_target.defined:
            return statistical_thresholds(matrix, cfg.q)
        return learnable_thresholds(self.state.g, views)

    def _views(self, batch: Batch, seeds) -> list[tuple[str, torch.Tensor]]:
        """Augmented view tokens for each active augmentation setting."""
        aug = self.loss_cfg.augmentation
        tokens = torch.as_tensor(batch.items)
        out = []
        if aug in ("UN", "US_X"):
            out.append(("UN", tokens, seeds[1]))
        if aug in ("SU", "US_X"):
            rng = np.random.default_rng(seeds[3])
            partner = self.partners.partners(batch, rng)
            rows = []
            for own, hist in zip(batch.items, partner):
                rows.append(own if hist is None else pad_left(hist, self.config.max_len))
            self._su_rows += len(partner)
            self._su_fallbacks += sum(p is None for p in partner)
            out.append(("SU", torch.as_tensor(np.stack(rows)), seeds[2]))
        return out

    def batch_loss(self, batch: Batch, epoch: int, collect: bool = True) -> tuple[LossBreakdown, list]:
        st = self.state
        seeds = step_seeds(self.config.seed, epoch, batch.batch_id)
        model = st.model
        tokens = torch.as_tensor(batch.items)
        orig = model(tokens, torch.Generator().manual_seed(seeds[0]))
        scores = orig @ model.item_vectors().T
        l_basic = basic_loss(scores, batch.targets)
        arrangements = []
        for name, aug_tokens, s in self._views(batch, seeds):
            aug = model(aug_tokens, torch.Generator().manual_seed(s))
            views = BatchViews.pair(orig, aug, batch.targets)
            matrix = cosine_matrix(views)
            arrangements.append(Arrangement(matrix, self._thresholds(matrix, views), name))
        bd = total_loss(l_basic, arrangements, self.loss_cfg, st.stat_target)
        return bd, arrangements

    # ------------------------------------------------------------------ epoch
    def train_epoch(self, epoch: int) -> dict:
        st = self.state
        cfg = self.config
        st.model.train()
        hist = diag.HistogramAccumulator(cfg.hist_bins)
        ks, steps_losses = [], []
        k_min, k_max = math.inf, -math.inf
        target_in_effect = st.stat_target.value
        for batch in make_batches(self.split, cfg.batch_size, shuffle_seed=cfg.seed * 100_003 + epoch):
            bd, arrangements = self.batch_loss(batch, epoch)
            if not bool(torch.isfinite(bd.l_total)):
                self._dump_state(batch)
                raise NonFiniteLossError(batch.batch_id, float(bd.l_total))
            st.optimizer.zero_grad(set_to_none=True)
            bd.l_total.backward()
            st.optimizer.step()
            self._assert_finite()

            for arr in arrangements:
                self.reservoir.add(candidate_similarities(arr.matrix.detach()).numpy())
                hist.add(arr.matrix)
                k = arr.thresholds.k.detach()
                k_min = min(k_min, float(k.min()))
                k_max = max(k_max, float(k.max()))
            ks.append(bd.mean_k)
            st.step_k.append(bd.mean_k)
            steps_losses.append(bd.l_total.item())
            self._log_step(bd.record(st.step, epoch=epoch, batch=batch.batch_id, warmup=bd.warmup))
            st.step += 1

        previous = st.stat_target
        st.stat_target = update_stat_target(self.reservoir.values(), cfg.q, previous)
        assert st.stat_target.value is None or abs(st.stat_target.value) <= 1.0 + 1e-6
        self.reservoir.reset()
        if (cfg.strategy == "learnable" and cfg.g_warm_start and not previous.defined
                and st.stat_target.defined):
            st.g.warm_start(st.stat_target.value)

        au = self.alignment_uniformity(epoch)
        record = {
            "epoch": epoch,
            "mean_k": float(np.mean(ks)),
            "min_k": k_min,
            "max_k": k_max,
            "k_stat_target": target_in_effect,
            "k_stat_next": st.stat_target.value,
            "loss": float(np.mean(steps_losses)),
            **au,
        }
        diag.log_epoch(st.trajectory, record, hist.result() if cfg.save_histograms else None)
        return record

    def alignment_uniformity(self, epoch: int) -> dict:
        """Dropout-pair alignment and dropout-free uniformity on a user sample."""
        cfg = self.config
        st = self.state
        users = [u for u, _, _ in self.rows][: cfg.snapshot_size]
        tokens = torch.as_tensor(np.stack([pad_left(self.split.history(u, "valid"), cfg.max_len) for u in users]))
        seeds = step_seeds(cfg.seed, epoch, SNAPSHOT_BATCH_ID)
        with torch.no_grad():
            plain = st.model(tokens).double().numpy()
            a = st.model(tokens, torch.Generator().manual_seed(seeds[0])).double().numpy()
            b = st.model(tokens, torch.Generator().manual_seed(seeds[1])).double().numpy()
        align = diag.alignment(diag.EmbeddingSnapshot.from_arrays(a, b, epoch))
        unif = diag.uniformity(diag.EmbeddingSnapshot.from_arrays(plain, None, epoch))
        return {"alignment": align, "uniformity": unif, "negated_uniformity": -unif}

    def validate(self) -> float:
        rep = evaluate(self.state.model, self.split, self.config.eval_setting, (5, 10), stage="valid",
                       size=self.config.eval_candidates,
                       seed=self.config.seed)
        return rep["NDCG@10"]

    # ------------------------------------------------------------------ run
    def fit(self) -> TrainState:
        cfg = self.config
        st = self.state
        if self.out:
            self.out.mkdir(parents=True, exist_ok=True)
            self._loss_log = open(self.out / "loss_log.jsonl", "w")
        stale = 0
        try:
            for epoch in range(cfg.epochs):
                st.epoch = epoch
                record = self.train_epoch(epoch)
                if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
                    ndcg = self.validate()
                    record["valid_ndcg10"] = ndcg
                    if ndcg > st.best_ndcg:
                        st.best_ndcg, st.best_epoch, stale = ndcg, epoch, 0
                        self.save(self.out / "best.ckpt" if self.out else None)
                    else:
                        stale += 1
                st.history.append(record)
                logger.info("epoch %d loss %.4f mean_k %.3f target %s ndcg %s", epoch, record["loss"],
                            record["mean_k"], record["k_stat_target"], record.get("valid_ndcg10"))
                if cfg.patience and stale >= cfg.patience:
                    logger.info("early stop at epoch %d", epoch)
                    break
        finally:
            if self._loss_log:
                self._loss_log.close()
                self._loss_log = None
        if self._su_rows and self._su_fallbacks == self._su_rows:
            logger.warning("no anchor had a same-target partner; SU views fell back to dropout views")
        if self.out:
            self.save(self.out / "last.ckpt")
            with open(self.out / "epochs.jsonl", "w") as fh:
                for rec in st.history:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return st

    # ------------------------------------------------------------------ io
    def _log_step(self, record: dict):
        if self._loss_log:
            self._loss_log.write(json.dumps(record, sort_keys=True) + "\n")

    def _assert_finite(self):
        for p in list(self.state.model.parameters()) + list(self.state.g.parameters()):
            if not bool(torch.isfinite(p).all()):
                raise FloatingPointError(f"non-finite parameter after step {self.state.step}")

    def _dump_state(self, batch: Batch):
        if self.out:
            self.save(self.out / "crash.ckpt", extra={"batch_id": batch.batch_id, "step": self.state.step})

    def save(self, path, extra: Optional[dict] = None):
        if path is None:
            return
        st = self.state
        meta = {"epoch": st.epoch, "step": st.step, "best_ndcg10": st.best_ndcg,
                "stat_target": st.stat_target.value, "item_ids": list(self.split.dataset.item_ids)}
        meta.update(extra or {})
        save_checkpoint(path, {"encoder": st.model, "threshold": st.g},
                        {"train": self.config.to_dict(), "encoder": st.model.config.to_dict()},
                        self.split.dataset.vocab_hash(), meta)


def train(config: TrainConfig, split_view: SplitView, out_dir=None) -> TrainState:
    torch.use_deterministic_algorithms(True)
    return Trainer(config, split_view, out_dir).fit()


def load_models(path):
    """Rebuild the encoder and threshold net stored in a checkpoint."""
    header, sections = load_checkpoint(path)
    enc_cfg = EncoderConfig(**header["config"]["encoder"])
    tcfg = header["config"]["train"]
    dtype = DTYPES[tcfg.get("dtype", "float32")]
    model = SequenceEncoder(enc_cfg).to(dtype)
    model.load_state_dict(sections["encoder"])
    g = ThresholdNet(enc_cfg.dim, tcfg.get("g_hidden", 64)).to(dtype)
    if "threshold" in sections:
        g.load_state_dict(sections["threshold"])
    model.eval()
    return model, g, header
