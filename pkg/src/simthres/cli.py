"""Command-line driver: ``simthres {train,eval,diagnose,gradcheck}``.

Every verb writes ``manifest.json`` into its output directory with the
resolved configuration, seeds and input fingerprints.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import diagnostics as diag
from .checkpoint import CheckpointError, load_checkpoint
from .config import TrainConfig, coerce, load_config_file, resolve
from .dataset import SETTINGS, DataError, build_dataset, load_interactions, make_batches, pad_left, split
from .gradcheck import GradcheckConfig, gradcheck
from .metrics import evaluate, reports_to_csv, reports_to_json
from .similarity import BatchViews, cosine_matrix
from .trainer import load_models, step_seeds, train

logger = logging.getLogger("simthres")

# flag dest -> TrainConfig field
FLAG_FIELDS = {
    "data": "data", "format": "format", "strategy": "strategy", "k0": "k0", "q": "q",
    "lam": "lam", "lam_cl": "lam_cl", "aug": "augmentation", "positive_sampling": "positive_sampling",
    "seed": "seed", "epochs": "epochs", "batch_size": "batch_size", "candidates": "eval_candidates",
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat TOML file of TrainConfig keys; flags override it")
    p.add_argument("--data", help="interaction file")
    p.add_argument("--format", choices=["ml1m", "tsv"])
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--candidates", type=int, help="candidate list size for random/popular settings")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simthres", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train an encoder and write checkpoints, logs and diagnostics")
    _common(t)
    t.add_argument("--strategy", choices=["fixed", "statistical", "learnable"])
    t.add_argument("--k0", type=float, help="threshold for the fixed strategy")
    t.add_argument("--q", type=float, help="percentile for the statistical target")
    t.add_argument("--lambda", dest="lam", type=float, help="weight of the threshold regulariser")
    t.add_argument("--lambda-cl", dest="lam_cl", type=float, help="weight of the contrastive loss")
    t.add_argument("--aug", choices=["su", "un", "us_x"], type=str.lower)
    t.add_argument("--positive-sampling", choices=["on", "off"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--setting", default="whole",
                   help="comma-separated candidate settings for the final test report (default whole)")

    e = sub.add_parser("eval", help="rank test targets with a checkpoint")
    _common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--setting", default="whole,random,popular")
    e.add_argument("--stage", choices=["valid", "test"], default="test")

    d = sub.add_parser("diagnose", help="recompute alignment, uniformity and similarity histograms")
    _common(d)
    d.add_argument("--ckpt", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference audit of every objective")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("-v", "--verbose", action="store_true")
    return parser


def _settings(text: str) -> list[str]:
    names = [s.strip().lower() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in SETTINGS]
    if bad or not names:
        raise ValueError(f"unknown setting(s) {bad}; choose from {SETTINGS}")
    return names


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, verb: str, config: dict, extra: dict):
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "verb": verb,
        "package_version": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "config": config,
        **extra,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_split(cfg: TrainConfig):
    if not cfg.data:
        raise DataError("no data file given (--data or 'data' in the config file)")
    rows = load_interactions(cfg.data, cfg.format)
    ds = build_dataset(rows, cfg.min_seq_len, cfg.max_len, cfg.min_item_count)
    return split(ds)


def _overrides(args) -> dict:
    out = {}
    for dest, key in FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[key] = value
    return out


def cmd_train(args) -> int:
    cfg = resolve(args.config, **_overrides(args))
    settings = _settings(args.setting)
    out = Path(args.out or "runs/default")
    sv = _load_split(cfg)
    write_manifest(out, "train", cfg.to_dict(), {
        "data_sha256": _sha256(cfg.data),
        "vocab_hash": sv.dataset.vocab_hash(),
        "seeds": {"seed": cfg.seed, "epoch_shuffle": "seed * 100003 + epoch",
                  "step": "SeedSequence([seed, epoch, batch_id])"},
        "settings": settings,
    })
    state = train(cfg, sv, out)
    model, _, _ = load_models(out / "best.ckpt")
    reports = [evaluate(model, sv, s, (5, 10), stage="test", size=cfg.eval_candidates, seed=cfg.seed) for s in settings]
    (out / "metrics.csv").write_text(reports_to_csv(reports))
    (out / "metrics.json").write_text(reports_to_json(reports) + "\n")
    print(f"best epoch {state.best_epoch} valid NDCG@10 {state.best_ndcg:.4f}")
    print(reports_to_csv(reports), end="")
    return 0


def _checkpoint_config(args):
    """Training config stored in the checkpoint, then the config file, then flags."""
    header, _ = load_checkpoint(args.ckpt)
    values = dict(header["config"]["train"])
    if args.config:
        values.update(load_config_file(args.config))
    values.update({k: coerce(k, v) for k, v in _overrides(args).items()})
    return TrainConfig(**values), header


def cmd_eval(args) -> int:
    cfg, header = _checkpoint_config(args)
    settings = _settings(args.setting)
    sv = _load_split(cfg)
    if sv.dataset.vocab_hash() != header["vocab_hash"]:
        raise CheckpointError("checkpoint vocabulary does not match the data file")
    model, _, _ = load_models(args.ckpt)
    reports = [evaluate(model, sv, s, (5, 10), stage=args.stage, size=cfg.eval_candidates, seed=cfg.seed) for s in settings]
    out = Path(args.out or Path(args.ckpt).parent / "eval")
    write_manifest(out, "eval", cfg.to_dict(), {"ckpt": str(args.ckpt), "ckpt_sha256": _sha256(args.ckpt),
                                                "settings": settings, "stage": args.stage})
    (out / "metrics.csv").write_text(reports_to_csv(reports))
    (out / "metrics.json").write_text(reports_to_json(reports) + "\n")
    print(reports_to_csv(reports), end="")
    return 0


def cmd_diagnose(args) -> int:
    cfg, header = _checkpoint_config(args)
    sv = _load_split(cfg)
    model, g, _ = load_models(args.ckpt)
    out = Path(args.out or Path(args.ckpt).parent / "diagnose")
    write_manifest(out, "diagnose", cfg.to_dict(), {"ckpt": str(args.ckpt), "ckpt_sha256": _sha256(args.ckpt)})

    users = list(range(sv.num_users))[: cfg.snapshot_size]
    tokens = torch.as_tensor(np.stack([pad_left(sv.history(u, "valid"), cfg.max_len) for u in users]))
    seeds = step_seeds(cfg.seed, 0, 0)
    with torch.no_grad():
        plain = model(tokens).double().numpy()
        a = model(tokens, torch.Generator().manual_seed(seeds[0])).double().numpy()
        b = model(tokens, torch.Generator().manual_seed(seeds[1])).double().numpy()
        hist = diag.HistogramAccumulator(cfg.hist_bins)
        for batch in make_batches(sv, cfg.batch_size, shuffle_seed=None):
            t = torch.as_tensor(batch.items)
            s = step_seeds(cfg.seed, 0, batch.batch_id)
            views = BatchViews.pair(model(t, torch.Generator().manual_seed(s[0])),
                                    model(t, torch.Generator().manual_seed(s[1])))
            hist.add(cosine_matrix(views))
    record = {
        "epoch": int(header["extra"].get("epoch", 0)),
        "alignment": diag.alignment(diag.EmbeddingSnapshot.from_arrays(a, b)),
        "uniformity": diag.uniformity(diag.EmbeddingSnapshot.from_arrays(plain)),
        "k_stat_target": header["extra"].get("stat_target"),
    }
    log = diag.TrajectoryLog(out_dir=out)
    diag.log_epoch(log, record, hist.result())
    print(json.dumps(log.records[-1], sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = GradcheckConfig() if args.seed is None else GradcheckConfig(seed=args.seed)
    report = gradcheck(cfg)
    if args.out:
        write_manifest(Path(args.out), "gradcheck", vars(cfg), {"errors": report.errors,
                                                                  "max_error": report.max_error})
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
