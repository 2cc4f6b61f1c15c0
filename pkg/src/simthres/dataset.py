"""Interaction ingestion, leave-one-out splits, batching and evaluation candidates."""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0
FORMATS = ("ml1m", "tsv")
SETTINGS = ("whole", "random", "popular")
MAX_MALFORMED_FRACTION = 0.01


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    rating: Optional[float] = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DataError("user_id and item_id must be nonempty")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


def _parse_line(line: str, fmt: str) -> Interaction:
    if fmt == "ml1m":
        parts = line.split("::")
        if len(parts) != 4:
            raise DataError(f"expected 4 '::' fields, got {len(parts)}")
        user, item, rating, ts = parts
        return Interaction(user.strip(), item.strip(), int(ts), float(rating))
    parts = line.split("\t")
    if len(parts) not in (3, 4):
        raise DataError(f"expected 3 or 4 tab fields, got {len(parts)}")
    rating = float(parts[3]) if len(parts) == 4 and parts[3].strip() else None
    return Interaction(parts[0].strip(), parts[1].strip(), int(parts[2]), rating)


def load_interactions(path, format_spec: str = "ml1m") -> list[Interaction]:
    """Parse an interaction file in ``ml1m`` (``u::i::r::ts``) or ``tsv`` layout.

    Malformed rows are skipped with a warning unless they exceed 1% of the
    nonblank rows, in which case a :class:`DataError` lists their line numbers.
    """
    if format_spec not in FORMATS:
        raise DataError(f"unknown format {format_spec!r}; expected one of {FORMATS}")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    rows: list[Interaction] = []
    bad: list[int] = []
    total = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        total += 1
        try:
            rows.append(_parse_line(line, format_spec))
        except (ValueError, DataError):
            bad.append(lineno)

    if total == 0:
        logger.warning("%s contains no interactions", path)
        return rows
    if bad:
        if len(bad) > MAX_MALFORMED_FRACTION * total:
            shown = ", ".join(map(str, bad[:20]))
            raise DataError(
                f"{len(bad)}/{total} malformed rows in {path} (lines {shown}"
                f"{', ...' if len(bad) > 20 else ''})"
            )
        logger.warning("skipped %d malformed rows in %s (lines %s)", len(bad), path, bad[:20])
    return rows


@dataclass(frozen=True)
class SequenceDataset:
    """Per-user chronological item sequences over a dense item vocabulary.

    Item indices are dense in ``[0, num_items)``; batches shift them by one so
    that token 0 stays reserved for padding.
    """

    item_ids: tuple[str, ...]
    users: tuple[str, ...]
    sequences: tuple[tuple[int, ...], ...]
    max_len: int = 50

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def item_index(self) -> dict[str, int]:
        return {item: i for i, item in enumerate(self.item_ids)}

    def decode(self, user_pos: int) -> list[str]:
        return [self.item_ids[i] for i in self.sequences[user_pos]]

    def vocab_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for item in self.item_ids:
            h.update(item.encode("utf-8"))
            h.update(b"\0")
        return h.hexdigest()[:16]


def build_dataset(
    interactions: Sequence[Interaction],
    min_seq_len: int = 3,
    max_len: int = 50,
    min_item_count: int = 1,
) -> SequenceDataset:
    if min_seq_len < 3:
        raise DataError("min_seq_len must be >= 3 so that train/valid/test positions exist")
    if max_len < 1:
        raise DataError("max_len must be positive")

    if min_item_count > 1:
        counts = Counter(x.item_id for x in interactions)
        interactions = [x for x in interactions if counts[x.item_id] >= min_item_count]

    per_user: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for order, x in enumerate(interactions):
        per_user[x.user_id].append((x.timestamp, order, x.item_id))

    kept = [(u, sorted(rows)) for u, rows in per_user.items() if len(rows) >= min_seq_len]
    if not kept:
        raise DataError(f"no user has >= {min_seq_len} interactions")

    # vocabulary in first-appearance order over the surviving, sorted sequences
    vocab: dict[str, int] = {}
    sequences = []
    for _, rows in kept:
        seq = []
        for _, _, item in rows:
            if item not in vocab:
                vocab[item] = len(vocab)
            seq.append(vocab[item])
        sequences.append(tuple(seq))

    return SequenceDataset(
        item_ids=tuple(vocab),
        users=tuple(u for u, _ in kept),
        sequences=tuple(sequences),
        max_len=max_len,
    )


@dataclass(frozen=True)
class SplitView:
    dataset: SequenceDataset
    train_prefix: tuple[tuple[int, ...], ...]
    valid_target: tuple[int, ...]
    test_target: tuple[int, ...]
    item_frequency: np.ndarray = field(repr=False, compare=False)

    @property
    def num_users(self) -> int:
        return len(self.train_prefix)

    @property
    def num_items(self) -> int:
        return self.dataset.num_items

    def history(self, user: int, stage: str) -> tuple[int, ...]:
        """Items the model sees before predicting the ``stage`` target."""
        if stage == "valid":
            return self.train_prefix[user]
        if stage == "test":
            return self.train_prefix[user] + (self.valid_target[user],)
        raise ValueError(f"unknown stage {stage!r}")

    def target(self, user: int, stage: str) -> int:
        return self.valid_target[user] if stage == "valid" else self.test_target[user]

    def training_users(self) -> list[int]:
        """Users whose prefix yields at least one (input, next item) pair."""
        return [u for u, p in enumerate(self.train_prefix) if len(p) >= 2]


def split(dataset: SequenceDataset) -> SplitView:
    prefixes, valid, test = [], [], []
    for seq in dataset.sequences:
        if len(seq) < 3:
            raise DataError("every sequence needs at least 3 items")
        prefixes.append(tuple(seq[:-2]))
        valid.append(seq[-2])
        test.append(seq[-1])
    freq = np.zeros(dataset.num_items, dtype=np.int64)
    for p in prefixes:
        np.add.at(freq, np.asarray(p, dtype=np.int64), 1)
    return SplitView(dataset, tuple(prefixes), tuple(valid), tuple(test), freq)


def pad_left(items: Sequence[int], max_len: int) -> np.ndarray:
    """Token row holding the most recent ``max_len`` items, left-padded with 0.

    ``items`` are dense indices; tokens are ``index + 1``.
    """
    tail = list(items)[-max_len:] if max_len > 0 else []
    row = np.zeros(max_len, dtype=np.int64)
    if tail:
        row[max_len - len(tail):] = np.asarray(tail, dtype=np.int64) + 1
    return row


@dataclass
class Batch:
    items: np.ndarray  # (B, max_len) tokens, 0 = padding
    lengths: np.ndarray  # (B,)
    targets: np.ndarray  # (B,) dense item indices
    users: np.ndarray  # (B,) user positions in the dataset
    batch_id: int = 0

    def __len__(self):
        return len(self.targets)


def make_batch(rows: Sequence[tuple[int, Sequence[int], int]], max_len: int, batch_id: int = 0) -> Batch:
    """Assemble ``(user, history, target)`` rows into a padded batch."""
    items = np.stack([pad_left(h, max_len) for _, h, _ in rows])
    lengths = np.array([min(len(h), max_len) for _, h, _ in rows], dtype=np.int64)
    targets = np.array([t for _, _, t in rows], dtype=np.int64)
    users = np.array([u for u, _, _ in rows], dtype=np.int64)
    return Batch(items, lengths, targets, users, batch_id)


def training_rows(split_view: SplitView) -> list[tuple[int, tuple[int, ...], int]]:
    """One ``(user, input, target)`` row per training user: the prefix minus its
    last item predicts that last item."""
    return [(u, split_view.train_prefix[u][:-1], split_view.train_prefix[u][-1])
            for u in split_view.training_users()]


def make_batches(split_view: SplitView, batch_size: int, shuffle_seed: Optional[int] = 0) -> Iterator[Batch]:
    """Yield training batches in a seeded order.

    A trailing batch of a single row is merged into its predecessor since a
    lone anchor has no in-batch candidates.
    """
    if batch_size < 2:
        raise DataError("batch_size must be >= 2")
    rows = training_rows(split_view)
    order = np.arange(len(rows))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(rows))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    max_len = split_view.dataset.max_len
    for b, chunk in enumerate(chunks):
        yield make_batch([rows[i] for i in chunk], max_len, batch_id=b)


def num_batches(split_view: SplitView, batch_size: int) -> int:
    n = len(split_view.training_users())
    count = math.ceil(n / batch_size)
    if count > 1 and n % batch_size == 1:
        count -= 1
    return count


def candidate_set(
    split_view: SplitView,
    user: int,
    setting: str,
    size: int = 100,
    rng_seed: int = 0,
    stage: str = "test",
    exclude_history: bool = True,
) -> list[int]:
    """Candidate items for ranking one user's ``stage`` target.

    The ground-truth target is always the first element and appears once.
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown candidate setting {setting!r}")
    n = split_view.num_items
    target = split_view.target(user, stage)
    excluded = set(split_view.history(user, stage)) if exclude_history else set()
    excluded.add(target)

    if setting == "whole":
        return [target] + [i for i in range(n) if i not in excluded]

    if size > n:
        raise DataError(f"candidate size {size} exceeds item count {n}")
    if size < 1:
        raise DataError("candidate size must be >= 1")
    pool = np.array([i for i in range(n) if i not in excluded], dtype=np.int64)
    need = size - 1
    if need > len(pool):
        raise DataError(f"user {user}: only {len(pool)} eligible items for {need} negatives")

    if setting == "random":
        rng = np.random.default_rng([rng_seed, user])
        picked = rng.choice(pool, size=need, replace=False)
        return [target] + picked.tolist()

    # popular: descending frequency, ties by ascending item index
    freq = split_view.item_frequency[pool]
    order = np.lexsort((pool, -freq))
    return [target] + pool[order[:need]].tolist()
