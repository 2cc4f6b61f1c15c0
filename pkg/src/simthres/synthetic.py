"""Synthetic interaction logs with planted item clusters."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import Interaction


def clustered_interactions(
    n_users: int = 500,
    n_items: int = 200,
    n_clusters: int = 8,
    min_len: int = 8,
    max_len: int = 20,
    p_step: float = 0.8,
    p_cluster: float = 0.15,
    seed: int = 0,
) -> list[Interaction]:
    """Users walk around the ring of items of one cluster.

    Each next item is the successor on the ring with probability ``p_step``,
    a random item of the same cluster with probability ``p_cluster`` and a
    uniformly random item otherwise.
    """
    rng = np.random.default_rng(seed)
    clusters = np.array_split(rng.permutation(n_items), n_clusters)
    out = []
    for u in range(n_users):
        ring = clusters[u % n_clusters]
        pos = int(rng.integers(len(ring)))
        length = int(rng.integers(min_len, max_len + 1))
        for t in range(length):
            r = rng.random()
            if t == 0 or r < p_step:
                pos = (pos + (t > 0)) % len(ring)
                item = int(ring[pos])
            elif r < p_step + p_cluster:
                pos = int(rng.integers(len(ring)))
                item = int(ring[pos])
            else:
                item = int(rng.integers(n_items))
            out.append(Interaction(f"u{u}", f"i{item}", 1000 + t))
    return out


def write_tsv(path, interactions) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for x in interactions:
            fh.write(f"{x.user_id}\t{x.item_id}\t{x.timestamp}\n")
    return path
