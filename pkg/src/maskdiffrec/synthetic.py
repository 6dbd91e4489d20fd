"""Synthetic implicit-feedback corpora with controllable structure.

These generators produce ready-made :class:`~maskdiffrec.corpus.InteractionLog`
objects (dense ids, increasing per-user timestamps) whose final four events
per user are two fresh validation items followed by two fresh test items, so
a per-user 8:1:1 chronological split recovers them exactly.
"""
from __future__ import annotations

import numpy as np

from .corpus import InteractionLog


def _assemble(rows: list[tuple[int, int, float, int]], n_users: int, n_items: int) -> InteractionLog:
    arr = np.asarray(rows, dtype=np.float64)
    return InteractionLog(
        users=arr[:, 0].astype(np.int64),
        items=arr[:, 1].astype(np.int64),
        ratings=arr[:, 2],
        timestamps=arr[:, 3].astype(np.int64),
        n_users=n_users,
        n_items=n_items,
    )


def two_block_corpus(seed: int = 0) -> InteractionLog:
    """50 users, 30 items, 20 events each, two disjoint preference blocks.

    Items split into two blocks of 15; users only ever touch their own block.
    Within a block, nine "core" items carry most of the traffic (with a
    linearly decaying weight profile, so popularity varies) and three rare
    item pairs rotate roles across three user groups: each group trains on
    one pair, validates on the next, and is tested on the third.  Validation
    and test items therefore never appear in the user's own training events
    but do appear in other users' training events, so they are learnable yet
    invisible to a pure popularity ranker.
    """
    rng = np.random.default_rng(seed)
    rows: list[tuple[int, int, float, int]] = []
    n_users, n_items = 50, 30
    users_per_block = 25
    core_weights = np.linspace(1.0, 0.4, 9)
    edge_weight = 0.1
    for block in range(2):
        base = block * 15
        core = np.arange(base, base + 9)
        pairs = [
            np.array([base + 9, base + 10]),
            np.array([base + 11, base + 12]),
            np.array([base + 13, base + 14]),
        ]
        group_sizes = [9, 8, 8]
        user = block * users_per_block
        for group, size in enumerate(group_sizes):
            own = pairs[group]
            val_pair = pairs[(group + 1) % 3]
            test_pair = pairs[(group + 2) % 3]
            pool = np.concatenate([core, own])
            weights = np.concatenate([core_weights, [edge_weight, edge_weight]])
            weights = weights / weights.sum()
            for _ in range(size):
                ts = user * 1000
                # both rare items of the group's own pair always appear in
                # training so every pair has support in the training split
                train_items = list(own) + list(
                    rng.choice(pool, size=14, replace=True, p=weights)
                )
                for item in train_items:
                    rows.append((user, int(item), float(rng.choice([3, 4, 5])), ts))
                    ts += 1
                for item in val_pair:
                    rows.append((user, int(item), 5.0, ts))
                    ts += 1
                for item in test_pair:
                    rows.append((user, int(item), 5.0, ts))
                    ts += 1
                user += 1
    return _assemble(rows, n_users, n_items)


def clustered_corpus(
    n_users: int = 600,
    n_items: int = 1200,
    n_clusters: int = 8,
    min_events: int = 30,
    max_events: int = 120,
    cross_cluster_rate: float = 0.1,
    seed: int = 0,
) -> InteractionLog:
    """A larger corpus with latent user clusters and a popularity backbone.

    Users draw mostly from their own cluster's items under a Zipf-like
    preference profile, with occasional draws from a global popularity
    distribution.  The final four events per user are fresh in-cluster items
    (two validation, two test) sampled from the same preference profile.
    """
    if n_items % n_clusters:
        raise ValueError("n_items must be divisible by n_clusters")
    rng = np.random.default_rng(seed)
    cluster_size = n_items // n_clusters
    ranks = np.arange(1, cluster_size + 1, dtype=np.float64)
    cluster_profile = 1.0 / ranks**0.8
    cluster_profile /= cluster_profile.sum()
    global_ranks = np.arange(1, n_items + 1, dtype=np.float64)
    global_profile = 1.0 / global_ranks
    global_profile /= global_profile.sum()
    rows: list[tuple[int, int, float, int]] = []
    for user in range(n_users):
        cluster = user % n_clusters
        cluster_items = np.arange(cluster * cluster_size, (cluster + 1) * cluster_size)
        n_events = int(rng.integers(min_events, max_events + 1))
        ts = user * 10_000
        seen: set[int] = set()
        for _ in range(n_events - 4):
            if rng.random() < cross_cluster_rate:
                item = int(rng.choice(n_items, p=global_profile))
            else:
                item = int(rng.choice(cluster_items, p=cluster_profile))
            seen.add(item)
            rows.append((user, item, float(rng.choice([3, 4, 5])), ts))
            ts += 1
        held_out: list[int] = []
        while len(held_out) < 4:
            item = int(rng.choice(cluster_items, p=cluster_profile))
            if item not in seen and item not in held_out:
                held_out.append(item)
        for item in held_out:
            rows.append((user, item, 5.0, ts))
            ts += 1
    return _assemble(rows, n_users, n_items)
