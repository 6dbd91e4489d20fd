"""Interaction ingestion, chronological splits, fixed-length sequences, popularity.

Input files are UTF-8 text with one event per line, tab- or comma-separated:
``user_id, item_id, rating, timestamp``.  Ids are re-indexed densely in order
of first appearance so that embedding tables can be allocated directly from
the resulting counts.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

#: Sentinel for left-padded slots in fixed-length sequences.  Padded slots are
#: never corrupted and never contribute to losses or popularity statistics.
PAD = -2
#: Sentinel for the absorbing state a position falls into during corruption.
MASK = -1


class ParseError(ValueError):
    """A row of a data file did not parse as (user, item, rating, timestamp)."""


class EmptyDatasetError(ValueError):
    """No events survived loading or rating-threshold filtering."""


@dataclass
class InteractionLog:
    """Column-oriented implicit-feedback event log with dense integer ids."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    n_users: int
    n_items: int

    def __post_init__(self):
        n = len(self.users)
        if not (len(self.items) == len(self.ratings) == len(self.timestamps) == n):
            raise ValueError("event columns have mismatched lengths")

    def __len__(self) -> int:
        return len(self.users)

    def subset(self, index: np.ndarray) -> "InteractionLog":
        """View of the given event rows; id spaces are preserved."""
        return InteractionLog(
            users=self.users[index],
            items=self.items[index],
            ratings=self.ratings[index],
            timestamps=self.timestamps[index],
            n_users=self.n_users,
            n_items=self.n_items,
        )

    def events_by_user(self) -> list[np.ndarray]:
        """Per-user event indices in original file order."""
        buckets: list[list[int]] = [[] for _ in range(self.n_users)]
        for row, user in enumerate(self.users):
            buckets[user].append(row)
        return [np.asarray(b, dtype=np.int64) for b in buckets]

    def user_item_sets(self) -> list[set[int]]:
        """Per-user set of interacted items."""
        out: list[set[int]] = [set() for _ in range(self.n_users)]
        for user, item in zip(self.users, self.items):
            out[user].add(int(item))
        return out

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items).astype(np.int64)


@dataclass
class SplitBundle:
    """Disjoint per-user chronological train/validation/test views of a log."""

    train: InteractionLog
    validation: InteractionLog
    test: InteractionLog

    def stats(self) -> dict:
        return {
            "n_users": self.train.n_users,
            "n_items": self.train.n_items,
            "n_train": len(self.train),
            "n_val": len(self.validation),
            "n_test": len(self.test),
        }


@dataclass
class UserSequence:
    """Fixed-length, oldest-first interaction sequence for one user.

    Shorter histories are left-padded with :data:`PAD`; ``pad_mask`` is True
    exactly at padded slots.
    """

    user_id: int
    items: np.ndarray
    pad_mask: np.ndarray

    def __post_init__(self):
        if len(self.items) != len(self.pad_mask):
            raise ValueError("items and pad_mask lengths differ")

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class PopularityTable:
    """Per-item interaction frequency normalized by the most frequent item."""

    pop: np.ndarray

    def __post_init__(self):
        self.pop = np.asarray(self.pop, dtype=np.float64)
        if self.pop.size and (self.pop.min() < 0.0 or self.pop.max() > 1.0):
            raise ValueError("popularity values must lie in [0, 1]")

    def __getitem__(self, item: int) -> float:
        return float(self.pop[item])

    def __len__(self) -> int:
        return len(self.pop)


def _parse_line(line: str, lineno: int) -> tuple[int, int, float, int]:
    sep = "\t" if "\t" in line else ","
    parts = [p.strip() for p in line.split(sep)]
    if len(parts) < 4:
        raise ParseError(f"line {lineno}: expected 4 fields, got {len(parts)}")
    try:
        user = int(parts[0])
        item = int(parts[1])
        rating = float(parts[2])
        timestamp = int(float(parts[3]))
    except ValueError as exc:
        raise ParseError(f"line {lineno}: {exc}") from None
    return user, item, rating, timestamp


def load_interactions(path: str | Path, threshold: float = 3.0) -> InteractionLog:
    """Load an event file, keep ratings >= ``threshold``, re-index ids densely.

    Id assignment is deterministic: ids are issued in order of first
    appearance among the retained events, so re-running ingestion on the same
    file reproduces the same mapping.
    """
    path = Path(path)
    users: list[int] = []
    items: list[int] = []
    ratings: list[float] = []
    timestamps: list[int] = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            user, item, rating, timestamp = _parse_line(line, lineno)
            if rating < threshold:
                continue
            users.append(user)
            items.append(item)
            ratings.append(rating)
            timestamps.append(timestamp)
    if not users:
        raise EmptyDatasetError(
            f"{path}: no events with rating >= {threshold}"
        )
    user_index: dict[int, int] = {}
    item_index: dict[int, int] = {}
    for u in users:
        user_index.setdefault(u, len(user_index))
    for v in items:
        item_index.setdefault(v, len(item_index))
    log = InteractionLog(
        users=np.asarray([user_index[u] for u in users], dtype=np.int64),
        items=np.asarray([item_index[v] for v in items], dtype=np.int64),
        ratings=np.asarray(ratings, dtype=np.float64),
        timestamps=np.asarray(timestamps, dtype=np.int64),
        n_users=len(user_index),
        n_items=len(item_index),
    )
    logger.info(
        "loaded %d events from %s (%d users, %d items)",
        len(log), path, log.n_users, log.n_items,
    )
    return log


def write_interactions(log: InteractionLog, path: str | Path) -> None:
    """Write a log as a tab-separated event file (the inverse of loading)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for u, v, r, ts in zip(log.users, log.items, log.ratings, log.timestamps):
            handle.write(f"{int(u)}\t{int(v)}\t{float(r):g}\t{int(ts)}\n")


def write_split_stats(bundle: SplitBundle, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bundle.stats(), indent=2, sort_keys=True))


def split_chronological(
    log: InteractionLog, ratios: tuple[int, int, int] = (8, 1, 1)
) -> SplitBundle:
    """Per-user chronological split into train/validation/test.

    Each user's events are sorted by timestamp (stable, so equal timestamps
    keep file order).  With ``k`` events, the first ``floor(r_train*k/total)``
    go to train, the next ``round(r_val*k/total)`` (half-up) to validation,
    and the remainder to test.  Users with fewer than 3 events go entirely to
    train so that every evaluated user is seen during training.
    """
    r_train, r_val, r_test = ratios
    if min(r_train, r_val, r_test) <= 0:
        raise ValueError("split ratios must be positive")
    total = r_train + r_val + r_test
    train_idx: list[int] = []
    val_idx: list[int] = []
    test_idx: list[int] = []
    for rows in log.events_by_user():
        if rows.size == 0:
            continue
        order = rows[np.argsort(log.timestamps[rows], kind="stable")]
        k = len(order)
        if k < 3:
            train_idx.extend(order)
            continue
        n_train = (r_train * k) // total
        n_val = (2 * r_val * k + total) // (2 * total)
        n_val = min(n_val, k - n_train)
        train_idx.extend(order[:n_train])
        val_idx.extend(order[n_train:n_train + n_val])
        test_idx.extend(order[n_train + n_val:])
    return SplitBundle(
        train=log.subset(np.asarray(train_idx, dtype=np.int64)),
        validation=log.subset(np.asarray(val_idx, dtype=np.int64)),
        test=log.subset(np.asarray(test_idx, dtype=np.int64)),
    )


def build_sequences(train: InteractionLog, seq_len: int) -> list[UserSequence]:
    """Fixed-length training sequences: the ``seq_len`` most recent items per user.

    Items are ordered oldest-first; users with shorter histories are
    left-padded.  Users without any training events are excluded and logged.
    """
    if seq_len < 1:
        raise ValueError("sequence length must be >= 1")
    sequences: list[UserSequence] = []
    skipped = 0
    for user, rows in enumerate(train.events_by_user()):
        if rows.size == 0:
            skipped += 1
            logger.info("user %d has no training events; excluded", user)
            continue
        order = rows[np.argsort(train.timestamps[rows], kind="stable")]
        recent = train.items[order[-seq_len:]]
        n_pad = seq_len - len(recent)
        items = np.concatenate([np.full(n_pad, PAD, dtype=np.int64), recent])
        pad_mask = np.zeros(seq_len, dtype=bool)
        pad_mask[:n_pad] = True
        sequences.append(UserSequence(user_id=user, items=items, pad_mask=pad_mask))
    if skipped:
        logger.info("excluded %d users without training events", skipped)
    return sequences


def popularity(train: InteractionLog) -> PopularityTable:
    """Item frequency on the training split, scaled so the max item is 1.0."""
    if len(train) == 0:
        raise EmptyDatasetError("cannot compute popularity of an empty log")
    counts = train.item_counts()
    return PopularityTable(pop=counts / counts.max())


def popularity_deviation(seq: UserSequence, table: PopularityTable) -> np.ndarray:
    """Per-position popularity offset from the sequence mean.

    Returns an array aligned with ``seq.items``; padded positions hold NaN and
    must be excluded downstream.  The non-padded entries sum to zero.
    """
    live = ~seq.pad_mask
    if not live.any():
        raise ValueError("sequence contains only padding")
    values = table.pop[seq.items[live]]
    deviations = np.full(len(seq), np.nan, dtype=np.float64)
    deviations[live] = values - values.mean()
    return deviations
