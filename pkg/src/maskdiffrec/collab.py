"""Collaborative embedding initialization.

The denoiser's user/item tables are seeded either from an externally trained
embedding file or, when none is available, from a self-contained pairwise-
ranking matrix factorization trained on the implicit-feedback training split.

Embedding file format: UTF-8 text, first line ``n m d``, followed by ``n``
user rows and ``m`` item rows of ``d`` space-separated reals.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import EmptyDatasetError, InteractionLog

logger = logging.getLogger(__name__)

SOURCE_LOADED = "loaded"
SOURCE_FALLBACK_MF = "fallback_mf"


@dataclass
class EmbeddingBundle:
    """User and item factor tables with a provenance tag."""

    user_factors: np.ndarray
    item_factors: np.ndarray
    source: str
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.user_factors = np.asarray(self.user_factors, dtype=np.float64)
        self.item_factors = np.asarray(self.item_factors, dtype=np.float64)
        if self.user_factors.ndim != 2 or self.item_factors.ndim != 2:
            raise ValueError("factor tables must be 2-D")
        if self.user_factors.shape[1] != self.item_factors.shape[1]:
            raise ValueError("user and item factor widths differ")
        if not (np.isfinite(self.user_factors).all() and np.isfinite(self.item_factors).all()):
            raise ValueError("factor tables contain non-finite entries")

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    @property
    def dim(self) -> int:
        return self.user_factors.shape[1]


def save_embeddings(bundle: EmbeddingBundle, path: str | Path) -> None:
    """Write factors as text; 17 significant digits keep round trips exact."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(f"{bundle.n_users} {bundle.n_items} {bundle.dim}\n")
        for row in bundle.user_factors:
            handle.write(" ".join(f"{x:.17g}" for x in row) + "\n")
        for row in bundle.item_factors:
            handle.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def load_embeddings(
    path: str | Path,
    expected_users: int | None = None,
    expected_items: int | None = None,
) -> EmbeddingBundle:
    """Load an embedding file, validating dimensions against the corpus."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        header = handle.readline().split()
        if len(header) != 3:
            raise ValueError(f"{path}: malformed header, expected 'n m d'")
        n_users, n_items, dim = (int(x) for x in header)
        if expected_users is not None and n_users != expected_users:
            raise ValueError(
                f"{path}: expected {expected_users} users, found {n_users}"
            )
        if expected_items is not None and n_items != expected_items:
            raise ValueError(
                f"{path}: expected {expected_items} items, found {n_items}"
            )
        rows = np.loadtxt(handle, dtype=np.float64, ndmin=2)
    if rows.shape != (n_users + n_items, dim):
        raise ValueError(
            f"{path}: expected {n_users + n_items} rows of {dim} values, "
            f"found array of shape {rows.shape}"
        )
    if not np.isfinite(rows).all():
        raise ValueError(f"{path}: non-finite embedding entry")
    return EmbeddingBundle(
        user_factors=rows[:n_users],
        item_factors=rows[n_users:],
        source=SOURCE_LOADED,
    )


def train_fallback_mf(
    train: InteractionLog,
    dim: int = 64,
    epochs: int = 30,
    rng: np.random.Generator | None = None,
    learning_rate: float = 0.01,
    batch_size: int = 4096,
) -> EmbeddingBundle:
    """Pairwise-ranking matrix factorization on implicit feedback.

    Each step samples an observed (user, item) pair plus a uniformly drawn
    non-interacted negative item and ascends ``log sigmoid(u.v - u.v')``.
    Deterministic for a fixed generator.
    """
    if dim < 1:
        raise ValueError("embedding dimension must be >= 1")
    if len(train) == 0:
        raise EmptyDatasetError("cannot factorize an empty training log")
    rng = rng if rng is not None else np.random.default_rng(0)
    n, m = train.n_users, train.n_items
    user_factors = rng.normal(0.0, 0.1, size=(n, dim))
    item_factors = rng.normal(0.0, 0.1, size=(m, dim))
    interacted = train.user_item_sets()
    users_all = train.users
    items_all = train.items
    epoch_losses: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(train))
        total_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            users = users_all[batch]
            positives = items_all[batch]
            negatives = _sample_negatives(users, interacted, m, rng)
            pu = user_factors[users]
            qp = item_factors[positives]
            qn = item_factors[negatives]
            margin = np.sum(pu * (qp - qn), axis=1)
            # d/dx log sigmoid(x) = sigmoid(-x)
            coef = _sigmoid(-margin)[:, None]
            total_loss += float(np.sum(np.logaddexp(0.0, -margin)))
            np.add.at(user_factors, users, learning_rate * coef * (qp - qn))
            np.add.at(item_factors, positives, learning_rate * coef * pu)
            np.add.at(item_factors, negatives, -learning_rate * coef * pu)
        epoch_losses.append(total_loss / len(order))
    logger.info(
        "fallback MF trained for %d epochs (final mean loss %.4f)",
        epochs, epoch_losses[-1],
    )
    return EmbeddingBundle(
        user_factors=user_factors,
        item_factors=item_factors,
        source=SOURCE_FALLBACK_MF,
        epoch_losses=epoch_losses,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sample_negatives(
    users: np.ndarray, interacted: list[set[int]], n_items: int,
    rng: np.random.Generator, max_tries: int = 50,
) -> np.ndarray:
    negatives = rng.integers(0, n_items, size=len(users))
    for i, user in enumerate(users):
        seen = interacted[user]
        if len(seen) >= n_items:
            continue  # degenerate user who saw everything
        tries = 0
        while negatives[i] in seen and tries < max_tries:
            negatives[i] = rng.integers(0, n_items)
            tries += 1
    return negatives
