"""Multistep generation, top-K recommendation, and forward-process tracing."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import MASK, UserSequence
from .denoiser import ConsistencyDenoiser, consistency_apply
from .schedule import (
    DiffusionState,
    NoiseSchedule,
    cumulative_beta,
    mask_probability,
)

TRACE_FIELDS = ("t", "position", "item_id", "deviation", "cumulative_beta", "masked")


@dataclass
class SamplingPlan:
    """Descending time grid for multistep generation.

    The grid starts at the horizon and is strictly decreasing; by default the
    steps are uniform, ``horizon * n / n_steps`` for ``n = n_steps .. 1``.
    ``n_steps = 1`` is pure single-step generation.
    """

    n_steps: int = 30
    horizon: float = 60.0
    grid: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.grid is None:
            self.grid = self.horizon * np.arange(self.n_steps, 0, -1) / self.n_steps
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if len(self.grid) != self.n_steps:
            raise ValueError("grid length must equal n_steps")
        if abs(self.grid[0] - self.horizon) > 1e-9:
            raise ValueError("grid must start at the horizon")
        if self.n_steps > 1 and not np.all(np.diff(self.grid) < 0):
            raise ValueError("grid must be strictly decreasing")
        if self.grid[-1] <= 0:
            raise ValueError("grid times must be positive")


@dataclass
class Recommendation:
    user_id: int
    items: np.ndarray
    scores: np.ndarray


def sample(
    model: ConsistencyDenoiser,
    user_id: int,
    plan: SamplingPlan,
    sched: NoiseSchedule,
    deviation_map: Mapping[int, float] | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Generate a full-length item sequence for a user.

    Starts from the all-masked state at the horizon, decodes once, then for
    each remaining grid time re-corrupts the current decode through the
    forward kernel and decodes again.  Popularity deviations for re-noising
    come from ``deviation_map`` (items absent from the user's history fall
    back to a neutral 0).  Deterministic for a fixed generator.
    """
    deviation_map = deviation_map or {}
    rng = rng if rng is not None else np.random.default_rng(plan.seed)
    length = model.seq_len
    state = DiffusionState(
        items=np.full(length, MASK, dtype=np.int64), t=float(plan.grid[0])
    )
    _, decoded = consistency_apply(model, state, user_id)
    items = decoded.items
    for delta in plan.grid[1:]:
        deviations = np.array([deviation_map.get(int(v), 0.0) for v in items])
        p = np.asarray(mask_probability(delta, deviations, sched))
        noisy = items.copy()
        noisy[rng.random(length) < p] = MASK
        _, decoded = consistency_apply(
            model, DiffusionState(items=noisy, t=float(delta)), user_id
        )
        items = decoded.items
    return items


def item_scores(
    model: ConsistencyDenoiser,
    user_id: int,
    generated_items: np.ndarray,
    metric: str = "cosine",
) -> np.ndarray:
    """Score every catalogue item against the aggregated generated sequence.

    The user representation is the mean item embedding of the generated items
    (pad/mask slots dropped).  An empty generated set falls back to the user
    embedding with a warning.
    """
    if metric not in ("cosine", "dot"):
        raise ValueError("metric must be 'cosine' or 'dot'")
    generated = np.asarray(generated_items)
    generated = generated[generated >= 0]
    with torch.no_grad():
        if generated.size == 0:
            warnings.warn(f"user {user_id}: empty generated set; scoring with the user embedding")
            anchor = model.user_table[user_id]
        else:
            anchor = model.item_table[torch.as_tensor(generated, dtype=torch.long)].mean(dim=0)
        catalog = model.item_table
        if metric == "cosine":
            scores = F.normalize(catalog, dim=-1, eps=1e-12) @ F.normalize(
                anchor, dim=-1, eps=1e-12
            )
        else:
            scores = catalog @ anchor
        return scores.cpu().numpy().astype(np.float64)


def rank_items(scores: np.ndarray, k: int, exclude=()) -> tuple[np.ndarray, np.ndarray]:
    """Top-k item ids and scores, excluding the given items; ties break by id."""
    masked = scores.astype(np.float64).copy()
    exclude = np.asarray(sorted(exclude), dtype=np.int64)
    if exclude.size:
        masked[exclude] = -np.inf
    order = np.argsort(-masked, kind="stable")
    order = order[np.isfinite(masked[order])][:k]
    return order, masked[order]


def recommend(
    model: ConsistencyDenoiser,
    user_id: int,
    generated_items: np.ndarray,
    k: int,
    exclude=(),
    metric: str = "cosine",
) -> Recommendation:
    """Top-k recommendation from a generated sequence, excluding seen items."""
    scores = item_scores(model, user_id, generated_items, metric=metric)
    items, top_scores = rank_items(scores, k, exclude)
    return Recommendation(user_id=user_id, items=items, scores=top_scores)


def _simulate_path(
    seq: UserSequence,
    deviations: np.ndarray,
    sched: NoiseSchedule,
    n_steps: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """One consistent corruption trajectory observed on an even time grid.

    Returns ``(times, masked)`` with ``masked`` of shape (n_steps, l); padded
    positions stay False.  Positions are absorbed according to the per-step
    conditional hazard implied by the marginal masking probabilities, so the
    masked set is non-decreasing along the path and everything non-padded is
    masked at the horizon.
    """
    if n_steps < 2:
        raise ValueError("a trajectory needs at least 2 grid points")
    times = np.linspace(0.0, sched.horizon, n_steps)
    live = ~seq.pad_mask
    masked = np.zeros((n_steps, len(seq)), dtype=bool)
    prev = np.zeros(int(live.sum()))
    state = np.zeros(int(live.sum()), dtype=bool)
    for step, t in enumerate(times):
        p = np.asarray(mask_probability(t, deviations[live], sched), dtype=np.float64)
        remaining = 1.0 - prev
        hazard = np.ones_like(p)
        active = remaining > 0
        hazard[active] = np.clip((p[active] - prev[active]) / remaining[active], 0.0, 1.0)
        state = state | (rng.random(state.size) < hazard)
        masked[step, live] = state
        prev = p
    return times, masked


def trace_forward(
    seq: UserSequence,
    deviations: np.ndarray,
    sched: NoiseSchedule,
    n_steps: int,
    rng: np.random.Generator,
) -> list[dict]:
    """Rows describing one forward trajectory at evenly spaced times.

    Each row reports a non-padded position's item, popularity deviation,
    cumulative noise level, and masked flag at one grid time.  The final grid
    time is the horizon, where every non-padded position is masked.
    """
    times, masked = _simulate_path(seq, deviations, sched, n_steps, rng)
    rows = []
    for step, t in enumerate(times):
        for pos in np.flatnonzero(~seq.pad_mask):
            rows.append(
                {
                    "t": float(t),
                    "position": int(pos),
                    "item_id": int(seq.items[pos]),
                    "deviation": float(deviations[pos]),
                    "cumulative_beta": float(cumulative_beta(float(t), deviations[pos], sched)),
                    "masked": int(masked[step, pos]),
                }
            )
    return rows


def masking_times(
    seq: UserSequence,
    deviations: np.ndarray,
    sched: NoiseSchedule,
    n_steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """First grid time at which each position is masked; NaN at padded slots."""
    times, masked = _simulate_path(seq, deviations, sched, n_steps, rng)
    out = np.full(len(seq), np.nan)
    for pos in np.flatnonzero(~seq.pad_mask):
        hit = np.flatnonzero(masked[:, pos])
        out[pos] = times[hit[0]] if hit.size else times[-1]
    return out


def write_trace_csv(rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
