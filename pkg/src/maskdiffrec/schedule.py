"""Popularity-aware absorbing noise schedule and forward-process operations.

Each sequence position evolves as an independent two-outcome absorbing chain:
an item either keeps its identity or falls into :data:`~maskdiffrec.corpus.MASK`
and stays there.  The implicit rate structure (unit rate into the absorbing
state, zero rate out, zero rate between items) admits a closed-form transition
kernel, so no dense rate matrix is ever materialized.

The cumulative noise level of a position rises linearly over the horizon and
is offset by a Gaussian bump centred mid-horizon, scaled by how far the item's
popularity deviates from its sequence mean: relatively popular items corrupt
later, relatively rare items earlier.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import MASK, UserSequence

#: Read the cumulative noise level directly as the masking probability.
DIRECT = "direct"
#: Push the cumulative noise level through the absorbing-chain exponential,
#: i.e. masking probability ``1 - exp(-level)``.
MATRIX_EXP = "matrix_exp"

_MODES = (DIRECT, MATRIX_EXP)


@dataclass
class NoiseSchedule:
    """Parameters of the popularity-aware absorbing schedule.

    ``sigma`` defaults to a tenth of the horizon.  ``epsilon`` is the boundary
    time below which the consistency function is the identity.
    """

    horizon: float = 60.0
    omega: float = 0.5
    sigma: float | None = None
    mode: str = DIRECT
    epsilon: float = 0.0

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.sigma is None:
            self.sigma = self.horizon / 10.0
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        if not 0.0 <= self.epsilon < self.horizon:
            raise ValueError("epsilon must lie in [0, horizon)")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")


@dataclass
class DiffusionState:
    """A (possibly corrupted) sequence tagged with its diffusion time.

    Non-masked, non-padded entries always equal the source sequence: the
    absorbing process never swaps item identities, and padded slots are never
    corrupted.
    """

    items: np.ndarray
    t: float

    def masked(self) -> np.ndarray:
        return self.items == MASK

    def copy(self) -> "DiffusionState":
        return DiffusionState(items=self.items.copy(), t=self.t)


def _check_time(t, horizon: float) -> None:
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > horizon):
        raise ValueError(f"time must lie in [0, {horizon}]")


def cumulative_beta(t, deviation, sched: NoiseSchedule):
    """Cumulative absorbing level at time ``t`` for a popularity deviation.

    Computes ``t/T - omega * exp(-(t - T/2)^2 / (2 sigma^2)) * deviation``,
    clamped to [0, 1] and forced to exactly 1 at ``t = T`` so the terminal
    distribution is exactly the absorbing state.  Broadcasts over array
    arguments; returns a float for scalar inputs.
    """
    _check_time(t, sched.horizon)
    t_arr = np.asarray(t, dtype=np.float64)
    dev = np.asarray(deviation, dtype=np.float64)
    half = sched.horizon / 2.0
    bump = np.exp(-((t_arr - half) ** 2) / (2.0 * sched.sigma**2))
    raw = t_arr / sched.horizon - sched.omega * bump * dev
    out = np.clip(raw, 0.0, 1.0)
    out = np.where(t_arr >= sched.horizon, 1.0, out)
    if out.ndim == 0:
        return float(out)
    return out


def mask_probability(t, deviation, sched: NoiseSchedule):
    """Probability that an un-corrupted item is masked by time ``t``.

    In :data:`DIRECT` mode the cumulative level is the probability itself; in
    :data:`MATRIX_EXP` mode it is ``1 - exp(-level)``, the kernel induced by a
    unit absorbing rate.  Both modes are forced to exactly 1 at the horizon.
    """
    level = cumulative_beta(t, deviation, sched)
    if sched.mode == DIRECT:
        return level
    t_arr = np.asarray(t, dtype=np.float64)
    prob = 1.0 - np.exp(-np.asarray(level, dtype=np.float64))
    prob = np.where(t_arr >= sched.horizon, 1.0, prob)
    if prob.ndim == 0:
        return float(prob)
    return prob


def transition_kernel_row(state: int, t, deviation: float, sched: NoiseSchedule) -> dict:
    """Distribution over {keep original, MASK} after time ``t`` from ``state``.

    The mask state is exactly absorbing; item states keep their identity with
    the complementary masking probability.  The row always sums to 1.
    """
    if state == MASK:
        return {MASK: 1.0}
    p = float(mask_probability(t, deviation, sched))
    return {state: 1.0 - p, MASK: p}


def forward_sample(
    x0: UserSequence, t: float, deviations: np.ndarray, sched: NoiseSchedule,
    rng: np.random.Generator,
) -> DiffusionState:
    """Draw a corrupted state at time ``t`` from the clean sequence.

    Each non-padded position is independently replaced by MASK with its own
    masking probability; padded positions are untouched.
    """
    items = x0.items.copy()
    live = np.flatnonzero(~x0.pad_mask)
    if live.size:
        p = np.asarray(mask_probability(t, deviations[live], sched))
        masked = rng.random(live.size) < p
        items[live[masked]] = MASK
    return DiffusionState(items=items, t=float(t))


def position_mask_probabilities(
    seq: UserSequence, t: float, deviations: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """Per-position masking probabilities at ``t``; NaN at padded slots."""
    probs = np.full(len(seq), np.nan, dtype=np.float64)
    live = ~seq.pad_mask
    if live.any():
        probs[live] = np.asarray(mask_probability(t, deviations[live], sched))
    return probs


def pair_one_step_recovery(
    x_t: DiffusionState, x0: UserSequence, probs: np.ndarray
) -> tuple[DiffusionState, int | None]:
    """Restore the single masked position with the lowest masking probability.

    Returns the new state and the restored position, or ``(unchanged, None)``
    when nothing is masked.  Ties break toward the lowest index.  The caller
    owns the pair-time bookkeeping; the returned state keeps the input time.
    """
    masked = np.flatnonzero(x_t.masked())
    if masked.size == 0:
        return x_t.copy(), None
    pos = int(masked[np.argmin(probs[masked])])
    items = x_t.items.copy()
    items[pos] = x0.items[pos]
    return DiffusionState(items=items, t=x_t.t), pos


def pair_pseudo_euler(
    x_t: DiffusionState, x0: UserSequence, t_n: float, dt: float,
    sched: NoiseSchedule, deviations: np.ndarray, rng: np.random.Generator,
) -> DiffusionState:
    """Probabilistically unmask items over a reverse interval of length ``dt``.

    A masked position with cumulative level ``B`` stays masked with
    probability ``B * (1 - dt/T)`` and is otherwise restored to its source
    item; unmasked positions are left unchanged.  The returned state is tagged
    with ``max(t_n - dt, epsilon)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    items = x_t.items.copy()
    masked = np.flatnonzero(x_t.masked())
    if masked.size:
        level = np.asarray(cumulative_beta(t_n, deviations[masked], sched))
        stay = level * (1.0 - dt / sched.horizon)
        restore = rng.random(masked.size) >= stay
        items[masked[restore]] = x0.items[masked[restore]]
    return DiffusionState(items=items, t=max(t_n - dt, sched.epsilon))
