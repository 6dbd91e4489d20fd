"""Losses, EMA target maintenance, and the joint optimization loop.

Every batch draws a corruption time per user, corrupts the clean sequence
through the forward kernel, builds a slightly-less-noisy partner state by
probabilistic or single-item recovery, and optimizes a weighted sum of a
self-distillation term against the EMA shadow, a denoising cross-entropy
against the clean sequence, and a contrastive term tying the aggregated
generated items to the user's collaborative embedding.
"""
from __future__ import annotations

import copy
import json
import logging
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import InteractionLog, UserSequence, build_sequences, popularity, popularity_deviation
from .denoiser import ConsistencyDenoiser, save_checkpoint
from .metrics import evaluate_scorer, generative_scorer
from .sampler import SamplingPlan
from .schedule import (
    NoiseSchedule,
    forward_sample,
    pair_one_step_recovery,
    pair_pseudo_euler,
    position_mask_probabilities,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

ONE_STEP = "one_step"
PSEUDO_EULER = "pseudo_euler"


class TrainingDiverged(RuntimeError):
    """Raised when a batch produces a non-finite loss; carries diagnostics."""

    def __init__(self, message: str, details: dict):
        super().__init__(message)
        self.details = details


@dataclass
class TrainConfig:
    """Hyperparameters of the joint optimization."""

    lambda1: float = 0.4
    lambda2: float = 0.01
    mu_ema: float = 0.99
    tau_cl: float = 0.2
    n_negatives: int = 16
    pair_method: str = PSEUDO_EULER
    dt: float = 10.0
    learning_rate: float = 1e-3
    batch_size: int = 1024
    epochs: int = 200
    seed: int = 0
    eval_every: int = 0
    patience: int = 10
    val_sample_steps: int = 1
    checkpoint_every: int = 0
    gamma: Callable[[float], float] | None = None

    def __post_init__(self):
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError("lambda1 must lie in [0, 1]")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be non-negative")
        if not 0.0 <= self.mu_ema <= 1.0:
            raise ValueError("mu_ema must lie in [0, 1]")
        if self.tau_cl <= 0:
            raise ValueError("tau_cl must be positive")
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")
        if self.pair_method not in (ONE_STEP, PSEUDO_EULER):
            raise ValueError(f"pair_method must be '{ONE_STEP}' or '{PSEUDO_EULER}'")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class LossBreakdown:
    con: float
    diff: float
    cl: float
    total: float


def joint_loss(con: float, diff: float, cl: float, cfg: TrainConfig) -> LossBreakdown:
    """Combine the three components with the configured weights."""
    con, diff, cl = float(con), float(diff), float(cl)
    total = cfg.lambda1 * con + (1.0 - cfg.lambda1) * diff + cfg.lambda2 * cl
    return LossBreakdown(con=con, diff=diff, cl=cl, total=total)


def _batched(probs: torch.Tensor) -> torch.Tensor:
    return probs.unsqueeze(0) if probs.dim() == 2 else probs


def _live_mask(shape, pad_mask, device) -> torch.Tensor:
    if pad_mask is None:
        return torch.ones(shape, dtype=torch.bool, device=device)
    pad = torch.as_tensor(np.asarray(pad_mask), dtype=torch.bool, device=device)
    if pad.dim() == 1:
        pad = pad.unsqueeze(0)
    return ~pad


def consistency_loss(out_t, out_prev, pad_mask=None, gamma=1.0) -> torch.Tensor:
    """KL(gradient-blocked target || learner), averaged over live positions.

    ``out_prev`` is produced by the EMA parameters on the recovered pair
    state; it is detached here so no gradient ever reaches the target.
    ``gamma`` is the time weight, scalar or one value per sequence.
    """
    learner = _batched(out_t)
    target = _batched(out_prev).detach()
    log_t = torch.log(target.clamp_min(PROB_FLOOR))
    log_l = torch.log(learner.clamp_min(PROB_FLOOR))
    kl = (target * (log_t - log_l)).sum(dim=-1)
    live = _live_mask(kl.shape, pad_mask, kl.device)
    per_seq = (kl * live).sum(dim=1) / live.sum(dim=1).clamp_min(1)
    weight = torch.as_tensor(gamma, dtype=per_seq.dtype, device=per_seq.device)
    return (weight * per_seq).mean()


def diffusion_loss(out_t, target_items, pad_mask=None) -> torch.Tensor:
    """Cross-entropy of the clean items under the predicted distributions.

    Every live position contributes, masked in the input or not; the result
    is the per-position mean so the weight against other losses does not
    scale with the sequence length.
    """
    probs = _batched(out_t)
    targets = torch.as_tensor(np.asarray(target_items), dtype=torch.long, device=probs.device)
    if targets.dim() == 1:
        targets = targets.unsqueeze(0)
    live = _live_mask(targets.shape, pad_mask, probs.device)
    safe = targets.clamp_min(0)
    picked = probs.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    nll = -torch.log(picked.clamp_min(PROB_FLOOR))
    per_seq = (nll * live).sum(dim=1) / live.sum(dim=1).clamp_min(1)
    return per_seq.mean()


def contrastive_loss(generated_items, users, model: ConsistencyDenoiser, negatives, tau: float) -> torch.Tensor:
    """InfoNCE pulling the aggregated generated items toward the user embedding.

    The anchor is the mean item embedding of the generated sequence (one hop
    of neighborhood aggregation); the positive is the user's embedding, the
    negatives are sampled non-interacted items.  Users with an empty
    generated set contribute 0 with a warning.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    generated = torch.as_tensor(np.asarray(generated_items), dtype=torch.long)
    if generated.dim() == 1:
        generated = generated.unsqueeze(0)
    users = torch.as_tensor(np.asarray(users), dtype=torch.long).reshape(-1)
    negatives = torch.as_tensor(np.asarray(negatives), dtype=torch.long)
    if negatives.dim() == 1:
        negatives = negatives.unsqueeze(0)
    valid = generated >= 0
    counts = valid.sum(dim=1)
    item_vecs = model.item_table[generated.clamp_min(0)] * valid.unsqueeze(-1)
    anchors = item_vecs.sum(dim=1) / counts.clamp_min(1).unsqueeze(-1)
    pos_sim = F.cosine_similarity(anchors, model.user_table[users], dim=-1)
    neg_sim = F.cosine_similarity(
        anchors.unsqueeze(1), model.item_table[negatives], dim=-1
    )
    logits = torch.cat([pos_sim.unsqueeze(1), neg_sim], dim=1) / tau
    per_user = torch.logsumexp(logits, dim=1) - logits[:, 0]
    has_items = counts > 0
    if not bool(has_items.all()):
        warnings.warn("empty generated set for some users; they contribute 0")
        per_user = per_user * has_items
    return per_user.mean()


def ema_update(ema_model: ConsistencyDenoiser, model: ConsistencyDenoiser, mu: float) -> None:
    """In-place shadow update ``theta_minus <- mu*theta_minus + (1-mu)*theta``."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    with torch.no_grad():
        for shadow, online in zip(ema_model.parameters(), model.parameters()):
            shadow.mul_(mu).add_(online, alpha=1.0 - mu)


@dataclass
class TrainingData:
    """Static per-user artifacts derived from the training split."""

    sequences: list[UserSequence]
    deviations: np.ndarray
    deviation_maps: dict[int, dict[int, float]]
    interacted: dict[int, set[int]]
    n_items: int
    seq_len: int


def build_training_data(train_log: InteractionLog, seq_len: int) -> TrainingData:
    sequences = build_sequences(train_log, seq_len)
    table = popularity(train_log)
    deviations = np.stack([popularity_deviation(seq, table) for seq in sequences])
    deviation_maps = {}
    for seq, dev in zip(sequences, deviations):
        live = ~seq.pad_mask
        deviation_maps[seq.user_id] = {
            int(v): float(d) for v, d in zip(seq.items[live], dev[live])
        }
    interacted = {u: s for u, s in enumerate(train_log.user_item_sets()) if s}
    return TrainingData(
        sequences=sequences,
        deviations=deviations,
        deviation_maps=deviation_maps,
        interacted=interacted,
        n_items=train_log.n_items,
        seq_len=seq_len,
    )


@dataclass
class EpochStats:
    epoch: int
    con: float
    diff: float
    cl: float
    total: float
    wall_seconds: float
    val_recall10: float | None = None
    val_ndcg10: float | None = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "con": self.con,
            "diff": self.diff,
            "cl": self.cl,
            "total": self.total,
            "val_recall10": self.val_recall10,
            "val_ndcg10": self.val_ndcg10,
            "wall_seconds": self.wall_seconds,
        }


@dataclass
class TrainResult:
    model: ConsistencyDenoiser
    ema_model: ConsistencyDenoiser
    history: list[EpochStats]
    best_epoch: int | None = None
    best_val_recall: float | None = None


def draw_times(rng: np.random.Generator, count: int, sched: NoiseSchedule) -> np.ndarray:
    """Corruption times uniform on the half-open interval (epsilon, horizon]."""
    return sched.horizon - rng.random(count) * (sched.horizon - sched.epsilon)


def _sample_negatives(
    user_ids, interacted, n_items, count, rng: np.random.Generator, max_tries: int = 50
) -> np.ndarray:
    negatives = rng.integers(0, n_items, size=(len(user_ids), count))
    for row, user in enumerate(user_ids):
        seen = interacted.get(int(user), set())
        if len(seen) >= n_items:
            continue
        for col in range(count):
            tries = 0
            while negatives[row, col] in seen and tries < max_tries:
                negatives[row, col] = rng.integers(0, n_items)
                tries += 1
    return negatives


def _train_batch(
    model, ema_model, optimizer, data, sched, cfg, indices, t_n, rng
) -> LossBreakdown:
    batch = len(indices)
    t_prev = np.maximum(t_n - cfg.dt, sched.epsilon)
    xt_rows, xprev_rows, x0_rows, pad_rows, user_rows = [], [], [], [], []
    for j, i in enumerate(indices):
        seq = data.sequences[i]
        dev = data.deviations[i]
        state = forward_sample(seq, t_n[j], dev, sched, rng)
        if cfg.pair_method == ONE_STEP:
            probs = position_mask_probabilities(seq, t_n[j], dev, sched)
            prev, _ = pair_one_step_recovery(state, seq, probs)
        else:
            prev = pair_pseudo_euler(state, seq, t_n[j], cfg.dt, sched, dev, rng)
        xt_rows.append(state.items)
        xprev_rows.append(prev.items)
        x0_rows.append(seq.items)
        pad_rows.append(seq.pad_mask)
        user_rows.append(seq.user_id)
    xt = torch.as_tensor(np.stack(xt_rows), dtype=torch.long)
    xprev = torch.as_tensor(np.stack(xprev_rows), dtype=torch.long)
    x0 = np.stack(x0_rows)
    pad = np.stack(pad_rows)
    users = torch.as_tensor(np.asarray(user_rows), dtype=torch.long)

    probs_t, decode_t = model.apply(xt, users, torch.as_tensor(t_n))
    with torch.no_grad():
        probs_prev, _ = ema_model.apply(xprev, users, torch.as_tensor(t_prev))
    gamma = 1.0 if cfg.gamma is None else np.asarray([cfg.gamma(t) for t in t_n])
    con_t = consistency_loss(probs_t, probs_prev, pad, gamma)
    diff_t = diffusion_loss(probs_t, x0, pad)
    negatives = _sample_negatives(user_rows, data.interacted, data.n_items, cfg.n_negatives, rng)
    decode_for_cl = decode_t.clone()
    decode_for_cl[torch.as_tensor(pad)] = -1  # pads never feed the aggregate
    cl_t = contrastive_loss(decode_for_cl, users, model, negatives, cfg.tau_cl)
    total_t = cfg.lambda1 * con_t + (1.0 - cfg.lambda1) * diff_t + cfg.lambda2 * cl_t

    if not bool(torch.isfinite(total_t)):
        details = {
            "users": [int(u) for u in user_rows],
            "t_n": [float(t) for t in t_n],
            "con": con_t.detach().item(),
            "diff": diff_t.detach().item(),
            "cl": cl_t.detach().item(),
        }
        logger.error("non-finite loss; offending batch: %s", details)
        raise TrainingDiverged("non-finite training loss", details)

    optimizer.zero_grad()
    total_t.backward()
    optimizer.step()
    ema_update(ema_model, model, cfg.mu_ema)
    return joint_loss(con_t.detach().item(), diff_t.detach().item(), cl_t.detach().item(), cfg)


def train(
    model: ConsistencyDenoiser,
    data: TrainingData,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    validation_log: InteractionLog | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Run the joint optimization loop; deterministic for a fixed seed.

    When a validation log is given and ``cfg.eval_every > 0``, Recall@10 on
    single-pass generation is tracked and training stops early once it fails
    to improve for ``cfg.patience`` consecutive evaluations.  One JSON line
    per epoch is appended to ``log_path`` when given.
    """
    rng = np.random.default_rng(cfg.seed)
    ema_model = copy.deepcopy(model)
    ema_model.requires_grad_(False)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    n_seq = len(data.sequences)
    if n_seq == 0:
        raise ValueError("no training sequences")
    history: list[EpochStats] = []
    best_recall = -np.inf
    best_epoch: int | None = None
    stale = 0
    log_handle = Path(log_path).open("a", encoding="utf-8") if log_path else None
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if checkpoint_dir:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    try:
        for epoch in range(1, cfg.epochs + 1):
            tic = time.perf_counter()
            order = rng.permutation(n_seq)
            sums = np.zeros(4)
            seen = 0
            for start in range(0, n_seq, cfg.batch_size):
                indices = order[start:start + cfg.batch_size]
                t_n = draw_times(rng, len(indices), sched)
                breakdown = _train_batch(
                    model, ema_model, optimizer, data, sched, cfg, indices, t_n, rng
                )
                weight = len(indices)
                sums += weight * np.array(
                    [breakdown.con, breakdown.diff, breakdown.cl, breakdown.total]
                )
                seen += weight
            stats = EpochStats(
                epoch=epoch,
                con=float(sums[0] / seen),
                diff=float(sums[1] / seen),
                cl=float(sums[2] / seen),
                total=float(sums[3] / seen),
                wall_seconds=time.perf_counter() - tic,
            )
            evaluate_now = (
                validation_log is not None
                and len(validation_log) > 0
                and cfg.eval_every > 0
                and epoch % cfg.eval_every == 0
            )
            if evaluate_now:
                plan = SamplingPlan(n_steps=cfg.val_sample_steps, horizon=sched.horizon)
                scorer = generative_scorer(
                    model, plan, sched, data.deviation_maps, seed=cfg.seed
                )
                report = evaluate_scorer(
                    scorer, validation_log, data.interacted, ks=(10,)
                )
                stats.val_recall10 = report.recall[10]
                stats.val_ndcg10 = report.ndcg[10]
                if report.recall[10] > best_recall:
                    best_recall = report.recall[10]
                    best_epoch = epoch
                    stale = 0
                    if checkpoint_dir:
                        save_checkpoint(checkpoint_dir / "best.pt", model, ema_model)
                else:
                    stale += 1
            history.append(stats)
            if log_handle:
                log_handle.write(json.dumps(stats.to_dict()) + "\n")
                log_handle.flush()
            if checkpoint_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_dir / f"epoch_{epoch}.pt", model, ema_model)
            if evaluate_now and stale >= cfg.patience:
                logger.info("early stop at epoch %d (stale evaluations: %d)", epoch, stale)
                break
    finally:
        if log_handle:
            log_handle.close()
    return TrainResult(
        model=model,
        ema_model=ema_model,
        history=history,
        best_epoch=best_epoch,
        best_val_recall=None if best_recall == -np.inf else float(best_recall),
    )
