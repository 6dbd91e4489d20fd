"""Full-ranking evaluation: Recall@K, NDCG@K, and reference scorers."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .corpus import InteractionLog
from .denoiser import ConsistencyDenoiser
from .sampler import SamplingPlan, item_scores, rank_items, sample
from .schedule import NoiseSchedule


def recall_at_k(ranked: Iterable[int], relevant: set[int], k: int) -> float:
    """Fraction of the relevant set retrieved in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    top = list(ranked)[:k]
    return len(set(top) & relevant) / len(relevant)


def ndcg_at_k(ranked: Iterable[int], relevant: set[int], k: int) -> float:
    """Rank-discounted gain over the ideal ranking of the relevant set."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    top = list(ranked)[:k]
    dcg = sum(1.0 / math.log2(rank + 2) for rank, item in enumerate(top) if item in relevant)
    ideal = sum(1.0 / math.log2(rank + 2) for rank in range(min(k, len(relevant))))
    return dcg / ideal


@dataclass
class MetricsReport:
    """Ranking metrics averaged over evaluated users (and optionally seeds)."""

    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users_evaluated: int
    seeds: list[int] = field(default_factory=lambda: [0])
    mean_over_runs: bool = False

    def to_dict(self) -> dict:
        return {
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "n_users_evaluated": self.n_users_evaluated,
            "seeds": list(self.seeds),
            "mean_over_runs": self.mean_over_runs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def relevance_sets(eval_log: InteractionLog) -> dict[int, set[int]]:
    """Per-user relevant items of an evaluation split; empty users omitted."""
    relevant: dict[int, set[int]] = {}
    for user, item in zip(eval_log.users, eval_log.items):
        relevant.setdefault(int(user), set()).add(int(item))
    return relevant


def most_popular_scores(train: InteractionLog) -> np.ndarray:
    """Reference scorer: rank items by training interaction count."""
    return train.item_counts().astype(np.float64)


def evaluate_scorer(
    score_fn: Callable[[int], np.ndarray],
    eval_log: InteractionLog,
    exclusions: Mapping[int, set[int]],
    ks: tuple[int, ...] = (5, 10),
) -> MetricsReport:
    """Evaluate any user->scores function under the full-ranking protocol.

    Every user with at least one relevant item is scored over the whole
    catalogue minus their exclusion set; users without relevant items are
    skipped.  Aggregation order is fixed (users ascending), so results do not
    depend on scheduling.
    """
    if not ks:
        raise ValueError("at least one cutoff is required")
    relevant = relevance_sets(eval_log)
    max_k = max(ks)
    recall_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    n_users = 0
    for user in sorted(relevant):
        scores = score_fn(user)
        ranked, _ = rank_items(scores, max_k, exclusions.get(user, set()))
        for k in ks:
            recall_sums[k] += recall_at_k(ranked, relevant[user], k)
            ndcg_sums[k] += ndcg_at_k(ranked, relevant[user], k)
        n_users += 1
    if n_users == 0:
        return MetricsReport(
            recall={k: 0.0 for k in ks}, ndcg={k: 0.0 for k in ks}, n_users_evaluated=0
        )
    return MetricsReport(
        recall={k: recall_sums[k] / n_users for k in ks},
        ndcg={k: ndcg_sums[k] / n_users for k in ks},
        n_users_evaluated=n_users,
    )


def generative_scorer(
    model: ConsistencyDenoiser,
    plan: SamplingPlan,
    sched: NoiseSchedule,
    deviation_maps: Mapping[int, Mapping[int, float]],
    seed: int = 0,
    metric: str = "cosine",
) -> Callable[[int], np.ndarray]:
    """User->scores function backed by sampling the diffusion model.

    Per-user generators are derived from ``(seed, user)`` so users can be
    evaluated in any order, or in parallel, without changing the result.
    """

    def score(user: int) -> np.ndarray:
        rng = np.random.default_rng([seed, user])
        generated = sample(
            model, user, plan, sched,
            deviation_map=deviation_maps.get(user, {}), rng=rng,
        )
        return item_scores(model, user, generated, metric=metric)

    return score


def evaluate_model(
    model: ConsistencyDenoiser,
    eval_log: InteractionLog,
    train_log: InteractionLog,
    plan: SamplingPlan,
    sched: NoiseSchedule,
    deviation_maps: Mapping[int, Mapping[int, float]],
    ks: tuple[int, ...] = (5, 10),
    seeds: tuple[int, ...] = (0,),
    metric: str = "cosine",
    exclude_validation: InteractionLog | None = None,
) -> MetricsReport:
    """Sample-and-rank evaluation of the diffusion model on a held-out split.

    Training items are always excluded from the candidate set; pass the
    validation split via ``exclude_validation`` to remove it as well.  With
    several seeds, metrics are averaged over independent sampling runs.
    """
    exclusions = {u: set(s) for u, s in enumerate(train_log.user_item_sets())}
    if exclude_validation is not None:
        for user, item in zip(exclude_validation.users, exclude_validation.items):
            exclusions.setdefault(int(user), set()).add(int(item))
    reports = [
        evaluate_scorer(
            generative_scorer(model, plan, sched, deviation_maps, seed=s, metric=metric),
            eval_log,
            exclusions,
            ks,
        )
        for s in seeds
    ]
    if len(reports) == 1:
        report = reports[0]
        report.seeds = list(seeds)
        return report
    return MetricsReport(
        recall={k: float(np.mean([r.recall[k] for r in reports])) for k in ks},
        ndcg={k: float(np.mean([r.ndcg[k] for r in reports])) for k in ks},
        n_users_evaluated=reports[0].n_users_evaluated,
        seeds=list(seeds),
        mean_over_runs=True,
    )
