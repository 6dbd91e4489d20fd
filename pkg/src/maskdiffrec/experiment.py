"""End-to-end orchestration: prepare, embed, train, evaluate, sweep, time."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .collab import EmbeddingBundle, load_embeddings, train_fallback_mf
from .config import RunConfig
from .corpus import (
    InteractionLog,
    SplitBundle,
    load_interactions,
    split_chronological,
    write_interactions,
    write_split_stats,
)
from .denoiser import ConsistencyDenoiser, save_checkpoint
from .metrics import MetricsReport, evaluate_model, evaluate_scorer, most_popular_scores
from .sampler import SamplingPlan, sample
from .schedule import NoiseSchedule
from .training import TrainResult, TrainingData, build_training_data, train

logger = logging.getLogger(__name__)


def prepare_splits(cfg: RunConfig, log: InteractionLog | None = None) -> SplitBundle:
    if log is None:
        log = load_interactions(cfg.resolve_data_path(), cfg.threshold)
    return split_chronological(log, cfg.ratios)


def write_splits(bundle: SplitBundle, out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_interactions(bundle.train, out_dir / "train.txt")
    write_interactions(bundle.validation, out_dir / "validation.txt")
    write_interactions(bundle.test, out_dir / "test.txt")
    write_split_stats(bundle, out_dir / "stats.json")
    return bundle.stats()


def build_embeddings(cfg: RunConfig, train_log: InteractionLog) -> EmbeddingBundle:
    """Load pre-trained factors when configured, otherwise fit the fallback."""
    if cfg.embeddings_path:
        return load_embeddings(
            cfg.embeddings_path,
            expected_users=train_log.n_users,
            expected_items=train_log.n_items,
        )
    return train_fallback_mf(
        train_log,
        dim=cfg.dim,
        epochs=cfg.mf_epochs,
        rng=np.random.default_rng(cfg.seed),
        learning_rate=cfg.mf_lr,
    )


def build_model(
    cfg: RunConfig, n_users: int, n_items: int, bundle: EmbeddingBundle | None = None
) -> ConsistencyDenoiser:
    torch.manual_seed(cfg.seed)
    model = ConsistencyDenoiser(
        n_users=n_users,
        n_items=n_items,
        seq_len=cfg.seq_len,
        horizon=cfg.horizon,
        dim=cfg.dim,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        proj_temperature=cfg.proj_temperature,
        boundary_time=cfg.boundary_time,
    )
    if bundle is not None:
        model.load_collab(bundle)
    return model


def fit(
    cfg: RunConfig,
    split: SplitBundle,
    bundle: EmbeddingBundle | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[TrainResult, TrainingData]:
    data = build_training_data(split.train, cfg.seq_len)
    model = build_model(cfg, split.train.n_users, split.train.n_items, bundle)
    validation = split.validation if cfg.eval_every > 0 else None
    result = train(
        model,
        data,
        cfg.schedule(),
        cfg.train_config(),
        validation_log=validation,
        log_path=log_path,
        checkpoint_dir=checkpoint_dir,
    )
    return result, data


def evaluate_split(
    cfg: RunConfig,
    model: ConsistencyDenoiser,
    data: TrainingData,
    split: SplitBundle,
    on: str = "test",
    n_steps: int | None = None,
) -> MetricsReport:
    eval_log = split.test if on == "test" else split.validation
    seeds = tuple(cfg.seed + i for i in range(cfg.n_runs))
    return evaluate_model(
        model,
        eval_log,
        split.train,
        cfg.plan(n_steps),
        cfg.schedule(),
        data.deviation_maps,
        ks=cfg.eval_ks,
        seeds=seeds,
        metric=cfg.score_metric,
        exclude_validation=split.validation if cfg.exclude_validation else None,
    )


def evaluate_most_popular(
    cfg: RunConfig, split: SplitBundle, on: str = "test"
) -> MetricsReport:
    """Reference ranking by training popularity, same protocol and exclusions."""
    eval_log = split.test if on == "test" else split.validation
    scores = most_popular_scores(split.train)
    exclusions = {u: s for u, s in enumerate(split.train.user_item_sets())}
    if cfg.exclude_validation:
        for user, item in zip(split.validation.users, split.validation.items):
            exclusions.setdefault(int(user), set()).add(int(item))
    return evaluate_scorer(lambda user: scores, eval_log, exclusions, ks=cfg.eval_ks)


def run_experiment(
    cfg: RunConfig,
    log: InteractionLog | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Full prepare/embed/train/evaluate pipeline; deterministic per config.

    Returns a summary with the final test metrics, the popularity baseline
    under the same protocol, and per-phase wall times.  When ``out_dir`` is
    given, the config, training log, checkpoint, and metrics are written
    there.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(
            json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
        )
    timings: dict[str, float] = {}
    tic = time.perf_counter()
    split = prepare_splits(cfg, log)
    timings["prepare_seconds"] = time.perf_counter() - tic

    tic = time.perf_counter()
    bundle = build_embeddings(cfg, split.train)
    timings["embed_seconds"] = time.perf_counter() - tic

    tic = time.perf_counter()
    result, data = fit(
        cfg,
        split,
        bundle,
        log_path=out_dir / "train_log.jsonl" if out_dir else None,
        checkpoint_dir=out_dir / "checkpoints" if out_dir else None,
    )
    timings["train_seconds"] = time.perf_counter() - tic

    tic = time.perf_counter()
    report = evaluate_split(cfg, result.model, data, split, on="test")
    timings["eval_seconds"] = time.perf_counter() - tic
    baseline = evaluate_most_popular(cfg, split, on="test")

    summary = {
        "split": split.stats(),
        "metrics": report.to_dict(),
        "most_popular": baseline.to_dict(),
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "timings": timings,
    }
    if out_dir:
        save_checkpoint(
            out_dir / "model.pt", result.model, result.ema_model, config=cfg.to_dict()
        )
        (out_dir / "metrics.json").write_text(report.to_json())
        (out_dir / "most_popular.json").write_text(baseline.to_json())
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def run_sweep(
    cfg: RunConfig,
    grid: dict[str, list],
    out_path: str | Path,
    log: InteractionLog | None = None,
) -> list[dict]:
    """Train/evaluate once per grid point and write a CSV table.

    Individual failures are recorded in the table's ``error`` column and the
    sweep continues.
    """
    if not grid:
        raise ValueError("sweep grid must be non-empty")
    keys = sorted(grid)
    rows: list[dict] = []
    for combo in itertools.product(*(grid[key] for key in keys)):
        point = dict(zip(keys, combo))
        row: dict = dict(point)
        try:
            summary = run_experiment(cfg.updated(**point), log=log)
            for k, v in summary["metrics"]["recall"].items():
                row[f"recall@{k}"] = v
            for k, v in summary["metrics"]["ndcg"].items():
                row[f"ndcg@{k}"] = v
            row["train_seconds"] = summary["timings"]["train_seconds"]
            row["eval_seconds"] = summary["timings"]["eval_seconds"]
            row["error"] = ""
        except Exception as exc:  # noqa: BLE001 - sweep must survive point failures
            logger.exception("sweep point %s failed", point)
            row["error"] = str(exc)
        rows.append(row)
    fieldnames = sorted({key for row in rows for key in row})
    with Path(out_path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def sampling_time_table(
    model: ConsistencyDenoiser,
    sched: NoiseSchedule,
    deviation_map: dict[int, float],
    user_id: int,
    steps_list: tuple[int, ...] = (1, 3, 10, 30),
    repeats: int = 3,
    seed: int = 0,
) -> list[dict]:
    """Wall time and denoiser-call count per sampling-step setting.

    Each measurement is the best of ``repeats`` timed runs after a warmup
    call, which keeps the table stable enough to check the linear-growth
    shape of multistep generation.
    """
    rows = []
    for n_steps in steps_list:
        plan = SamplingPlan(n_steps=n_steps, horizon=sched.horizon)
        sample(model, user_id, plan, sched, deviation_map, np.random.default_rng(seed))
        best = np.inf
        calls = 0
        for rep in range(repeats):
            before = model.apply_count
            tic = time.perf_counter()
            sample(
                model, user_id, plan, sched, deviation_map,
                np.random.default_rng([seed, rep]),
            )
            best = min(best, time.perf_counter() - tic)
            calls = model.apply_count - before
        rows.append({"n_steps": n_steps, "seconds": best, "denoiser_calls": calls})
    return rows
