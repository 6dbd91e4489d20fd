"""Command-line interface: prepare, embed, train, recommend, eval, sweep, trace.

Every flag mirrors a :class:`~maskdiffrec.config.RunConfig` key; a JSON config
file supplies defaults and flags override it.  Relative data paths resolve
against the ``MASKDIFFREC_DATA`` environment variable when set.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment
from .collab import save_embeddings
from .config import RunConfig
from .corpus import build_sequences, load_interactions, popularity, popularity_deviation
from .denoiser import load_checkpoint
from .sampler import rank_items, sample, item_scores, trace_forward, write_trace_csv
from .training import build_training_data

logger = logging.getLogger(__name__)

_SENTINEL = object()


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


def _parse_ks(value: str) -> tuple[int, ...]:
    return tuple(int(part) for part in value.split(",") if part.strip())


def _flag_type(field: dataclasses.Field):
    if field.name == "eval_ks":
        return _parse_ks
    if field.type in ("bool",):
        return _parse_bool
    if field.type in ("int",):
        return int
    if field.type in ("float", "float | None"):
        return float
    return str


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="JSON config file")
    for field in dataclasses.fields(RunConfig):
        parser.add_argument(
            f"--{field.name.replace('_', '-')}",
            dest=field.name,
            type=_flag_type(field),
            default=_SENTINEL,
            help=f"override RunConfig.{field.name}",
        )


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(RunConfig)
        if getattr(args, f.name, _SENTINEL) is not _SENTINEL
    }
    return cfg.updated(**overrides)


def _cmd_prepare(args) -> int:
    cfg = _resolve_config(args)
    split = experiment.prepare_splits(cfg)
    stats = experiment.write_splits(split, cfg.out_dir)
    print(json.dumps(stats, sort_keys=True))
    return 0


def _cmd_embed(args) -> int:
    cfg = _resolve_config(args)
    train_log = load_interactions(cfg.resolve_data_path(), cfg.threshold)
    bundle = experiment.build_embeddings(cfg, train_log)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(bundle, out)
    print(f"wrote {bundle.source} embeddings ({bundle.n_users}x{bundle.dim}, "
          f"{bundle.n_items}x{bundle.dim}) to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    summary = experiment.run_experiment(cfg, out_dir=cfg.out_dir)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_recommend(args) -> int:
    cfg = _resolve_config(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    split = experiment.prepare_splits(cfg)
    data = build_training_data(split.train, model.seq_len)
    users = [int(u) for u in args.users] if args.users else sorted(data.deviation_maps)
    sched = cfg.schedule()
    plan = cfg.plan()
    out = Path(args.out) if args.out else None
    handle = out.open("w", encoding="utf-8") if out else sys.stdout
    try:
        for user in users:
            rng = np.random.default_rng([cfg.seed, user])
            generated = sample(model, user, plan, sched, data.deviation_maps.get(user, {}), rng)
            scores = item_scores(model, user, generated, metric=cfg.score_metric)
            items, top = rank_items(scores, args.k, data.interacted.get(user, set()))
            handle.write(json.dumps({
                "user": user,
                "items": [int(i) for i in items],
                "scores": [float(s) for s in top],
            }) + "\n")
    finally:
        if out:
            handle.close()
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    log = load_interactions(cfg.resolve_data_path(), cfg.threshold)
    split = experiment.prepare_splits(cfg, log)
    data = build_training_data(split.train, model.seq_len)
    report = experiment.evaluate_split(cfg, model, data, split, on=args.split)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    grid: dict[str, list] = {}
    for spec in args.grid:
        key, _, values = spec.partition("=")
        if not values:
            raise SystemExit(f"grid spec must look like key=v1,v2 (got {spec!r})")
        parsed = []
        for raw in values.split(","):
            try:
                parsed.append(json.loads(raw))
            except json.JSONDecodeError:
                parsed.append(raw)
        grid[key] = parsed
    rows = experiment.run_sweep(cfg, grid, args.out)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def _cmd_trace(args) -> int:
    cfg = _resolve_config(args)
    train_log = experiment.prepare_splits(cfg).train
    sequences = {s.user_id: s for s in build_sequences(train_log, cfg.seq_len)}
    if args.user not in sequences:
        raise SystemExit(f"user {args.user} has no training sequence")
    seq = sequences[args.user]
    deviations = popularity_deviation(seq, popularity(train_log))
    rows = trace_forward(seq, deviations, cfg.schedule(), args.steps,
                         np.random.default_rng(cfg.seed))
    write_trace_csv(rows, args.out)
    print(f"wrote {len(rows)} trace rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskdiffrec",
        description="Continuous-time masked-diffusion recommender",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest a ratings file and write 8:1:1 splits")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("embed", help="load or train collaborative embeddings")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="embedding file to write")
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("train", help="run the full training pipeline")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("recommend", help="write top-k recommendations as JSON lines")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--users", nargs="*", default=None)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_recommend)

    p = sub.add_parser("eval", help="evaluate a checkpoint under full ranking")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "validation"), default="test")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="grid sweep over config keys")
    _add_config_flags(p)
    p.add_argument("--grid", nargs="+", required=True, metavar="KEY=V1,V2")
    p.add_argument("--out", required=True, help="CSV table to write")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("trace", help="export one forward-corruption trajectory as CSV")
    _add_config_flags(p)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
