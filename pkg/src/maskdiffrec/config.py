"""Flat run configuration shared by the CLI, sweeps, and the pipeline.

Every tunable default lives here under a prefixed key; each subsystem reads
only its own slice through the ``schedule()``, ``train_config()`` and
``plan()`` accessors.  Unknown keys in config files or overrides are rejected.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .sampler import SamplingPlan
from .schedule import NoiseSchedule
from .training import TrainConfig

DATA_ROOT_ENV = "MASKDIFFREC_DATA"


@dataclass
class RunConfig:
    # data
    data_path: str | None = None
    out_dir: str = "runs"
    threshold: float = 3.0
    seq_len: int = 20
    ratio_train: int = 8
    ratio_val: int = 1
    ratio_test: int = 1
    # schedule
    horizon: float = 60.0
    omega: float = 0.5
    sigma: float | None = None
    schedule_mode: str = "direct"
    boundary_time: float = 0.0
    # collaborative initialization
    embeddings_path: str | None = None
    mf_epochs: int = 30
    mf_lr: float = 0.01
    # denoiser
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    proj_temperature: float = 0.1
    # training
    lambda1: float = 0.4
    lambda2: float = 0.01
    mu_ema: float = 0.99
    tau_cl: float = 0.2
    n_negatives: int = 16
    pair_method: str = "pseudo_euler"
    dt: float = 10.0
    learning_rate: float = 1e-3
    batch_size: int = 1024
    epochs: int = 200
    seed: int = 0
    eval_every: int = 0
    patience: int = 10
    val_sample_steps: int = 1
    checkpoint_every: int = 0
    # sampling / evaluation
    sample_steps: int = 30
    eval_ks: tuple[int, ...] = (5, 10)
    n_runs: int = 1
    exclude_validation: bool = False
    score_metric: str = "cosine"

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = set(cls.field_names())
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")
        if "eval_ks" in values and values["eval_ks"] is not None:
            values = dict(values)
            values["eval_ks"] = tuple(int(k) for k in values["eval_ks"])
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def updated(self, **overrides) -> "RunConfig":
        merged = self.to_dict()
        known = set(self.field_names())
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")
        merged.update(overrides)
        return RunConfig.from_dict(merged)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["eval_ks"] = list(self.eval_ks)
        return out

    # per-subsystem views -------------------------------------------------

    @property
    def ratios(self) -> tuple[int, int, int]:
        return (self.ratio_train, self.ratio_val, self.ratio_test)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(
            horizon=self.horizon,
            omega=self.omega,
            sigma=self.sigma,
            mode=self.schedule_mode,
            epsilon=self.boundary_time,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            mu_ema=self.mu_ema,
            tau_cl=self.tau_cl,
            n_negatives=self.n_negatives,
            pair_method=self.pair_method,
            dt=self.dt,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            eval_every=self.eval_every,
            patience=self.patience,
            val_sample_steps=self.val_sample_steps,
            checkpoint_every=self.checkpoint_every,
        )

    def plan(self, n_steps: int | None = None) -> SamplingPlan:
        return SamplingPlan(
            n_steps=self.sample_steps if n_steps is None else n_steps,
            horizon=self.horizon,
            seed=self.seed,
        )

    def resolve_data_path(self) -> Path:
        if self.data_path is None:
            raise ValueError("no data path configured")
        path = Path(self.data_path)
        if not path.is_absolute():
            root = os.environ.get(DATA_ROOT_ENV)
            if root:
                path = Path(root) / path
        return path
