"""Scikit-learn style facade over the full pipeline.

``DiffusionRecommender`` keeps every hyperparameter in its constructor (so
``get_params``/``set_params``/``clone`` work as usual), learns its state in
``fit`` from raw interaction events, and exposes ``predict``/``recommend``
for top-k retrieval.  Raw user/item ids are re-indexed internally and mapped
back on output.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .collab import train_fallback_mf
from .corpus import InteractionLog
from .denoiser import ConsistencyDenoiser
from .sampler import Recommendation, SamplingPlan, item_scores, rank_items, sample
from .schedule import NoiseSchedule
from .training import TrainConfig, build_training_data, train


class DiffusionRecommender(BaseEstimator):
    """Masked-diffusion sequential recommender with a fit/predict interface."""

    def __init__(
        self,
        seq_len: int = 20,
        dim: int = 64,
        n_layers: int = 2,
        n_heads: int = 2,
        horizon: float = 60.0,
        omega: float = 0.5,
        sigma: float | None = None,
        schedule_mode: str = "direct",
        boundary_time: float = 0.0,
        proj_temperature: float = 0.1,
        lambda1: float = 0.4,
        lambda2: float = 0.01,
        mu_ema: float = 0.99,
        tau_cl: float = 0.2,
        n_negatives: int = 16,
        pair_method: str = "pseudo_euler",
        dt: float = 10.0,
        learning_rate: float = 1e-3,
        batch_size: int = 1024,
        epochs: int = 100,
        mf_epochs: int = 30,
        mf_lr: float = 0.01,
        sample_steps: int = 1,
        k: int = 10,
        score_metric: str = "cosine",
        exclude_seen: bool = True,
        threshold: float | None = None,
        seed: int = 0,
    ):
        self.seq_len = seq_len
        self.dim = dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.horizon = horizon
        self.omega = omega
        self.sigma = sigma
        self.schedule_mode = schedule_mode
        self.boundary_time = boundary_time
        self.proj_temperature = proj_temperature
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.mu_ema = mu_ema
        self.tau_cl = tau_cl
        self.n_negatives = n_negatives
        self.pair_method = pair_method
        self.dt = dt
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.mf_epochs = mf_epochs
        self.mf_lr = mf_lr
        self.sample_steps = sample_steps
        self.k = k
        self.score_metric = score_metric
        self.exclude_seen = exclude_seen
        self.threshold = threshold
        self.seed = seed

    # ------------------------------------------------------------------

    def _validate_events(self, X) -> InteractionLog:
        if isinstance(X, InteractionLog):
            self.user_ids_ = np.arange(X.n_users)
            self.item_ids_ = np.arange(X.n_items)
            return X
        events = np.asarray(X, dtype=np.float64)
        if events.ndim != 2 or events.shape[1] != 4:
            raise ValueError(
                "X must be an InteractionLog or an array-like of shape "
                "(n_events, 4): user, item, rating, timestamp"
            )
        if not np.isfinite(events).all():
            raise ValueError("events contain non-finite values")
        if self.threshold is not None:
            events = events[events[:, 2] >= self.threshold]
        if len(events) == 0:
            raise ValueError("no events to fit on")
        raw_users = events[:, 0].astype(np.int64)
        raw_items = events[:, 1].astype(np.int64)
        self.user_ids_, users = np.unique(raw_users, return_inverse=True)
        self.item_ids_, items = np.unique(raw_items, return_inverse=True)
        return InteractionLog(
            users=users,
            items=items,
            ratings=events[:, 2],
            timestamps=events[:, 3].astype(np.int64),
            n_users=len(self.user_ids_),
            n_items=len(self.item_ids_),
        )

    def fit(self, X, y=None):
        """Fit on training interactions.

        ``X`` is either an :class:`InteractionLog` with dense ids or an
        array-like of (user, item, rating, timestamp) rows with arbitrary
        integer ids.
        """
        log = self._validate_events(X)
        self.schedule_ = NoiseSchedule(
            horizon=self.horizon,
            omega=self.omega,
            sigma=self.sigma,
            mode=self.schedule_mode,
            epsilon=self.boundary_time,
        )
        bundle = train_fallback_mf(
            log,
            dim=self.dim,
            epochs=self.mf_epochs,
            rng=np.random.default_rng(self.seed),
            learning_rate=self.mf_lr,
        )
        torch.manual_seed(self.seed)
        model = ConsistencyDenoiser(
            n_users=log.n_users,
            n_items=log.n_items,
            seq_len=self.seq_len,
            horizon=self.horizon,
            dim=self.dim,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            proj_temperature=self.proj_temperature,
            boundary_time=self.boundary_time,
        )
        model.load_collab(bundle)
        self.data_ = build_training_data(log, self.seq_len)
        cfg = TrainConfig(
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
        )
        result = train(model, self.data_, self.schedule_, cfg)
        self.model_ = result.model
        self.ema_model_ = result.ema_model
        self.history_ = result.history
        self.n_users_ = log.n_users
        self.n_items_ = log.n_items
        self.interacted_ = self.data_.interacted
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("fit the recommender before calling predict/recommend")

    def _dense_user(self, user) -> int:
        idx = np.searchsorted(self.user_ids_, user)
        if idx >= len(self.user_ids_) or self.user_ids_[idx] != user:
            raise ValueError(f"unknown user id: {user!r}")
        return int(idx)

    def recommend(self, user, k: int | None = None) -> Recommendation:
        """Top-k recommendation for one (raw) user id."""
        self._check_fitted()
        k = self.k if k is None else k
        dense = self._dense_user(user)
        rng = np.random.default_rng([self.seed, dense])
        plan = SamplingPlan(n_steps=self.sample_steps, horizon=self.horizon)
        generated = sample(
            self.model_, dense, plan, self.schedule_,
            self.data_.deviation_maps.get(dense, {}), rng,
        )
        scores = item_scores(self.model_, dense, generated, metric=self.score_metric)
        exclude = self.interacted_.get(dense, set()) if self.exclude_seen else set()
        items, top_scores = rank_items(scores, k, exclude)
        return Recommendation(
            user_id=user, items=self.item_ids_[items], scores=top_scores
        )

    def predict(self, users) -> np.ndarray:
        """Top-k item ids (raw id space) per user; shape (n_users, k)."""
        self._check_fitted()
        users = np.atleast_1d(np.asarray(users))
        return np.stack([self.recommend(u).items for u in users])
