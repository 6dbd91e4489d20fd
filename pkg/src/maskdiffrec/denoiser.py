"""Consistency-parameterised sequence denoiser.

A bidirectional Transformer encoder reads a user token followed by the
(partially masked) interaction sequence and emits a categorical distribution
over the item catalogue for every position.  The time embedding is added to
the user slot at the input of every encoder layer.  At or below the boundary
time the function is the identity: the input state is returned unchanged
without touching the network.
"""
from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import MASK, PAD
from .schedule import DiffusionState

CHECKPOINT_VERSION = 1


class ConsistencyDenoiser(nn.Module):
    """Transformer denoiser mapping a corrupted state back to item space.

    The item and user embedding tables may be initialized from pre-trained
    collaborative embeddings (see :meth:`load_collab`) and are trainable
    thereafter.  The forward pass is deterministic: no dropout is used.
    """

    def __init__(
        self,
        n_users: int,
        n_items: int,
        seq_len: int,
        horizon: float = 60.0,
        dim: int = 64,
        n_layers: int = 2,
        n_heads: int = 2,
        proj_temperature: float = 0.1,
        boundary_time: float = 0.0,
    ):
        super().__init__()
        if min(n_users, n_items, seq_len, dim, n_layers, n_heads) < 1:
            raise ValueError("model sizes must be positive")
        if proj_temperature <= 0:
            raise ValueError("projection temperature must be positive")
        if not 0.0 <= boundary_time < horizon:
            raise ValueError("boundary time must lie in [0, horizon)")
        self.n_users = n_users
        self.n_items = n_items
        self.seq_len = seq_len
        self.horizon = float(horizon)
        self.dim = dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.proj_temperature = proj_temperature
        self.boundary_time = boundary_time
        self.apply_count = 0  # number of consistency-function invocations

        self.n_time_bins = int(round(horizon)) + 1
        # rows [0, n_items) hold item embeddings; the last two rows hold the
        # mask and pad embeddings.
        self.token_emb = nn.Embedding(n_items + 2, dim)
        self.user_emb = nn.Embedding(n_users, dim)
        self.pos_emb = nn.Embedding(seq_len, dim)
        self.time_emb = nn.Embedding(self.n_time_bins, dim)
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=dim,
                nhead=n_heads,
                dim_feedforward=4 * dim,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
            )
            for _ in range(n_layers)
        )
        for table in (self.token_emb, self.user_emb, self.pos_emb, self.time_emb):
            nn.init.normal_(table.weight, std=0.02)

    @property
    def hparams(self) -> dict:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "seq_len": self.seq_len,
            "horizon": self.horizon,
            "dim": self.dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "proj_temperature": self.proj_temperature,
            "boundary_time": self.boundary_time,
        }

    @property
    def item_table(self) -> torch.Tensor:
        return self.token_emb.weight[: self.n_items]

    @property
    def user_table(self) -> torch.Tensor:
        return self.user_emb.weight

    def load_collab(self, bundle) -> None:
        """Copy pre-trained user/item factors into the trainable tables."""
        p = np.asarray(bundle.user_factors)
        q = np.asarray(bundle.item_factors)
        if p.shape != (self.n_users, self.dim) or q.shape != (self.n_items, self.dim):
            raise ValueError(
                f"embedding shapes {p.shape}/{q.shape} do not match "
                f"({self.n_users}, {self.dim})/({self.n_items}, {self.dim})"
            )
        with torch.no_grad():
            self.user_emb.weight.copy_(torch.as_tensor(p, dtype=self.user_emb.weight.dtype))
            self.token_emb.weight[: self.n_items].copy_(
                torch.as_tensor(q, dtype=self.token_emb.weight.dtype)
            )

    def _token_rows(self, items: torch.Tensor) -> torch.Tensor:
        rows = items.clone()
        rows[items == MASK] = self.n_items
        rows[items == PAD] = self.n_items + 1
        if ((rows < 0) | (rows >= self.n_items + 2)).any():
            raise ValueError("sequence contains out-of-range item ids")
        return rows

    def time_index(self, t: torch.Tensor) -> torch.Tensor:
        return torch.round(t).long().clamp_(0, self.n_time_bins - 1)

    def encode(self, items: torch.Tensor, users: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Hidden states for the user slot followed by the sequence slots.

        ``items``: (B, l) sentinel-coded ids; ``users``: (B,); ``t``: (B,).
        Returns (B, l+1, dim).  Padded positions are attention-visible.
        """
        if ((users < 0) | (users >= self.n_users)).any():
            raise ValueError("unknown user id")
        dtype = self.token_emb.weight.dtype
        batch, length = items.shape
        positions = torch.arange(length, device=items.device)
        tokens = self.token_emb(self._token_rows(items)) + self.pos_emb(positions)
        head = self.user_emb(users).unsqueeze(1)
        hidden = torch.cat([head, tokens], dim=1)
        time_vec = self.time_emb(self.time_index(t.to(dtype))).unsqueeze(1)
        time_slot = torch.cat(
            [time_vec, torch.zeros(batch, length, self.dim, dtype=dtype, device=items.device)],
            dim=1,
        )
        for block in self.blocks:
            hidden = block(hidden + time_slot)
        return hidden

    def project_items(self, encoded: torch.Tensor) -> torch.Tensor:
        """Per-position item probabilities from sequence-slot hidden states.

        Logits are cosine similarities against the item table divided by the
        projection temperature.  A zero-norm hidden state yields uniform
        logits (and a warning), so every output row is a valid distribution.
        """
        norms = encoded.norm(dim=-1)
        if bool((norms == 0).any()):
            warnings.warn("zero-norm position output; falling back to uniform logits")
        queries = F.normalize(encoded, dim=-1, eps=1e-12)
        catalog = F.normalize(self.item_table, dim=-1, eps=1e-12)
        logits = queries @ catalog.T / self.proj_temperature
        return torch.softmax(logits, dim=-1)

    def _boundary_output(self, items: torch.Tensor) -> torch.Tensor:
        """Degenerate distributions for the identity case: one-hot at item
        positions, uniform where no item is observed (mask or pad)."""
        dtype = self.token_emb.weight.dtype
        batch, length = items.shape
        probs = torch.full(
            (batch, length, self.n_items), 1.0 / self.n_items,
            dtype=dtype, device=items.device,
        )
        observed = items >= 0
        if observed.any():
            probs[observed] = F.one_hot(items[observed], self.n_items).to(dtype)
        return probs

    def apply(
        self, items: torch.Tensor, users: torch.Tensor, t: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Consistency function on a batch of states.

        Returns ``(probs, decoded)`` where ``probs`` is (B, l, n_items) and
        ``decoded`` is the per-position argmax with pad slots kept as PAD.
        Rows with ``t`` at or below the boundary time are returned unchanged.
        """
        self.apply_count += 1
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
        boundary = t <= self.boundary_time
        if bool(boundary.all()):
            return self._boundary_output(items), items.clone()
        probs = self.project_items(self.encode(items, users, t)[:, 1:, :])
        decoded = probs.argmax(dim=-1)
        decoded = torch.where(items == PAD, torch.full_like(decoded, PAD), decoded)
        if bool(boundary.any()):
            rows = boundary.nonzero(as_tuple=True)[0]
            probs = probs.clone()
            probs[rows] = self._boundary_output(items[rows])
            decoded[rows] = items[rows]
        return probs, decoded


def consistency_apply(
    model: ConsistencyDenoiser, state: DiffusionState, user_id: int
) -> tuple[np.ndarray, DiffusionState]:
    """Single-sequence consistency function; no gradients are tracked."""
    items = torch.as_tensor(np.asarray(state.items), dtype=torch.long).unsqueeze(0)
    users = torch.tensor([user_id], dtype=torch.long)
    t = torch.tensor([state.t], dtype=torch.float64)
    with torch.no_grad():
        probs, decoded = model.apply(items, users, t)
    return (
        probs[0].cpu().numpy(),
        DiffusionState(items=decoded[0].cpu().numpy().astype(np.int64), t=state.t),
    )


def save_checkpoint(
    path: str | Path,
    model: ConsistencyDenoiser,
    ema_model: ConsistencyDenoiser | None = None,
    config: dict | None = None,
) -> None:
    """Serialize model (and optionally EMA shadow) with its configuration."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "hparams": model.hparams,
        "model_state": model.state_dict(),
        "ema_state": ema_model.state_dict() if ema_model is not None else None,
        "config": config,
    }
    torch.save(payload, str(path))


def load_checkpoint(
    path: str | Path,
) -> tuple[ConsistencyDenoiser, ConsistencyDenoiser | None, dict | None]:
    """Reconstruct a checkpointed model; round trips are bit-exact."""
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {version!r}")
    model = ConsistencyDenoiser(**payload["hparams"])
    model.load_state_dict(payload["model_state"])
    ema = None
    if payload.get("ema_state") is not None:
        ema = ConsistencyDenoiser(**payload["hparams"])
        ema.load_state_dict(payload["ema_state"])
        ema.requires_grad_(False)
    return model, ema, payload.get("config")
