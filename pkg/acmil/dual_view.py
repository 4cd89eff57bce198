"""
User view and timeslot view over the refined capsule vectors.
"""

from __future__ import annotations
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from acmil.batching import RoomBatch
from acmil.capsules import scatter_rows
from acmil.config import ModelConfig


class GatedAttention(nn.Module):
    """Gated attention logits w^T [tanh(V h) * sigmoid(U h)]."""

    def __init__(self, d_in: int, d_hidden: int):
        super().__init__()
        self.attention_V = nn.Sequential(nn.Linear(d_in, d_hidden), nn.Tanh())
        self.attention_U = nn.Sequential(nn.Linear(d_in, d_hidden), nn.Sigmoid())
        self.attention_w = nn.Linear(d_hidden, 1, bias=False)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """(..., d_in) -> (...,) unnormalized logits."""
        return self.attention_w(self.attention_V(h) * self.attention_U(h)).squeeze(-1)


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)


def _gru(cfg: ModelConfig) -> nn.GRU:
    return nn.GRU(
        input_size=cfg.d_k,
        hidden_size=cfg.d_k,
        num_layers=cfg.recurrent_layers,
        dropout=cfg.dropout if cfg.recurrent_layers > 1 else 0.0,
        batch_first=True,
    )


def _last_hidden(gru: nn.GRU, sequences: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    packed = pack_padded_sequence(sequences, lengths.cpu(), batch_first=True, enforce_sorted=False)
    _, hidden = gru(packed)
    return hidden[-1]


@dataclass
class ViewOutputs:
    h_user: Optional[torch.Tensor] = None  # (B, d_k)
    h_time: Optional[torch.Tensor] = None  # (B, d_k)
    user_weights: Optional[torch.Tensor] = None  # (B, U), sums to 1 per room
    slot_weights: Optional[torch.Tensor] = None  # (B, C), sums to 1 within each slot


class UserView(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.gru = _gru(cfg)
        self.attention = GatedAttention(cfg.d_k, cfg.d_k)
        self.streamer_bias = nn.Parameter(torch.zeros(()))

    def user_embeddings(self, refined: torch.Tensor, batch: RoomBatch) -> torch.Tensor:
        """Final GRU state over each user's capsules in slot order, as (B, U, d_k)."""
        B, C, D = refined.shape
        U = batch.user_mask.shape[1]
        sequences = refined.reshape(B * C, D)[batch.user_gather]
        users = _last_hidden(self.gru, sequences, batch.user_len)
        return scatter_rows(users, batch.user_flat, B * U).view(B, U, D)

    def pool(self, users: torch.Tensor, user_mask: torch.Tensor, user_streamer: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        logits = self.attention(users) + self.streamer_bias * user_streamer.to(users.dtype)
        weights = masked_softmax(logits, user_mask)
        return (weights.unsqueeze(-1) * users).sum(dim=1), weights

    def forward(self, refined: torch.Tensor, batch: RoomBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.pool(self.user_embeddings(refined, batch), batch.user_mask, batch.user_streamer)


class TimeslotView(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attention = GatedAttention(cfg.d_k, cfg.d_k)
        self.gru = _gru(cfg)

    def slot_summaries(self, refined: torch.Tensor, batch: RoomBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        """Gated-attention pool per nonempty slot -> (t_k (T_s, d_k), member weights (T_s, Ms))."""
        B, C, D = refined.shape
        members = refined.reshape(B * C, D)[batch.slot_gather]
        weights = masked_softmax(self.attention(members), batch.slot_member_mask)
        return (weights.unsqueeze(-1) * members).sum(dim=1), weights

    def forward(self, refined: torch.Tensor, batch: RoomBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        B, C, _ = refined.shape
        summaries, weights = self.slot_summaries(refined, batch)
        h_time = _last_hidden(self.gru, summaries[batch.room_slot_gather], batch.room_slot_len)
        mask = batch.slot_member_mask
        per_capsule = scatter_rows(weights[mask], batch.slot_gather[mask], B * C).view(B, C)
        return h_time, per_capsule
