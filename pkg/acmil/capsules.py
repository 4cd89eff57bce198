"""
Capsule structuring: action embedding, the CLS-prefixed Action Field Encoder
and the shared capsule LSTM.
"""

from __future__ import annotations
import logging
from typing import Tuple

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from acmil.batching import RoomBatch
from acmil.config import ModelConfig
from acmil.errors import FeatureDimensionError

logger = logging.getLogger(__name__)


def scatter_rows(values: torch.Tensor, index: torch.Tensor, total: int) -> torch.Tensor:
    """Place ``values[i]`` at row ``index[i]`` of a zero tensor with ``total`` rows."""
    out = values.new_zeros((total,) + tuple(values.shape[1:]))
    return out.index_copy(0, index, values)


class ActionFieldEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.d_text = cfg.d_text
        self.d_model = cfg.d_model
        self.max_actions = cfg.max_actions
        self.action_embedding = nn.Embedding(cfg.num_action_types, cfg.d_embed)
        self.text_projection = nn.Linear(cfg.d_text, cfg.d_k)
        self.no_text = nn.Parameter(torch.randn(cfg.d_k) * 0.02)
        self.cls_token = nn.Parameter(torch.randn(cfg.d_model) * 0.02)
        # index 0 is the CLS position
        self.position_embedding = nn.Embedding(cfg.max_actions + 1, cfg.d_model)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.d_model,
            nhead=cfg.num_heads,
            dim_feedforward=2 * cfg.d_model,
            dropout=cfg.dropout,
            activation="gelu",
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=cfg.encoder_layers, enable_nested_tensor=False)

    def embed_actions(self, action_ids: torch.Tensor, text: torch.Tensor, has_text: torch.Tensor) -> torch.Tensor:
        """e_i = [action embedding || Proj(x_i)], with the no-text vector where x_i is absent.

        Args:
            action_ids: (B, L) action type ids
            text: (B, L, d_text) text features, ignored where ``has_text`` is False
            has_text: (B, L) bool

        Returns:
            (B, L, d_embed + d_k)
        """
        if text.shape[-1] != self.d_text:
            raise FeatureDimensionError(f"text features have width {text.shape[-1]}, encoder expects d_text={self.d_text}")
        projected = self.text_projection(text)
        projected = torch.where(has_text.unsqueeze(-1), projected, self.no_text.expand_as(projected))
        return torch.cat([self.action_embedding(action_ids), projected], dim=-1)

    def encode_action_field(self, e: torch.Tensor, action_mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Run [CLS, e_1..e_N] through the encoder.

        Returns:
            (h_a, E): the CLS output (B, d_model) and the per-action outputs (B, L, d_model).
            Rows of E at padded positions are meaningless.
        """
        B, L, _ = e.shape
        if L == 0 or not bool(action_mask.any(dim=1).all()):
            raise ValueError("action field encoder needs at least one action per room")
        if L > self.max_actions:
            raise ValueError(f"{L} actions exceed max_actions={self.max_actions}")
        x = torch.cat([self.cls_token.expand(B, 1, -1), e], dim=1)
        x = x + self.position_embedding(torch.arange(L + 1, device=e.device)).unsqueeze(0)
        padding = torch.cat([action_mask.new_zeros(B, 1), ~action_mask], dim=1)
        out = self.encoder(x, src_key_padding_mask=padding)
        return out[:, 0], out[:, 1:]

    def forward(self, batch: RoomBatch) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (e, h_a, E)."""
        e = self.embed_actions(batch.action_ids, batch.text, batch.has_text)
        h_a, E = self.encode_action_field(e, batch.action_mask)
        return e, h_a, E


class CapsuleConstructor(nn.Module):
    """Shared LSTM over each capsule's time-ordered action vectors; c = last layer's final hidden state."""

    def __init__(self, d_in: int, cfg: ModelConfig):
        super().__init__()
        self.lstm = nn.LSTM(
            input_size=d_in,
            hidden_size=cfg.d_k,
            num_layers=cfg.recurrent_layers,
            dropout=cfg.dropout if cfg.recurrent_layers > 1 else 0.0,
            batch_first=True,
        )

    def encode_sequences(self, sequences: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """(G, M, d_in) padded sequences with lengths (G,) -> (G, d_k)."""
        packed = pack_padded_sequence(sequences, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, (hidden, _) = self.lstm(packed)
        return hidden[-1]

    def encode_capsules(self, E: torch.Tensor, batch: RoomBatch) -> torch.Tensor:
        """Capsule vectors scattered into the padded (B, C, d_k) capsule grid, capsule_index order."""
        B, L, D = E.shape
        C = batch.capsule_mask.shape[1]
        sequences = E.reshape(B * L, D)[batch.capsule_gather]
        capsules = self.encode_sequences(sequences, batch.capsule_len)
        return scatter_rows(capsules, batch.capsule_flat, B * C).view(B, C, -1)

    def forward(self, E: torch.Tensor, batch: RoomBatch) -> torch.Tensor:
        return self.encode_capsules(E, batch)


class CapsuleFrontEnd(nn.Module):
    """Embedding, optional contextualization and capsule construction, shared by every capsule model."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.use_action_encoder = cfg.use_action_encoder
        self.action_encoder = ActionFieldEncoder(cfg)
        self.capsule_constructor = CapsuleConstructor(cfg.d_model, cfg)

    def forward(self, batch: RoomBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (h_a (B, d_model), capsules (B, C, d_k)).

        Without the action encoder, capsules read the raw action embeddings and h_a is zeros.
        """
        if self.use_action_encoder:
            _, h_a, E = self.action_encoder(batch)
        else:
            E = self.action_encoder.embed_actions(batch.action_ids, batch.text, batch.has_text)
            h_a = E.new_zeros(E.shape[0], E.shape[-1])
        return h_a, self.capsule_constructor(E, batch)
