"""
Relational capsule reasoner.

Builds the relation-aware capsule graph (four boolean relation masks weighted
by learnable gammas and scaled by GELU dot-product similarity), expands it with
a CLS row and column, and runs graph-aware self-attention where the row-stochastic
adjacency is added to every head's logits. The CLS row of the last block's
attention gives per-capsule attribution.
"""

from __future__ import annotations
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from acmil.config import ModelConfig
from acmil.room_data import CapsuleGrid

logger = logging.getLogger(__name__)

RELATIONS = ("temporal", "user", "role", "residual")


def compute_similarity(capsules: torch.Tensor) -> torch.Tensor:
    """sim_ij = GELU(c_i . c_j) with the exact erf GELU. (..., N, d) -> (..., N, N)."""
    return F.gelu(capsules @ capsules.transpose(-1, -2))


def relation_masks(
    slots: torch.Tensor,
    users: torch.Tensor,
    streamer: torch.Tensor,
    capsule_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Stacked (..., 4, N, N) boolean masks in RELATIONS order.

    temporal: |k_i - k_j| <= 1; user: same user; role: exactly one of the pair is a
    streamer capsule; residual: none of the other three. Pairs touching padding are False.
    """
    temporal = (slots.unsqueeze(-1) - slots.unsqueeze(-2)).abs() <= 1
    same_user = users.unsqueeze(-1) == users.unsqueeze(-2)
    role = streamer.unsqueeze(-1) ^ streamer.unsqueeze(-2)
    residual = ~(temporal | same_user | role)
    masks = torch.stack([temporal, same_user, role, residual], dim=-3)
    if capsule_mask is not None:
        pair = capsule_mask.unsqueeze(-1) & capsule_mask.unsqueeze(-2)
        masks = masks & pair.unsqueeze(-3)
    return masks


def build_relation_masks(grid: CapsuleGrid) -> torch.Tensor:
    """(4, N^c, N^c) masks for one room's capsule grid."""
    users = torch.tensor([ui for ui, _ in grid.capsules], dtype=torch.long)
    slots = torch.tensor([k for _, k in grid.capsules], dtype=torch.long)
    streamer = torch.tensor([grid.is_streamer_user(ui) for ui, _ in grid.capsules], dtype=torch.bool)
    return relation_masks(slots, users, streamer)


def build_adjacency(
    sim: torch.Tensor,
    masks: torch.Tensor,
    gamma: torch.Tensor,
    gamma_cls: float,
    capsule_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Row-softmaxed (..., N+1, N+1) adjacency with the CLS node at index 0.

    Capsule block: sum_z gamma_z * M^z_ij * sim_ij. Every entry in the CLS row and
    column (CLS-CLS included) is gamma_cls. Padded capsule columns get zero weight.
    """
    weights = torch.einsum("z,...zij->...ij", gamma, masks.to(sim.dtype))
    block = weights * sim
    lead = block.shape[:-2]
    n = block.shape[-1]
    col = block.new_full(lead + (n, 1), gamma_cls)
    row = block.new_full(lead + (1, n + 1), gamma_cls)
    logits = torch.cat([row, torch.cat([col, block], dim=-1)], dim=-2)
    if capsule_mask is not None:
        keys = torch.cat([capsule_mask.new_ones(lead + (1,)), capsule_mask], dim=-1)
        logits = logits.masked_fill(~keys.unsqueeze(-2), float("-inf"))
    return torch.softmax(logits, dim=-1)


@dataclass
class RelationStructure:
    masks: torch.Tensor  # (4, N, N) bool
    sim: torch.Tensor  # (N, N)
    adjacency: torch.Tensor  # (N+1, N+1)

    def mask(self, relation: str) -> torch.Tensor:
        return self.masks[RELATIONS.index(relation)]


def relation_structure(grid: CapsuleGrid, capsules: torch.Tensor, gamma: torch.Tensor, gamma_cls: float) -> RelationStructure:
    masks = build_relation_masks(grid)
    sim = compute_similarity(capsules)
    return RelationStructure(masks=masks, sim=sim, adjacency=build_adjacency(sim, masks, gamma, gamma_cls))


@dataclass
class RiskAttribution:
    """Per-capsule share of CLS attention, keyed by (user_id, slot)."""

    keys: List[Tuple[str, int]]
    scores: List[float]

    def ranked(self) -> List[Tuple[Tuple[str, int], float]]:
        return sorted(zip(self.keys, self.scores), key=lambda kv: -kv[1])

    def as_records(self) -> List[dict]:
        return [{"user_id": u, "slot": k, "score": s} for (u, k), s in zip(self.keys, self.scores)]


class GraphAwareBlock(nn.Module):
    """Post-norm Transformer block whose attention logits are (Q_h K_h^T + A) / sqrt(d_head) per head."""

    def __init__(self, d_model: int, num_heads: int, dropout: float):
        super().__init__()
        self.num_heads = num_heads
        self.d_head = d_model // num_heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, 2 * d_model),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(2 * d_model, d_model),
        )
        self.attn_dropout = nn.Dropout(dropout)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, N, _ = x.shape
        return x.view(B, N, self.num_heads, self.d_head).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        adjacency: Optional[torch.Tensor],
        key_mask: torch.Tensor,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """x (B, N, d), adjacency (B, N, N) or None, key_mask (B, N) -> (out, attention (B, heads, N, N))."""
        B, N, D = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        logits = q @ k.transpose(-1, -2)
        if adjacency is not None:
            logits = logits + adjacency.unsqueeze(1)
        logits = logits / math.sqrt(self.d_head)
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attention = torch.softmax(logits, dim=-1)
        mixed = (self.attn_dropout(attention) @ v).transpose(1, 2).reshape(B, N, D)
        x = self.norm1(x + self.dropout(self.out(mixed)))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x, attention


@dataclass
class ReasonerOutput:
    h_c: torch.Tensor  # (B, d_k)
    refined: torch.Tensor  # (B, C, d_k)
    attribution: torch.Tensor  # (B, C), zero on padding
    adjacency: Optional[torch.Tensor]  # (B, C+1, C+1)


class CapsuleReasoner(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.use_graph_bias = cfg.use_graph_bias
        self.gamma_cls = cfg.gamma_cls
        self.cls_token = nn.Parameter(torch.randn(cfg.d_k) * 0.02)
        # temporal, user, role, residual
        self.gamma = nn.Parameter(torch.ones(len(RELATIONS)))
        self.blocks = nn.ModuleList(
            GraphAwareBlock(cfg.d_k, cfg.num_heads, cfg.dropout) for _ in range(cfg.graph_layers)
        )

    def adjacency(
        self,
        capsules: torch.Tensor,
        slots: torch.Tensor,
        users: torch.Tensor,
        streamer: torch.Tensor,
        capsule_mask: torch.Tensor,
    ) -> torch.Tensor:
        masks = relation_masks(slots, users, streamer, capsule_mask)
        return build_adjacency(compute_similarity(capsules), masks, self.gamma, self.gamma_cls, capsule_mask)

    def graph_aware_attention(
        self,
        capsules: torch.Tensor,
        adjacency: Optional[torch.Tensor],
        capsule_mask: torch.Tensor,
    ) -> ReasonerOutput:
        B = capsules.shape[0]
        x = torch.cat([self.cls_token.expand(B, 1, -1), capsules], dim=1)
        key_mask = torch.cat([capsule_mask.new_ones(B, 1), capsule_mask], dim=1)
        attention = None
        for block in self.blocks:
            x, attention = block(x, adjacency, key_mask)
        cls_row = attention.mean(dim=1)[:, 0, 1:] * capsule_mask
        attribution = cls_row / cls_row.sum(dim=-1, keepdim=True)
        return ReasonerOutput(h_c=x[:, 0], refined=x[:, 1:], attribution=attribution, adjacency=adjacency)

    def forward(
        self,
        capsules: torch.Tensor,
        slots: torch.Tensor,
        users: torch.Tensor,
        streamer: torch.Tensor,
        capsule_mask: torch.Tensor,
    ) -> ReasonerOutput:
        adjacency = None
        if self.use_graph_bias:
            adjacency = self.adjacency(capsules, slots, users, streamer, capsule_mask)
        return self.graph_aware_attention(capsules, adjacency, capsule_mask)


def attribution_for_room(keys: Sequence[Tuple[str, int]], scores) -> RiskAttribution:
    """Trim one row of a batched attribution (tensor or array) to the room's capsules."""
    values = torch.as_tensor(scores)[:len(keys)].detach().cpu().tolist()
    return RiskAttribution(keys=list(keys), scores=[float(v) for v in values])
