"""
Comparison models sharing the capsule front end (or just the action encoder).

- MeanPoolMIL: average of capsule vectors -> MLP.
- GatedAttentionMIL: gated attention over capsules (no streamer bias) -> MLP.
- SequenceTransformer: Action Field Encoder CLS output -> MLP.
"""

from __future__ import annotations
from torch import nn

from acmil.batching import RoomBatch
from acmil.capsules import ActionFieldEncoder, CapsuleFrontEnd
from acmil.config import ModelConfig
from acmil.decoder import MLP, RiskOutput
from acmil.dual_view import GatedAttention, masked_softmax


class MeanPoolMIL(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.front_end = CapsuleFrontEnd(cfg)
        self.classifier = MLP(cfg.d_k, cfg.d_k // 2)

    def forward(self, batch: RoomBatch) -> RiskOutput:
        _, capsules = self.front_end(batch)
        mask = batch.capsule_mask.to(capsules.dtype)
        counts = mask.sum(dim=1, keepdim=True)
        pooled = (capsules * mask.unsqueeze(-1)).sum(dim=1) / counts
        return RiskOutput(
            logits=self.classifier(pooled).squeeze(-1),
            fused=pooled,
            attribution=mask / counts,
        )


class GatedAttentionMIL(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.front_end = CapsuleFrontEnd(cfg)
        self.attention = GatedAttention(cfg.d_k, cfg.d_k)
        self.classifier = MLP(cfg.d_k, cfg.d_k // 2)

    def forward(self, batch: RoomBatch) -> RiskOutput:
        _, capsules = self.front_end(batch)
        weights = masked_softmax(self.attention(capsules), batch.capsule_mask)
        pooled = (weights.unsqueeze(-1) * capsules).sum(dim=1)
        return RiskOutput(
            logits=self.classifier(pooled).squeeze(-1),
            fused=pooled,
            attribution=weights,
        )


class SequenceTransformer(nn.Module):
    """Flat action-sequence baseline; produces no capsule attribution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.action_encoder = ActionFieldEncoder(cfg)
        self.classifier = MLP(cfg.d_model, cfg.d_k // 2)

    def forward(self, batch: RoomBatch) -> RiskOutput:
        _, h_a, _ = self.action_encoder(batch)
        return RiskOutput(logits=self.classifier(h_a).squeeze(-1), fused=h_a)
