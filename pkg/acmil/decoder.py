"""
Risk decoder: gated fusion of the room-level vectors, classifier head and loss.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from acmil.config import LOSS_REDUCTIONS, ModelConfig
from acmil.errors import FeatureDimensionError

BRANCHES = ("action", "capsule", "user", "timeslot")


class MLP(nn.Module):
    """Two-layer perceptron with a tanh hidden layer."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int = 1):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.tanh(self.fc1(x)))


@dataclass
class RiskOutput:
    logits: torch.Tensor  # (B,)
    fused: torch.Tensor  # (B, d)
    gates: Dict[str, torch.Tensor] = field(default_factory=dict)  # branch -> (B,)
    representations: Dict[str, torch.Tensor] = field(default_factory=dict)
    attribution: Optional[torch.Tensor] = None  # (B, C)
    user_weights: Optional[torch.Tensor] = None  # (B, U)
    slot_weights: Optional[torch.Tensor] = None  # (B, C)

    @property
    def scores(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


class RiskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, branches: Tuple[str, ...] = BRANCHES):
        super().__init__()
        self.d_k = cfg.d_k
        self.gates = nn.ModuleDict({name: MLP(cfg.d_k, cfg.d_k // 2) for name in branches})
        self.classifier = MLP(cfg.d_k, cfg.d_k // 2)

    def fuse(self, representations: Mapping[str, torch.Tensor]) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
        """h_room = sum_x sigmoid(MLP_x(h_x)) * h_x over the given branches."""
        fused = None
        gates: Dict[str, torch.Tensor] = {}
        for name, h in representations.items():
            if name not in self.gates:
                raise KeyError(f"no gate for room representation {name!r}")
            if h.shape[-1] != self.d_k:
                raise FeatureDimensionError(f"{name} representation has width {h.shape[-1]}, expected {self.d_k}")
            g = torch.sigmoid(self.gates[name](h))
            gates[name] = g.squeeze(-1)
            fused = g * h if fused is None else fused + g * h
        if fused is None:
            raise ValueError("fuse needs at least one room representation")
        return fused, gates

    def classify(self, fused: torch.Tensor) -> torch.Tensor:
        """Risk logit per room; the score is its sigmoid."""
        return self.classifier(fused).squeeze(-1)


def risk_loss(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Binary cross-entropy over rooms, computed from logits.

    ``sum`` is the optimized objective by default; ``mean`` divides by the batch size.
    """
    if logits.numel() == 0:
        raise ValueError("loss of an empty batch")
    if logits.shape != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} differ in shape")
    if reduction not in LOSS_REDUCTIONS:
        raise ValueError(f"reduction must be one of {LOSS_REDUCTIONS}, got {reduction!r}")
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction=reduction)
