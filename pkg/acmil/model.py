"""
The full capsule MIL risk model and the model registry used by the CLI.
"""

from __future__ import annotations
import dataclasses
import logging
from typing import Dict, Tuple

import torch
from torch import nn

from acmil.batching import RoomBatch
from acmil.capsules import CapsuleFrontEnd
from acmil.config import ModelConfig
from acmil.decoder import RiskDecoder, RiskOutput
from acmil.dual_view import TimeslotView, UserView, ViewOutputs
from acmil.errors import ConfigError
from acmil.reasoner import CapsuleReasoner

logger = logging.getLogger(__name__)


class ACMIL(nn.Module):
    """Action field encoder -> capsules -> relational reasoner -> user/timeslot views -> gated fusion.

    The ``use_*`` switches of ModelConfig drop a branch from fusion (and, for the
    action encoder, also the contextualization step).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.front_end = CapsuleFrontEnd(cfg)
        # h_a has width d_embed + d_k; fusion works at d_k
        self.action_head = nn.Linear(cfg.d_model, cfg.d_k)
        self.reasoner = CapsuleReasoner(cfg)
        self.user_view = UserView(cfg)
        self.timeslot_view = TimeslotView(cfg)
        self.decoder = RiskDecoder(cfg, self.branches)

    @property
    def branches(self) -> Tuple[str, ...]:
        enabled = (
            ("action", self.cfg.use_action_encoder),
            ("capsule", self.cfg.use_graph_bias),
            ("user", self.cfg.use_user_view),
            ("timeslot", self.cfg.use_timeslot_view),
        )
        return tuple(name for name, on in enabled if on)

    def views(self, refined: torch.Tensor, batch: RoomBatch) -> ViewOutputs:
        out = ViewOutputs()
        if self.cfg.use_user_view:
            out.h_user, out.user_weights = self.user_view(refined, batch)
        if self.cfg.use_timeslot_view:
            out.h_time, out.slot_weights = self.timeslot_view(refined, batch)
        return out

    def forward(self, batch: RoomBatch) -> RiskOutput:
        h_a, capsules = self.front_end(batch)
        reasoned = self.reasoner(
            capsules, batch.capsule_slot, batch.capsule_user, batch.capsule_streamer, batch.capsule_mask
        )
        views = self.views(reasoned.refined, batch)

        representations: Dict[str, torch.Tensor] = {}
        if self.cfg.use_action_encoder:
            representations["action"] = self.action_head(h_a)
        if self.cfg.use_graph_bias:
            representations["capsule"] = reasoned.h_c
        if views.h_user is not None:
            representations["user"] = views.h_user
        if views.h_time is not None:
            representations["timeslot"] = views.h_time

        fused, gates = self.decoder.fuse(representations)
        return RiskOutput(
            logits=self.decoder.classify(fused),
            fused=fused,
            gates=gates,
            representations=representations,
            attribution=reasoned.attribution,
            user_weights=views.user_weights,
            slot_weights=views.slot_weights,
        )


# model name -> ModelConfig switches turned off
_ABLATIONS = {
    "acmil": (),
    "acmil-no-a": ("use_action_encoder",),
    "acmil-no-c": ("use_graph_bias",),
    "acmil-no-u": ("use_user_view",),
    "acmil-no-t": ("use_timeslot_view",),
}
MODEL_NAMES = tuple(_ABLATIONS) + ("meanpool", "atmil", "transformer")


def model_config_for(name: str, cfg: ModelConfig) -> ModelConfig:
    """Apply the ablation switches a model name implies."""
    if name not in MODEL_NAMES:
        raise ConfigError(f"unknown model {name!r}; expected one of {', '.join(MODEL_NAMES)}")
    off = _ABLATIONS.get(name, ())
    return dataclasses.replace(cfg, **{flag: False for flag in off}) if off else cfg


def build_model(name: str, cfg: ModelConfig) -> nn.Module:
    from acmil.baselines import GatedAttentionMIL, MeanPoolMIL, SequenceTransformer

    cfg = model_config_for(name, cfg)
    if name == "meanpool":
        return MeanPoolMIL(cfg)
    if name == "atmil":
        return GatedAttentionMIL(cfg)
    if name == "transformer":
        return SequenceTransformer(cfg)
    return ACMIL(cfg)
