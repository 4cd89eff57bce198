"""
Versioned single-file checkpoints.

Layout (a dict written with torch.save):
    format, version, model_name, model_config (ModelConfig as a dict),
    groups: {top-level submodule name: state_dict}, optimizer (state_dict or None),
    epoch, best_epoch, best_pr_auc, threshold
"""

from __future__ import annotations
import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional

import torch
from torch import nn

from acmil.config import ModelConfig, iter_shape_mismatches, model_config_from_dict
from acmil.errors import CheckpointError, ConfigError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "acmil-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model_name: str
    model_config: ModelConfig
    groups: Dict[str, Dict[str, torch.Tensor]]
    optimizer: Optional[Dict[str, Any]]
    epoch: int
    best_pr_auc: float
    threshold: float
    best_epoch: int = 0


def parameter_groups(model: nn.Module) -> Dict[str, Dict[str, torch.Tensor]]:
    """Split a state_dict by top-level submodule ("front_end", "reasoner", ...)."""
    groups: Dict[str, Dict[str, torch.Tensor]] = {}
    for key, value in model.state_dict().items():
        group, _, rest = key.partition(".")
        groups.setdefault(group, {})[rest] = value.detach().cpu()
    return groups


def save_checkpoint(
    path: str,
    model: nn.Module,
    model_name: str,
    cfg: ModelConfig,
    epoch: int,
    best_pr_auc: float,
    threshold: float,
    optimizer: Optional[torch.optim.Optimizer] = None,
    best_epoch: Optional[int] = None,
) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_name": model_name,
        "model_config": dataclasses.asdict(cfg),
        "groups": parameter_groups(model),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "best_epoch": int(epoch if best_epoch is None else best_epoch),
        "best_pr_auc": float(best_pr_auc),
        "threshold": float(threshold),
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.debug("saved checkpoint %s (epoch %d, val PR-AUC %.4f)", path, epoch, best_pr_auc)


def load_checkpoint(path: str, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``expected``, every shape-determining field must agree."""
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    try:
        cfg = model_config_from_dict(payload["model_config"])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if expected is not None:
        mismatches = [f"{name}: checkpoint {got} vs config {want}" for name, got, want in iter_shape_mismatches(cfg, expected)]
        if mismatches:
            raise CheckpointError(f"{path}: incompatible with the run config ({'; '.join(mismatches)})")
    return Checkpoint(
        model_name=payload["model_name"],
        model_config=cfg,
        groups=payload["groups"],
        optimizer=payload.get("optimizer"),
        epoch=int(payload["epoch"]),
        best_pr_auc=float(payload["best_pr_auc"]),
        threshold=float(payload["threshold"]),
        best_epoch=int(payload.get("best_epoch", payload["epoch"])),
    )


def restore_model(checkpoint: Checkpoint) -> nn.Module:
    """Rebuild the checkpointed model and load its parameters."""
    from acmil.model import build_model

    model = build_model(checkpoint.model_name, checkpoint.model_config)
    state = {
        (f"{group}.{key}" if key else group): value
        for group, params in checkpoint.groups.items()
        for key, value in params.items()
    }
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"parameters do not fit model {checkpoint.model_name!r}: {exc}") from exc
    return model
