"""
Training loop, early stopping and batched prediction.
"""

from __future__ import annotations
import logging
import os
import random
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from acmil.batching import RoomDataset, collate_rooms
from acmil.checkpoint import Checkpoint, save_checkpoint
from acmil.config import ModelConfig
from acmil.decoder import risk_loss
from acmil.metrics import best_f1, evaluate_scores

logger = logging.getLogger(__name__)

BEST_CHECKPOINT = "best.pt"
LAST_CHECKPOINT = "last.pt"
TRAIN_LOG = "train_log.csv"


def set_seed(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def make_loader(dataset: RoomDataset, batch_size: int, shuffle: bool, seed: int = 0, num_workers: int = 0) -> DataLoader:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        collate_fn=collate_rooms,
        num_workers=num_workers,
        generator=generator,
    )


@dataclass
class Predictions:
    room_ids: List[str]
    labels: np.ndarray
    scores: np.ndarray
    loss: float  # summed BCE
    embeddings: np.ndarray  # fused room vectors
    attribution: List[Optional[np.ndarray]] = field(default_factory=list)  # per room, length N^c
    user_weights: List[Optional[np.ndarray]] = field(default_factory=list)  # per room, length U


def predict(
    model: nn.Module,
    dataset: RoomDataset,
    batch_size: int = 128,
    device: str = "cpu",
    progress: bool = False,
) -> Predictions:
    model.eval()
    dtype = next(model.parameters()).dtype
    loader = make_loader(dataset, batch_size, shuffle=False)
    room_ids: List[str] = []
    scores, labels, embeddings = [], [], []
    attribution: List[Optional[np.ndarray]] = []
    user_weights: List[Optional[np.ndarray]] = []
    total = 0.0
    offset = 0
    with torch.no_grad():
        for batch in tqdm(loader, desc="predict", disable=not progress, leave=False):
            batch = batch.to(device=device, dtype=dtype)
            out = model(batch)
            total += float(risk_loss(out.logits, batch.labels, "sum"))
            room_ids.extend(batch.room_ids)
            scores.append(out.scores.cpu().numpy())
            labels.append(batch.labels.cpu().numpy())
            embeddings.append(out.fused.cpu().numpy())
            for b in range(batch.batch_size):
                item = dataset[offset + b]
                attribution.append(
                    None if out.attribution is None else out.attribution[b, :item.num_capsules].cpu().numpy()
                )
                user_weights.append(
                    None if out.user_weights is None else out.user_weights[b, :len(item.users)].cpu().numpy()
                )
            offset += batch.batch_size
    return Predictions(
        room_ids=room_ids,
        labels=np.concatenate(labels).astype(np.int64),
        scores=np.concatenate(scores).astype(np.float64),
        loss=total,
        embeddings=np.concatenate(embeddings),
        attribution=attribution,
        user_weights=user_weights,
    )


@dataclass
class TrainResult:
    best_epoch: int
    best_pr_auc: float
    threshold: float
    epochs_run: int
    stopped_early: bool
    checkpoint_path: str
    log_path: str
    history: pd.DataFrame


class Trainer:
    """AdamW training with early stopping on validation PR-AUC.

    Writes ``best.pt`` (best validation PR-AUC so far), ``last.pt`` (every epoch)
    and ``train_log.csv`` into ``out_dir``.
    """

    def __init__(
        self,
        model: nn.Module,
        model_name: str,
        cfg: ModelConfig,
        out_dir: str,
        device: str = "cpu",
        progress: bool = True,
    ):
        self.model = model.to(device)
        self.model_name = model_name
        self.cfg = cfg
        self.out_dir = out_dir
        self.device = device
        self.progress = progress
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        os.makedirs(out_dir, exist_ok=True)

    @property
    def checkpoint_path(self) -> str:
        return os.path.join(self.out_dir, BEST_CHECKPOINT)

    @property
    def log_path(self) -> str:
        return os.path.join(self.out_dir, TRAIN_LOG)

    def train_epoch(self, loader: DataLoader, epoch: int) -> float:
        """One pass over ``loader``; returns the mean BCE per room."""
        self.model.train()
        total, rooms = 0.0, 0
        dtype = next(self.model.parameters()).dtype
        for batch in tqdm(loader, desc=f"epoch {epoch}", disable=not self.progress, leave=False):
            batch = batch.to(device=self.device, dtype=dtype)
            out = self.model(batch)
            loss = risk_loss(out.logits, batch.labels, self.cfg.loss_reduction)
            if loss.requires_grad:
                self.optimizer.zero_grad()
                loss.backward()
                self.optimizer.step()
            summed = loss.item() * (batch.batch_size if self.cfg.loss_reduction == "mean" else 1)
            total += summed
            rooms += batch.batch_size
        return total / max(rooms, 1)

    def _save(self, path: str, epoch: int, best: float, threshold: float, best_epoch: int) -> None:
        save_checkpoint(path, self.model, self.model_name, self.cfg, epoch, best, threshold, self.optimizer,
                        best_epoch=best_epoch)

    def fit(self, train: RoomDataset, val: RoomDataset, resume: Optional[Checkpoint] = None) -> TrainResult:
        set_seed(self.cfg.seed, self.cfg.deterministic)
        loader = make_loader(train, self.cfg.batch_size, shuffle=True, seed=self.cfg.seed, num_workers=self.cfg.num_workers)

        start_epoch, best, best_epoch, threshold = 1, float("-inf"), 0, 0.5
        rows: List[Dict[str, object]] = []
        if resume is not None:
            if resume.optimizer is not None:
                self.optimizer.load_state_dict(resume.optimizer)
            start_epoch = resume.epoch + 1
            best, best_epoch, threshold = resume.best_pr_auc, resume.best_epoch, resume.threshold
            check = predict(self.model, val, self.cfg.batch_size, self.device)
            logger.info(
                "resumed at epoch %d: val PR-AUC %.6f (stored %.6f)",
                resume.epoch, evaluate_scores(check.scores, check.labels).pr_auc, resume.best_pr_auc,
            )
            if os.path.isfile(self.log_path):
                rows = pd.read_csv(self.log_path).to_dict("records")

        stale = 0
        epoch = start_epoch - 1
        stopped_early = False
        for epoch in range(start_epoch, self.cfg.max_epochs + 1):
            t0 = time.perf_counter()
            train_loss = self.train_epoch(loader, epoch)
            preds = predict(self.model, val, self.cfg.batch_size, self.device)
            report = evaluate_scores(preds.scores, preds.labels)

            improved = report.pr_auc > best
            if improved:
                best, best_epoch, stale = report.pr_auc, epoch, 0
                _, threshold = best_f1(preds.scores, preds.labels)
                self._save(self.checkpoint_path, epoch, best, threshold, best_epoch)
            else:
                stale += 1
            self._save(os.path.join(self.out_dir, LAST_CHECKPOINT), epoch, best, threshold, best_epoch)

            rows.append({
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": preds.loss / max(len(val), 1),
                "val_pr_auc": report.pr_auc,
                "val_f1": report.f1,
                "val_recall_at_fpr01": report.recall_at_fpr01,
                "val_fpr_at_recall09": report.fpr_at_recall09,
                "improved": improved,
                "seconds": round(time.perf_counter() - t0, 3),
            })
            pd.DataFrame(rows).to_csv(self.log_path, index=False)
            logger.info(
                "epoch %d: train loss %.4f, val PR-AUC %.4f%s",
                epoch, train_loss, report.pr_auc, " (best)" if improved else "",
            )
            if stale >= self.cfg.patience:
                stopped_early = True
                logger.info("no val PR-AUC improvement for %d epochs, stopping", stale)
                break

        return TrainResult(
            best_epoch=best_epoch,
            best_pr_auc=best,
            threshold=threshold,
            epochs_run=epoch - start_epoch + 1,
            stopped_early=stopped_early,
            checkpoint_path=self.checkpoint_path,
            log_path=self.log_path,
            history=pd.DataFrame(rows),
        )
