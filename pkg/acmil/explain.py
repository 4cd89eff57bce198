"""
Capsule attribution export: one JSON line per room plus a user x slot CSV grid per room.
"""

from __future__ import annotations
import json
import os
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Set, Tuple

import numpy as np
import pandas as pd

from acmil.batching import RoomDataset
from acmil.errors import AcmilError
from acmil.metrics import attribution_hit_rate
from acmil.reasoner import RiskAttribution, attribution_for_room
from acmil.trainer import Predictions


@dataclass
class RoomExplanation:
    room_id: str
    label: int
    score: float
    num_slots: int
    attribution: RiskAttribution
    user_weights: Optional[Dict[str, float]] = None
    hit_rate: Optional[float] = None

    def to_json(self) -> Dict[str, object]:
        record: Dict[str, object] = {
            "room_id": self.room_id,
            "label": self.label,
            "score": self.score,
            "capsules": self.attribution.as_records(),
        }
        if self.user_weights is not None:
            record["users"] = [{"user_id": u, "weight": w} for u, w in self.user_weights.items()]
        if self.hit_rate is not None:
            record["hit_rate"] = self.hit_rate
        return record

    def grid(self) -> pd.DataFrame:
        """Dense user x slot attribution, 0 for empty cells; users in first-appearance order."""
        users = list(dict.fromkeys(u for u, _ in self.attribution.keys))
        frame = pd.DataFrame(0.0, index=pd.Index(users, name="user_id"), columns=range(self.num_slots))
        for (user, slot), score in zip(self.attribution.keys, self.attribution.scores):
            frame.at[user, slot] = score
        return frame


def explain_rooms(dataset: RoomDataset, predictions: Predictions, seed: int = 0) -> List[RoomExplanation]:
    """Pair model outputs with capsule keys. Hit rates are filled for rooms with planted capsules."""
    if any(a is None for a in predictions.attribution):
        raise AcmilError("this model produces no capsule attribution")
    rng = np.random.default_rng(seed)
    explanations = []
    for i, item in enumerate(dataset.items):
        keys = [item.capsule_key(j) for j in range(item.num_capsules)]
        attribution = attribution_for_room(keys, predictions.attribution[i])
        weights = predictions.user_weights[i]
        explanations.append(RoomExplanation(
            room_id=item.room_id,
            label=item.label,
            score=float(predictions.scores[i]),
            num_slots=item.num_slots,
            attribution=attribution,
            user_weights=None if weights is None else dict(zip(item.users, (float(w) for w in weights))),
            hit_rate=attribution_hit_rate(attribution.scores, keys, item.planted, rng=rng),
        ))
    return explanations


def _safe_stem(room_id: str) -> str:
    """Room id made safe to use as a file name."""
    stem = re.sub(r"[^A-Za-z0-9._-]+", "_", room_id).strip("._")
    return stem or "room"


def write_attribution(path: str, explanations: Iterable[RoomExplanation]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for exp in explanations:
            f.write(json.dumps(exp.to_json(), separators=(",", ":")) + "\n")
            count += 1
    return count


def write_grids(directory: str, explanations: Iterable[RoomExplanation]) -> List[Tuple[str, str]]:
    """One ``<room>.csv`` per room; returns (room_id, path) pairs.

    Room ids that sanitize to the same stem get ``-2``, ``-3``, ... suffixes in input order.
    """
    os.makedirs(directory, exist_ok=True)
    written = []
    taken: Set[str] = set()
    for exp in explanations:
        stem = base = _safe_stem(exp.room_id)
        n = 1
        while stem in taken:
            n += 1
            stem = f"{base}-{n}"
        taken.add(stem)
        path = os.path.join(directory, f"{stem}.csv")
        exp.grid().to_csv(path)
        written.append((exp.room_id, path))
    return written
