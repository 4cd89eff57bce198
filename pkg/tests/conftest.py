import os
import sys
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from acmil.batching import RoomBatch, RoomDataset, collate_rooms, to_room_tensors
from acmil.config import ModelConfig, PreprocessConfig, ScenarioConfig
from acmil.room_data import ActionEvent, RoomRecord, Role, build_capsule_grid, preprocess_room

D_TEXT = 4

# (user_id, t, action_type_id) or (user_id, t, action_type_id, text)
ActionRow = Tuple


def make_room(
    rows: Iterable[ActionRow],
    room_id: str = "room",
    label: int = 0,
    streamer: str = "s",
    planted: Optional[Iterable[Tuple[str, int]]] = None,
) -> RoomRecord:
    actions = []
    for row in rows:
        user, t, a = row[:3]
        text = tuple(row[3]) if len(row) > 3 and row[3] is not None else None
        role = Role.STREAMER if user == streamer else Role.VIEWER
        actions.append(ActionEvent(user, role, float(t), int(a), text))
    actions.sort(key=lambda ev: ev.timestamp_s)
    return RoomRecord(room_id, streamer, label, tuple(actions), frozenset(planted) if planted is not None else None)


def make_batch(rooms: Sequence[RoomRecord], pre: PreprocessConfig, d_text: int = D_TEXT) -> RoomBatch:
    items = []
    for room in rooms:
        room = preprocess_room(room, pre)
        items.append(to_room_tensors(room, build_capsule_grid(room, pre), d_text))
    return collate_rooms(items)


def make_dataset(rooms: Sequence[RoomRecord], pre: PreprocessConfig, d_text: int = D_TEXT) -> RoomDataset:
    prepared = []
    for room in rooms:
        room = preprocess_room(room, pre)
        prepared.append((room, build_capsule_grid(room, pre)))
    return RoomDataset(prepared, d_text)


def numerical_grad(loss_fn, param: torch.Tensor, index: Tuple[int, ...], eps: float) -> float:
    """Central difference of ``loss_fn()`` with respect to ``param[index]``."""
    original = param[index].item()

    def evaluate(value: float) -> float:
        with torch.no_grad():
            param[index] = value
        # evaluated with grad enabled so attention layers take the same path as backward
        return loss_fn().item()

    plus = evaluate(original + eps)
    minus = evaluate(original - eps)
    with torch.no_grad():
        param[index] = original
    return (plus - minus) / (2 * eps)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def pre():
    return PreprocessConfig(window_s=600.0, slot_len_s=100.0, top_viewers=50, max_actions=256)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(
        d_text=D_TEXT, d_embed=8, d_k=8, num_heads=2, encoder_layers=1, graph_layers=1,
        recurrent_layers=1, dropout=0.0, max_actions=256, batch_size=4, max_epochs=3,
        patience=2, seed=0,
    )


@pytest.fixture
def scenario():
    return ScenarioConfig(
        num_rooms=20, positive_rate=0.3, seed=3, mean_viewers=4, mean_actions_per_viewer=3.0,
        motif_strength=0.8, d_text=D_TEXT, session_s=600.0, slot_len_s=100.0,
    )


@pytest.fixture
def toy_rooms():
    """Two small rooms: the streamer plus two and three viewers, some text-bearing actions."""
    rng = np.random.default_rng(0)
    x = lambda: tuple(float(v) for v in rng.normal(size=D_TEXT))
    a = make_room([
        ("s", 0.0, 10), ("s", 30.0, 11, x()), ("v1", 5.0, 0), ("v1", 20.0, 1, x()),
        ("v1", 150.0, 5), ("v2", 40.0, 0), ("v2", 110.0, 6), ("v2", 250.0, 4, x()),
    ], room_id="a", label=1, planted=[("v1", 0), ("v2", 1)])
    b = make_room([
        ("s", 0.0, 10), ("s", 320.0, 12, x()), ("w1", 10.0, 0), ("w1", 60.0, 6),
        ("w2", 70.0, 0), ("w2", 90.0, 5), ("w3", 400.0, 0), ("w3", 410.0, 1, x()),
        ("w3", 520.0, 7),
    ], room_id="b", label=0)
    return [a, b]


@pytest.fixture
def tiny_model_double(tiny_cfg):
    from acmil.model import ACMIL

    torch.manual_seed(0)
    return ACMIL(tiny_cfg).double()
