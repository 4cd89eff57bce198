"""
Tensorization of preprocessed rooms and padded mini-batches.

Each room becomes a :class:`RoomTensors` (numpy arrays, built once). A list of
them collates into a :class:`RoomBatch`: padded action tensors for the action
encoder, plus flat gather indices so every variable-length group (the actions
of a capsule, the capsules of a user, the capsules of a slot, the nonempty
slots of a room) can be run through one packed RNN or one masked softmax for
the whole batch.
"""

from __future__ import annotations
import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Sequence, Set, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from acmil.errors import FeatureDimensionError
from acmil.room_data import CapsuleGrid, RoomRecord, retained_planted_capsules


@dataclass
class RoomTensors:
    room_id: str
    label: int
    action_ids: np.ndarray  # (N_a,)
    text: np.ndarray  # (N_a, d_text), zeros where absent
    has_text: np.ndarray  # (N_a,)
    action_capsule: np.ndarray  # (N_a,) capsule index of each action
    capsule_user: np.ndarray  # (N_c,) index into users
    capsule_slot: np.ndarray  # (N_c,)
    user_is_streamer: np.ndarray  # (U,)
    users: Tuple[str, ...]
    num_slots: int
    planted: Set[Tuple[str, int]] = dataclasses.field(default_factory=set)

    @property
    def num_actions(self) -> int:
        return int(self.action_ids.shape[0])

    @property
    def num_capsules(self) -> int:
        return int(self.capsule_user.shape[0])

    def capsule_key(self, i: int) -> Tuple[str, int]:
        return self.users[int(self.capsule_user[i])], int(self.capsule_slot[i])


def to_room_tensors(room: RoomRecord, grid: CapsuleGrid, d_text: int) -> RoomTensors:
    n = room.num_actions
    text = np.zeros((n, d_text), dtype=np.float32)
    has_text = np.zeros(n, dtype=bool)
    for i, a in enumerate(room.actions):
        if a.text_feature is None:
            continue
        if len(a.text_feature) != d_text:
            raise FeatureDimensionError(
                f"room {room.room_id!r}: action {i} has text width {len(a.text_feature)}, model expects d_text={d_text}"
            )
        text[i] = a.text_feature
        has_text[i] = True

    return RoomTensors(
        room_id=room.room_id,
        label=room.label,
        action_ids=np.fromiter((a.action_type_id for a in room.actions), dtype=np.int64, count=n),
        text=text,
        has_text=has_text,
        action_capsule=np.asarray(grid.action_capsule, dtype=np.int64),
        capsule_user=np.asarray([ui for ui, _ in grid.capsules], dtype=np.int64),
        capsule_slot=np.asarray([k for _, k in grid.capsules], dtype=np.int64),
        user_is_streamer=np.asarray([grid.is_streamer_user(i) for i in range(len(grid.users))], dtype=bool),
        users=grid.users,
        num_slots=grid.num_slots,
        planted=retained_planted_capsules(room, grid),
    )


def _pad_groups(groups: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    """Ragged index lists -> (padded (G, max_len) with 0 fill, lengths)."""
    lengths = np.asarray([len(g) for g in groups], dtype=np.int64)
    width = int(lengths.max()) if len(groups) else 1
    out = np.zeros((len(groups), max(width, 1)), dtype=np.int64)
    for i, g in enumerate(groups):
        out[i, :len(g)] = g
    return out, lengths


@dataclass
class RoomBatch:
    room_ids: List[str]
    labels: torch.Tensor  # (B,)
    # action level
    action_ids: torch.Tensor  # (B, L)
    text: torch.Tensor  # (B, L, d_text)
    has_text: torch.Tensor  # (B, L)
    action_mask: torch.Tensor  # (B, L) True on real actions
    # capsule sequences: rows of the flattened (B*L) action grid
    capsule_gather: torch.Tensor  # (T_c, M)
    capsule_len: torch.Tensor  # (T_c,)
    capsule_flat: torch.Tensor  # (T_c,) position in the flattened (B*C) capsule grid
    # capsule level, padded to C per room
    capsule_mask: torch.Tensor  # (B, C)
    capsule_user: torch.Tensor  # (B, C), -1 padding
    capsule_slot: torch.Tensor  # (B, C), -1 padding
    capsule_streamer: torch.Tensor  # (B, C)
    # user groups: rows of the flattened (B*C) capsule grid
    user_gather: torch.Tensor  # (T_u, Mu)
    user_len: torch.Tensor  # (T_u,)
    user_flat: torch.Tensor  # (T_u,) position in flattened (B*U)
    user_mask: torch.Tensor  # (B, U)
    user_streamer: torch.Tensor  # (B, U)
    # slot groups: rows of the flattened (B*C) capsule grid
    slot_gather: torch.Tensor  # (T_s, Ms)
    slot_member_mask: torch.Tensor  # (T_s, Ms)
    room_slot_gather: torch.Tensor  # (B, S) rows of the T_s slot list, ascending slot
    room_slot_len: torch.Tensor  # (B,)
    room_slot_index: torch.Tensor  # (B, S) slot number, -1 padding

    @property
    def batch_size(self) -> int:
        return len(self.room_ids)

    def to(self, device: Optional[torch.device] = None, dtype: Optional[torch.dtype] = None) -> "RoomBatch":
        """Move every tensor to ``device``; floating tensors also cast to ``dtype``."""
        changes = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, torch.Tensor):
                continue
            if dtype is not None and value.is_floating_point():
                value = value.to(dtype=dtype)
            if device is not None:
                value = value.to(device)
            changes[f.name] = value
        return dataclasses.replace(self, **changes)


def collate_rooms(items: Sequence[RoomTensors]) -> RoomBatch:
    if not items:
        raise ValueError("cannot collate an empty batch")
    B = len(items)
    L = max(r.num_actions for r in items)
    C = max(r.num_capsules for r in items)
    U = max(len(r.users) for r in items)
    d_text = items[0].text.shape[1]

    action_ids = np.zeros((B, L), dtype=np.int64)
    text = np.zeros((B, L, d_text), dtype=np.float32)
    has_text = np.zeros((B, L), dtype=bool)
    action_mask = np.zeros((B, L), dtype=bool)
    capsule_mask = np.zeros((B, C), dtype=bool)
    capsule_user = np.full((B, C), -1, dtype=np.int64)
    capsule_slot = np.full((B, C), -1, dtype=np.int64)
    capsule_streamer = np.zeros((B, C), dtype=bool)
    user_mask = np.zeros((B, U), dtype=bool)
    user_streamer = np.zeros((B, U), dtype=bool)

    capsule_groups: List[List[int]] = []
    capsule_flat: List[int] = []
    user_groups: List[List[int]] = []
    user_flat: List[int] = []
    slot_groups: List[List[int]] = []
    room_slots: List[List[int]] = []
    room_slot_numbers: List[List[int]] = []

    for b, r in enumerate(items):
        n, c, u = r.num_actions, r.num_capsules, len(r.users)
        action_ids[b, :n] = r.action_ids
        text[b, :n] = r.text
        has_text[b, :n] = r.has_text
        action_mask[b, :n] = True
        capsule_mask[b, :c] = True
        capsule_user[b, :c] = r.capsule_user
        capsule_slot[b, :c] = r.capsule_slot
        capsule_streamer[b, :c] = r.user_is_streamer[r.capsule_user]
        user_mask[b, :u] = True
        user_streamer[b, :u] = r.user_is_streamer

        # actions are time-sorted, so each capsule's members come out in time order
        members: List[List[int]] = [[] for _ in range(c)]
        for i, cap in enumerate(r.action_capsule):
            members[int(cap)].append(b * L + i)
        capsule_groups.extend(members)
        capsule_flat.extend(b * C + i for i in range(c))

        # capsules are ordered user-major, slot-minor
        per_user: List[List[int]] = [[] for _ in range(u)]
        for i in range(c):
            per_user[int(r.capsule_user[i])].append(b * C + i)
        user_groups.extend(per_user)
        user_flat.extend(b * U + i for i in range(u))

        per_slot = {}
        for i in range(c):
            per_slot.setdefault(int(r.capsule_slot[i]), []).append(b * C + i)
        ordered = sorted(per_slot)
        room_slots.append(list(range(len(slot_groups), len(slot_groups) + len(ordered))))
        room_slot_numbers.append(ordered)
        slot_groups.extend(per_slot[k] for k in ordered)

    capsule_gather, capsule_len = _pad_groups(capsule_groups)
    user_gather, user_len = _pad_groups(user_groups)
    slot_gather, slot_len = _pad_groups(slot_groups)
    slot_member_mask = np.arange(slot_gather.shape[1])[None, :] < slot_len[:, None]
    room_slot_gather, room_slot_len = _pad_groups(room_slots)
    room_slot_index = np.full(room_slot_gather.shape, -1, dtype=np.int64)
    for b, ks in enumerate(room_slot_numbers):
        room_slot_index[b, :len(ks)] = ks

    t = torch.from_numpy
    return RoomBatch(
        room_ids=[r.room_id for r in items],
        labels=torch.tensor([float(r.label) for r in items]),
        action_ids=t(action_ids),
        text=t(text),
        has_text=t(has_text),
        action_mask=t(action_mask),
        capsule_gather=t(capsule_gather),
        capsule_len=t(capsule_len),
        capsule_flat=torch.tensor(capsule_flat, dtype=torch.long),
        capsule_mask=t(capsule_mask),
        capsule_user=t(capsule_user),
        capsule_slot=t(capsule_slot),
        capsule_streamer=t(capsule_streamer),
        user_gather=t(user_gather),
        user_len=t(user_len),
        user_flat=torch.tensor(user_flat, dtype=torch.long),
        user_mask=t(user_mask),
        user_streamer=t(user_streamer),
        slot_gather=t(slot_gather),
        slot_member_mask=t(slot_member_mask),
        room_slot_gather=t(room_slot_gather),
        room_slot_len=t(room_slot_len),
        room_slot_index=t(room_slot_index),
    )


class RoomDataset(Dataset):
    """Tensorized rooms kept in memory; index order is the corpus order."""

    def __init__(self, prepared: Sequence[Tuple[RoomRecord, CapsuleGrid]], d_text: int):
        self.rooms = [room for room, _ in prepared]
        self.grids = [grid for _, grid in prepared]
        self.items = [to_room_tensors(room, grid, d_text) for room, grid in prepared]

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, idx: int) -> RoomTensors:
        return self.items[idx]

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([r.label for r in self.items], dtype=np.int64)
