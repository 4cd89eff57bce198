"""
Room records: domain types, JSONL ingestion, preprocessing and capsule grids.

A room is the time-ordered list of role-based actions (user, t, action id,
optional text feature). Preprocessing truncates to the observation window,
drops viewers that only entered, keeps the most active viewers and caps the
sequence length. The capsule grid then partitions the surviving actions into
user x timeslot cells; only nonempty cells become capsules.
"""

from __future__ import annotations
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Any, Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

from acmil.config import PreprocessConfig
from acmil.errors import EmptyRoomError, RoomSchemaError

logger = logging.getLogger(__name__)


class ActionType(IntEnum):
    # viewer side
    ENTRY = 0
    COMMENT = 1
    HIGHLIGHT = 2
    LEADERBOARD = 3
    DANMAKU = 4
    GIFT = 5
    LIKE = 6
    SHARE = 7
    CO_STREAM = 8
    GROUP_JOIN = 9
    # streamer side
    STREAM_START = 10
    ASR_SPEECH = 11
    OCR_FRAME = 12


class Role(str, Enum):
    STREAMER = "streamer"
    VIEWER = "viewer"


@dataclass(frozen=True)
class ActionVocabulary:
    """Action ids partitioned by role, plus the ids that carry text features."""

    streamer_ids: FrozenSet[int]
    viewer_ids: FrozenSet[int]
    text_ids: FrozenSet[int]

    def __post_init__(self):
        if self.streamer_ids & self.viewer_ids:
            raise ValueError("streamer and viewer action ids must be disjoint")

    @property
    def size(self) -> int:
        return max(self.streamer_ids | self.viewer_ids) + 1

    def allowed(self, role: Role) -> FrozenSet[int]:
        return self.streamer_ids if role is Role.STREAMER else self.viewer_ids


DEFAULT_VOCABULARY = ActionVocabulary(
    streamer_ids=frozenset({ActionType.STREAM_START, ActionType.ASR_SPEECH, ActionType.OCR_FRAME}),
    viewer_ids=frozenset(a for a in ActionType if a < ActionType.STREAM_START),
    text_ids=frozenset({ActionType.COMMENT, ActionType.HIGHLIGHT, ActionType.DANMAKU,
                        ActionType.ASR_SPEECH, ActionType.OCR_FRAME}),
)


@dataclass(frozen=True)
class ActionEvent:
    user_id: str
    role: Role
    timestamp_s: float
    action_type_id: int
    text_feature: Optional[Tuple[float, ...]] = None


@dataclass(frozen=True)
class RoomRecord:
    room_id: str
    streamer_id: str
    label: int
    actions: Tuple[ActionEvent, ...]
    planted_capsules: Optional[FrozenSet[Tuple[str, int]]] = None

    @property
    def num_actions(self) -> int:
        return len(self.actions)

    def action_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for a in self.actions:
            counts[a.user_id] = counts.get(a.user_id, 0) + 1
        return counts


@dataclass(frozen=True)
class CapsuleGrid:
    """Sparse user x timeslot partition of a room's actions.

    ``users[0]`` is the streamer whenever the streamer has retained actions.
    ``capsules`` lists nonempty cells in row-major order (user, then slot);
    a capsule's index is its position in that list.
    """

    slot_len_s: float
    num_slots: int
    streamer_id: str
    users: Tuple[str, ...]
    cells: Dict[Tuple[int, int], Tuple[int, ...]]
    capsules: Tuple[Tuple[int, int], ...]
    action_capsule: Tuple[int, ...] = field(default=())

    @property
    def num_capsules(self) -> int:
        return len(self.capsules)

    @property
    def capsule_index(self) -> Dict[Tuple[int, int], int]:
        return {cell: i for i, cell in enumerate(self.capsules)}

    def capsule_key(self, i: int) -> Tuple[str, int]:
        """(user_id, slot_index) of capsule i."""
        ui, k = self.capsules[i]
        return self.users[ui], k

    def is_streamer_user(self, ui: int) -> bool:
        return self.users[ui] == self.streamer_id


# ---- Parsing ----

def _require(record: Dict[str, Any], key: str, path: str, room_id: Optional[str]) -> Any:
    if key not in record:
        raise RoomSchemaError("missing field", f"{path}{key}" if path else key, room_id)
    return record[key]


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def parse_room(record: Any, vocab: ActionVocabulary = DEFAULT_VOCABULARY) -> RoomRecord:
    """Validate one decoded JSONL object and build a RoomRecord (actions stably sorted by time)."""
    if not isinstance(record, dict):
        raise RoomSchemaError(f"expected an object, got {type(record).__name__}")

    room_id = _require(record, "room_id", "", None)
    if not isinstance(room_id, str):
        raise RoomSchemaError("must be a string", "room_id")
    label = _require(record, "label", "", room_id)
    if isinstance(label, bool) or label not in (0, 1):
        raise RoomSchemaError(f"must be 0 or 1, got {label!r}", "label", room_id)
    streamer_id = _require(record, "streamer_id", "", room_id)
    if not isinstance(streamer_id, str):
        raise RoomSchemaError("must be a string", "streamer_id", room_id)
    raw_actions = _require(record, "actions", "", room_id)
    if not isinstance(raw_actions, list):
        raise RoomSchemaError("must be a list", "actions", room_id)

    actions: List[ActionEvent] = []
    streamers: Set[str] = set()
    text_dim: Optional[int] = None
    for i, raw in enumerate(raw_actions):
        path = f"actions[{i}]."
        if not isinstance(raw, dict):
            raise RoomSchemaError("expected an object", f"actions[{i}]", room_id)
        user_id = _require(raw, "user_id", path, room_id)
        if not isinstance(user_id, str):
            raise RoomSchemaError("must be a string", path + "user_id", room_id)
        try:
            role = Role(_require(raw, "role", path, room_id))
        except ValueError:
            raise RoomSchemaError(f"unknown role {raw['role']!r}", path + "role", room_id)
        t = _require(raw, "t", path, room_id)
        if not _is_number(t) or t < 0:
            raise RoomSchemaError(f"must be a non-negative number, got {t!r}", path + "t", room_id)
        a = _require(raw, "a", path, room_id)
        if isinstance(a, bool) or not isinstance(a, int) or a not in (vocab.streamer_ids | vocab.viewer_ids):
            raise RoomSchemaError(f"unknown action_type_id {a!r}", path + "a", room_id)
        if a not in vocab.allowed(role):
            raise RoomSchemaError(f"action_type_id {a} is not a {role.value} action", path + "a", room_id)
        x = raw.get("x")
        feature: Optional[Tuple[float, ...]] = None
        if x is not None:
            if not isinstance(x, list) or not x or not all(_is_number(v) for v in x):
                raise RoomSchemaError("must be a non-empty list of finite numbers or null", path + "x", room_id)
            if text_dim is None:
                text_dim = len(x)
            elif len(x) != text_dim:
                raise RoomSchemaError(f"text feature width {len(x)} != {text_dim}", path + "x", room_id)
            feature = tuple(float(v) for v in x)

        if role is Role.STREAMER:
            streamers.add(user_id)
        elif user_id == streamer_id:
            raise RoomSchemaError("streamer_id appears with role viewer", path + "role", room_id)
        actions.append(ActionEvent(user_id, role, float(t), int(a), feature))

    if len(streamers) > 1:
        raise RoomSchemaError(f"multiple streamers: {sorted(streamers)}", "actions", room_id)
    if not streamers:
        raise RoomSchemaError("no streamer actions", "actions", room_id)
    if streamer_id not in streamers:
        raise RoomSchemaError(f"streamer actions belong to {next(iter(streamers))!r}", "streamer_id", room_id)

    planted = record.get("planted_capsules")
    planted_set: Optional[FrozenSet[Tuple[str, int]]] = None
    if planted is not None:
        if not isinstance(planted, list):
            raise RoomSchemaError("must be a list of [user_id, slot] pairs or null", "planted_capsules", room_id)
        cells = []
        for j, pair in enumerate(planted):
            ok = (isinstance(pair, list) and len(pair) == 2 and isinstance(pair[0], str)
                  and isinstance(pair[1], int) and not isinstance(pair[1], bool) and pair[1] >= 0)
            if not ok:
                raise RoomSchemaError("expected [user_id, slot]", f"planted_capsules[{j}]", room_id)
            cells.append((pair[0], pair[1]))
        planted_set = frozenset(cells)

    # sorted() is stable, so ties keep input order
    actions.sort(key=lambda ev: ev.timestamp_s)
    return RoomRecord(room_id, streamer_id, int(label), tuple(actions), planted_set)


def room_to_json(room: RoomRecord) -> Dict[str, Any]:
    return {
        "room_id": room.room_id,
        "label": room.label,
        "streamer_id": room.streamer_id,
        "actions": [
            {
                "user_id": a.user_id,
                "role": a.role.value,
                "t": a.timestamp_s,
                "a": a.action_type_id,
                "x": list(a.text_feature) if a.text_feature is not None else None,
            }
            for a in room.actions
        ],
        "planted_capsules": (
            [[u, k] for u, k in sorted(room.planted_capsules)]
            if room.planted_capsules is not None else None
        ),
    }


def iter_rooms_jsonl(path: str, vocab: ActionVocabulary = DEFAULT_VOCABULARY) -> Iterator[RoomRecord]:
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RoomSchemaError(f"line {lineno}: invalid JSON ({exc.msg})")
            try:
                yield parse_room(record, vocab)
            except RoomSchemaError as exc:
                raise RoomSchemaError(f"line {lineno}: {exc}") from exc


def read_rooms_jsonl(path: str, vocab: ActionVocabulary = DEFAULT_VOCABULARY) -> List[RoomRecord]:
    return list(iter_rooms_jsonl(path, vocab))


def write_rooms_jsonl(path: str, rooms: Iterable[RoomRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for room in rooms:
            f.write(json.dumps(room_to_json(room), separators=(",", ":")))
            f.write("\n")
            n += 1
    return n


# ---- Preprocessing ----

def _rank_viewers(actions: Sequence[ActionEvent], streamer_id: str) -> List[str]:
    """Viewers by descending action count, then earliest first action, then user_id."""
    counts: Dict[str, int] = {}
    first_t: Dict[str, float] = {}
    for a in actions:
        if a.user_id == streamer_id:
            continue
        counts[a.user_id] = counts.get(a.user_id, 0) + 1
        first_t.setdefault(a.user_id, a.timestamp_s)
    return sorted(counts, key=lambda u: (-counts[u], first_t[u], u))


def _drop_entry_only(actions: List[ActionEvent], streamer_id: str, entry_ids: FrozenSet[int]) -> List[ActionEvent]:
    active: Set[str] = set()
    for a in actions:
        if a.user_id != streamer_id and a.action_type_id not in entry_ids:
            active.add(a.user_id)
    return [a for a in actions if a.user_id == streamer_id or a.user_id in active]


def preprocess_room(room: RoomRecord, cfg: PreprocessConfig) -> RoomRecord:
    """Window truncation, inactive-viewer filtering, top-viewer selection, length cap."""
    entry_ids = frozenset(cfg.entry_action_ids)

    # 1. Observation window
    actions = [a for a in room.actions if a.timestamp_s <= cfg.window_s]

    # 2. Viewers that only entered the room
    if cfg.drop_entry_only_viewers:
        actions = _drop_entry_only(actions, room.streamer_id, entry_ids)

    # 3. Most active viewers; the streamer is kept outside the cap
    kept = set(_rank_viewers(actions, room.streamer_id)[:cfg.top_viewers])
    actions = [a for a in actions if a.user_id == room.streamer_id or a.user_id in kept]

    # 4. Earliest max_actions events
    actions = actions[:cfg.max_actions]

    # the cap can leave a viewer with only its entry; re-filter so the result is a fixed point
    if cfg.drop_entry_only_viewers:
        actions = _drop_entry_only(actions, room.streamer_id, entry_ids)

    if not actions:
        raise EmptyRoomError(room.room_id)
    return replace(room, actions=tuple(actions))


# ---- Capsule grid ----

def slot_of(timestamp_s: float, slot_len_s: float, num_slots: int) -> int:
    k = int(math.floor(timestamp_s / slot_len_s))
    # an action exactly at the window end belongs to the last slot
    if k == num_slots and timestamp_s == num_slots * slot_len_s:
        return num_slots - 1
    return k


def build_capsule_grid(room: RoomRecord, cfg: PreprocessConfig) -> CapsuleGrid:
    num_slots = cfg.num_slots
    counts = room.action_counts()
    users: List[str] = [room.streamer_id] if room.streamer_id in counts else []
    users.extend(_rank_viewers(room.actions, room.streamer_id))
    user_index = {u: i for i, u in enumerate(users)}

    cells: Dict[Tuple[int, int], List[int]] = {}
    for idx, a in enumerate(room.actions):
        k = slot_of(a.timestamp_s, cfg.slot_len_s, num_slots)
        if k >= num_slots:
            raise ValueError(
                f"room {room.room_id!r}: action at t={a.timestamp_s} is outside the "
                f"{cfg.window_s}s window; preprocess the room first"
            )
        cells.setdefault((user_index[a.user_id], k), []).append(idx)

    capsules = tuple(sorted(cells))
    index = {cell: i for i, cell in enumerate(capsules)}
    action_capsule = [0] * room.num_actions
    for cell, members in cells.items():
        for idx in members:
            action_capsule[idx] = index[cell]

    return CapsuleGrid(
        slot_len_s=cfg.slot_len_s,
        num_slots=num_slots,
        streamer_id=room.streamer_id,
        users=tuple(users),
        cells={cell: tuple(members) for cell, members in cells.items()},
        capsules=capsules,
        action_capsule=tuple(action_capsule),
    )


def retained_planted_capsules(room: RoomRecord, grid: CapsuleGrid) -> Set[Tuple[str, int]]:
    """Ground-truth capsules that still exist after preprocessing."""
    if not room.planted_capsules:
        return set()
    present = {grid.capsule_key(i) for i in range(grid.num_capsules)}
    return set(room.planted_capsules) & present


def prepare_rooms(
    rooms: Iterable[RoomRecord],
    cfg: PreprocessConfig,
) -> List[Tuple[RoomRecord, CapsuleGrid]]:
    """Preprocess and grid every room, skipping rooms left empty."""
    prepared: List[Tuple[RoomRecord, CapsuleGrid]] = []
    skipped = 0
    for room in rooms:
        try:
            clean = preprocess_room(room, cfg)
        except EmptyRoomError as exc:
            logger.warning("skipping %s", exc)
            skipped += 1
            continue
        prepared.append((clean, build_capsule_grid(clean, cfg)))
    if skipped:
        logger.info("skipped %d empty room(s) out of %d", skipped, skipped + len(prepared))
    return prepared
