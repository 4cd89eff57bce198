import json

import numpy as np
import pytest

from acmil.config import PreprocessConfig
from acmil.errors import EmptyRoomError, RoomSchemaError
from acmil.room_data import (
    DEFAULT_VOCABULARY,
    ActionType,
    build_capsule_grid,
    parse_room,
    prepare_rooms,
    preprocess_room,
    read_rooms_jsonl,
    retained_planted_capsules,
    room_to_json,
    slot_of,
    write_rooms_jsonl,
)

from conftest import make_room


def _record(actions, **extra):
    record = {"room_id": "r1", "label": 0, "streamer_id": "s", "actions": actions}
    record.update(extra)
    return record


def _act(user, t, a, role=None, x=None):
    return {"user_id": user, "role": role or ("streamer" if user == "s" else "viewer"), "t": t, "a": a, "x": x}


# ---- parse_room ----

def test_minimal_room():
    room = parse_room(_record([_act("s", 0.0, 10)]))
    assert room.num_actions == 1
    assert room.label == 0
    assert room.planted_capsules is None


def test_multiple_streamers_rejected():
    record = _record([_act("s", 0.0, 10), _act("s2", 1.0, 11, role="streamer")])
    with pytest.raises(RoomSchemaError, match="multiple streamers"):
        parse_room(record)


def test_unsorted_timestamps_resorted_stably():
    record = _record([
        _act("s", 5.0, 10), _act("v", 1.0, 0), _act("v", 3.0, 1), _act("w", 3.0, 6),
    ])
    room = parse_room(record)
    assert [a.timestamp_s for a in room.actions] == [1.0, 3.0, 3.0, 5.0]
    # equal timestamps keep input order
    assert [a.user_id for a in room.actions[1:3]] == ["v", "w"]


def test_unknown_action_id_has_field_path():
    record = _record([_act("s", 0.0, 10), _act("v", 1.0, 0), _act("v", 2.0, 0), _act("v", 3.0, 42)])
    with pytest.raises(RoomSchemaError) as info:
        parse_room(record)
    assert info.value.path == "actions[3].a"
    assert "room 'r1'" in str(info.value)
    assert "unknown action_type_id" in str(info.value)


def test_role_partition_enforced():
    with pytest.raises(RoomSchemaError, match="not a viewer action"):
        parse_room(_record([_act("s", 0.0, 10), _act("v", 1.0, ActionType.ASR_SPEECH)]))


def test_missing_field():
    record = _record([_act("s", 0.0, 10)])
    del record["label"]
    with pytest.raises(RoomSchemaError, match="label"):
        parse_room(record)


def test_streamer_id_with_viewer_role():
    with pytest.raises(RoomSchemaError, match="streamer_id appears with role viewer"):
        parse_room(_record([_act("s", 0.0, 10), _act("s", 1.0, 1, role="viewer")]))


def test_inconsistent_text_width():
    record = _record([_act("s", 0.0, 11, x=[0.1, 0.2]), _act("v", 1.0, 1, x=[0.3])])
    with pytest.raises(RoomSchemaError, match="text feature width"):
        parse_room(record)


def test_jsonl_round_trip_and_line_errors(tmp_path):
    room = make_room([("s", 0.0, 10), ("v", 2.5, 1, (0.5, -1.0)), ("v", 1.0, 0)],
                     room_id="x", label=1, planted=[("v", 0)])
    path = tmp_path / "rooms.jsonl"
    assert write_rooms_jsonl(str(path), [room, room]) == 2
    assert read_rooms_jsonl(str(path)) == [room, room]

    bad = dict(room_to_json(room), label=3)
    path.write_text(json.dumps(room_to_json(room)) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(RoomSchemaError, match="line 2"):
        read_rooms_jsonl(str(path))


# ---- preprocess_room ----

def test_window_truncation():
    cfg = PreprocessConfig()
    room = make_room([("s", 0.0, 10), ("s", 1800.0, 11), ("s", 1801.0, 11)])
    out = preprocess_room(room, cfg)
    assert [a.timestamp_s for a in out.actions] == [0.0, 1800.0]


def test_entry_only_viewer_removed():
    room = make_room([("s", 0.0, 10), ("v", 1.0, 0), ("w", 2.0, 0), ("w", 3.0, 1)])
    out = preprocess_room(room, PreprocessConfig())
    assert {a.user_id for a in out.actions} == {"s", "w"}


def test_entry_ids_come_from_preprocess_config():
    room = make_room([("s", 0.0, 10), ("v", 1.0, 0), ("v", 2.0, 6), ("w", 3.0, 0), ("w", 4.0, 1)])
    # treating likes as entries leaves v with nothing but entries
    out = preprocess_room(room, PreprocessConfig(entry_action_ids=(0, 6)))
    assert {a.user_id for a in out.actions} == {"s", "w"}
    assert not hasattr(DEFAULT_VOCABULARY, "entry_ids")


def test_entry_only_filter_can_be_disabled():
    room = make_room([("s", 0.0, 10), ("v", 1.0, 0)])
    out = preprocess_room(room, PreprocessConfig(drop_entry_only_viewers=False))
    assert out.num_actions == 2


def test_top_viewers_against_sort_and_slice_oracle():
    rng = np.random.default_rng(11)
    rows = [("s", 0.0, 10)]
    for v in range(60):
        n = int(rng.integers(1, 6))
        times = np.sort(rng.uniform(0, 1700, size=n))
        rows.append((f"v{v:02d}", float(times[0]), 1))
        rows.extend((f"v{v:02d}", float(t), 6) for t in times[1:])
    room = make_room(rows)
    out = preprocess_room(room, PreprocessConfig(top_viewers=50))

    stats = {}
    for a in room.actions:
        if a.user_id == "s":
            continue
        count, first = stats.get(a.user_id, (0, a.timestamp_s))
        stats[a.user_id] = (count + 1, first)
    expected = sorted(stats, key=lambda u: (-stats[u][0], stats[u][1], u))[:50]
    assert {a.user_id for a in out.actions} - {"s"} == set(expected)
    assert any(a.user_id == "s" for a in out.actions)


def test_max_actions_keeps_earliest():
    room = make_room([("s", float(t), 11) for t in range(10)])
    out = preprocess_room(room, PreprocessConfig(max_actions=4))
    assert [a.timestamp_s for a in out.actions] == [0.0, 1.0, 2.0, 3.0]


def test_empty_after_preprocessing():
    room = make_room([("s", 2000.0, 10)], room_id="late")
    with pytest.raises(EmptyRoomError, match="room 'late': empty after preprocessing"):
        preprocess_room(room, PreprocessConfig())


def test_prepare_rooms_skips_empty(caplog):
    rooms = [make_room([("s", 2000.0, 10)], room_id="late"), make_room([("s", 0.0, 10)], room_id="ok")]
    prepared = prepare_rooms(rooms, PreprocessConfig())
    assert [r.room_id for r, _ in prepared] == ["ok"]
    assert "late" in caplog.text


def test_preprocess_idempotent_and_deterministic():
    rng = np.random.default_rng(5)
    rows = [("s", 0.0, 10)]
    for v in range(30):
        for t in np.sort(rng.uniform(0, 2000, size=int(rng.integers(1, 5)))):
            rows.append((f"v{v}", float(t), int(rng.choice([0, 1, 5, 6]))))
    room = make_room(rows)
    cfg = PreprocessConfig(top_viewers=10, max_actions=25)
    once = preprocess_room(room, cfg)
    assert preprocess_room(once, cfg) == once
    assert preprocess_room(room, cfg) == once


# ---- build_capsule_grid ----

def test_slot_assignment():
    assert slot_of(150.0, 100.0, 18) == 1
    assert slot_of(0.0, 100.0, 18) == 0
    # the window end closes the last slot
    assert slot_of(1800.0, 100.0, 18) == 17


def test_sparse_cells_and_row_major_order():
    room = make_room([
        ("s", 0.0, 10), ("s", 1750.0, 11),
        ("v", 10.0, 1), ("v", 20.0, 6), ("v", 250.0, 5),
        ("w", 120.0, 1), ("w", 130.0, 6), ("w", 140.0, 5), ("w", 990.0, 6), ("w", 1500.0, 1),
    ])
    grid = build_capsule_grid(room, PreprocessConfig())
    assert grid.num_slots == 18
    assert grid.users == ("s", "w", "v")
    # brute-force enumeration of nonempty cells
    cells = sorted({(grid.users.index(a.user_id), int(a.timestamp_s // 100)) for a in room.actions})
    assert list(grid.capsules) == cells
    assert grid.num_capsules == 7
    assert grid.capsule_index == {cell: i for i, cell in enumerate(cells)}
    v = grid.users.index("v")
    assert [k for ui, k in grid.capsules if ui == v] == [0, 2]


def test_grid_partitions_actions():
    room = make_room([("s", 0.0, 10), ("v", 5.0, 1), ("v", 6.0, 6), ("v", 700.0, 5), ("w", 5.5, 6)])
    grid = build_capsule_grid(room, PreprocessConfig())
    members = sorted(i for cell in grid.cells.values() for i in cell)
    assert members == list(range(room.num_actions))
    for (ui, k), idx in grid.cells.items():
        times = [room.actions[i].timestamp_s for i in idx]
        assert times == sorted(times)
        assert all(int(t // grid.slot_len_s) == k for t in times)
        assert all(room.actions[i].user_id == grid.users[ui] for i in idx)
    for i, cap in enumerate(grid.action_capsule):
        assert i in grid.cells[grid.capsules[cap]]


def test_retained_planted_capsules():
    room = make_room([("s", 0.0, 10), ("v", 5.0, 1)], planted=[("v", 0), ("gone", 3)])
    grid = build_capsule_grid(room, PreprocessConfig())
    assert retained_planted_capsules(room, grid) == {("v", 0)}
