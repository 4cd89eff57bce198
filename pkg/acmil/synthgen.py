"""
Synthetic live-room corpus with planted collusion motifs.

Every room, benign or not, carries the same coordinated-looking skeleton: one
extra streamer speech action in some slot k* and 2-5 "burst" viewers that
each act in two consecutive slots. Burst viewers are taken out of the Poisson
audience and their expected action count matches mean_actions_per_viewer, so
a room still averages mean_viewers * mean_actions_per_viewer viewer actions.
In benign rooms the bursts land in independent slots and use benign action
types and text. In fraud rooms each burst viewer aligns with k* with
probability ``motif_strength``, burst actions switch to motif types with the
same probability, and motif text is shifted along a fixed direction by
``motif_strength`` noise standard deviations per dimension. At strength 0
both classes are identically distributed, which is what the null-signal
control relies on.
"""

from __future__ import annotations
import dataclasses
import functools
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from tqdm import tqdm

from acmil.config import ScenarioConfig
from acmil.room_data import (
    DEFAULT_VOCABULARY,
    ActionEvent,
    ActionType,
    Role,
    RoomRecord,
    slot_of,
    write_rooms_jsonl,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

_BENIGN_TYPES = np.array([
    ActionType.COMMENT, ActionType.HIGHLIGHT, ActionType.LEADERBOARD, ActionType.DANMAKU,
    ActionType.GIFT, ActionType.LIKE, ActionType.SHARE, ActionType.CO_STREAM, ActionType.GROUP_JOIN,
])
_BENIGN_P = np.array([0.25, 0.03, 0.03, 0.15, 0.05, 0.35, 0.05, 0.02, 0.07])

_MOTIF_TYPES = {
    "promotion": (np.array([ActionType.GIFT, ActionType.COMMENT, ActionType.SHARE]),
                  np.array([0.40, 0.45, 0.15])),
    "like_burst": (np.array([ActionType.LIKE, ActionType.COMMENT]),
                   np.array([0.85, 0.15])),
}
# extra likes per burst slot at full strength
_LIKE_BURST_EXTRA = 8

_ASR_PERIOD_S = 60.0
_OCR_PERIOD_S = 120.0


@dataclasses.dataclass(frozen=True)
class FeatureSpace:
    centroids: np.ndarray  # (num_action_types, d_text)
    shift_direction: np.ndarray  # (d_text,), +-1 entries


@functools.lru_cache(maxsize=8)
def feature_space(seed: int, d_text: int, vocab_size: int) -> FeatureSpace:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFEA7]))
    centroids = rng.normal(0.0, 1.0, size=(vocab_size, d_text))
    direction = rng.choice(np.array([-1.0, 1.0]), size=d_text)
    return FeatureSpace(centroids, direction)


def _space(cfg: ScenarioConfig) -> FeatureSpace:
    if cfg.vocab_size != DEFAULT_VOCABULARY.size:
        raise ValueError(f"vocab_size must be {DEFAULT_VOCABULARY.size} for the built-in action vocabulary")
    return feature_space(cfg.seed, cfg.d_text, cfg.vocab_size)


class _RoomBuilder:
    """Accumulates actions for one room and hands out unique opaque user ids."""

    def __init__(self, rng: np.random.Generator, cfg: ScenarioConfig, space: FeatureSpace):
        self.rng = rng
        self.cfg = cfg
        self.space = space
        self.actions: List[ActionEvent] = []
        self.used_ids: Set[str] = set()
        self.planted: List[Tuple[str, float]] = []

    def new_user(self) -> str:
        while True:
            uid = f"u{int(self.rng.integers(0, 2 ** 32)):08x}"
            if uid not in self.used_ids:
                self.used_ids.add(uid)
                return uid

    def text(self, a: int, shift: float) -> Optional[Tuple[float, ...]]:
        if a not in DEFAULT_VOCABULARY.text_ids:
            return None
        x = self.space.centroids[a] + shift * self.space.shift_direction
        x = x + self.rng.normal(0.0, 1.0, size=x.shape)
        return tuple(round(float(v), 5) for v in x)

    def add(self, user_id: str, role: Role, t: float, a: int, shift: float = 0.0, planted: bool = False) -> None:
        t = round(float(t), 3)
        self.actions.append(ActionEvent(user_id, role, t, int(a), self.text(a, shift)))
        if planted:
            self.planted.append((user_id, t))

    def slot_time(self, k: int) -> float:
        lo = k * self.cfg.slot_len_s
        hi = min((k + 1) * self.cfg.slot_len_s, self.cfg.session_s)
        t = float(self.rng.uniform(lo, hi))
        # timestamps are rounded to ms; keep the rounded value inside slot k
        return max(lo, min(t, hi - 1e-3))

    def record(self, room_id: str, streamer: str, label: int, keep_planted: bool) -> RoomRecord:
        actions = sorted(self.actions, key=lambda ev: ev.timestamp_s)
        planted = None
        if keep_planted:
            planted = frozenset(
                (u, slot_of(t, self.cfg.slot_len_s, self.cfg.num_slots)) for u, t in self.planted
            )
        return RoomRecord(room_id, streamer, label, tuple(actions), planted)


def _room_id(rng: np.random.Generator) -> str:
    return f"room-{int(rng.integers(0, 2 ** 48)):012x}"


def _base_room(b: _RoomBuilder, streamer: str, num_viewers: int) -> None:
    cfg, rng = b.cfg, b.rng
    # streamer: stream start, then periodic speech and OCR frames with jitter
    b.add(streamer, Role.STREAMER, 0.0, ActionType.STREAM_START)
    for a, period in ((ActionType.ASR_SPEECH, _ASR_PERIOD_S), (ActionType.OCR_FRAME, _OCR_PERIOD_S)):
        t = float(rng.uniform(0.0, period))
        while t < cfg.session_s:
            b.add(streamer, Role.STREAMER, t, a)
            t += period * float(rng.uniform(0.8, 1.2))

    # viewers: independent Poisson processes; the first action of each viewer is the entry
    for _ in range(num_viewers):
        n = int(rng.poisson(cfg.mean_actions_per_viewer))
        if n == 0:
            continue
        uid = b.new_user()
        times = np.sort(rng.uniform(0.0, cfg.session_s, size=n))
        types = rng.choice(_BENIGN_TYPES, size=n - 1, p=_BENIGN_P)
        b.add(uid, Role.VIEWER, times[0], ActionType.ENTRY)
        for t, a in zip(times[1:], types):
            b.add(uid, Role.VIEWER, t, a)


def _audience(b: _RoomBuilder) -> Tuple[int, int]:
    """(Poisson viewers, burst viewers); burst viewers are taken out of the drawn audience."""
    cfg, rng = b.cfg, b.rng
    drawn = int(rng.poisson(cfg.mean_viewers))
    bursts = int(rng.integers(cfg.min_shills, cfg.max_shills + 1))
    return max(0, drawn - bursts), bursts


def _burst_rate(cfg: ScenarioConfig) -> float:
    # entry + two slots of (1 + Poisson) actions averages mean_actions_per_viewer when it is >= 3
    return max(0.0, (cfg.mean_actions_per_viewer - 3.0) / 2.0)


def _coordinated_structure(b: _RoomBuilder, streamer: str, bursts: int, strength: float, kind: str) -> None:
    """Promotion slot plus burst viewers; strength 0 gives the benign decoy."""
    cfg, rng = b.cfg, b.rng
    last_start = cfg.num_slots - 2
    k_star = int(rng.integers(0, last_start + 1))
    shift = strength

    b.add(streamer, Role.STREAMER, b.slot_time(k_star), ActionType.ASR_SPEECH, shift, planted=True)

    motif_types, motif_p = _MOTIF_TYPES[kind]
    extra_likes = int(round(strength * _LIKE_BURST_EXTRA)) if kind == "like_burst" else 0
    rate = _burst_rate(cfg)
    for _ in range(bursts):
        uid = b.new_user()
        aligned = rng.random() < strength
        j = k_star if aligned else int(rng.integers(0, last_start + 1))
        burst_start = j * cfg.slot_len_s
        b.add(uid, Role.VIEWER, float(rng.uniform(0.0, burst_start)) if j > 0 else b.slot_time(0),
              ActionType.ENTRY)
        for k in (j, j + 1):
            n = 1 + int(rng.poisson(rate)) + extra_likes
            for i in range(n):
                if i >= n - extra_likes:
                    a = ActionType.LIKE
                elif rng.random() < strength:
                    a = int(rng.choice(motif_types, p=motif_p))
                else:
                    a = int(rng.choice(_BENIGN_TYPES, p=_BENIGN_P))
                b.add(uid, Role.VIEWER, b.slot_time(k), a, shift, planted=True)


def generate_benign_room(
    rng: np.random.Generator,
    cfg: ScenarioConfig,
    room_id: Optional[str] = None,
) -> RoomRecord:
    b = _RoomBuilder(rng, cfg, _space(cfg))
    room_id = room_id or _room_id(rng)
    streamer = b.new_user()
    viewers, bursts = _audience(b)
    _base_room(b, streamer, viewers)
    # an audience-free scenario stays streamer-only
    if cfg.mean_viewers > 0:
        _coordinated_structure(b, streamer, bursts, strength=0.0, kind="promotion")
    return b.record(room_id, streamer, label=0, keep_planted=False)


def generate_fraud_room(
    rng: np.random.Generator,
    cfg: ScenarioConfig,
    room_id: Optional[str] = None,
) -> RoomRecord:
    b = _RoomBuilder(rng, cfg, _space(cfg))
    room_id = room_id or _room_id(rng)
    streamer = b.new_user()
    viewers, bursts = _audience(b)
    _base_room(b, streamer, viewers)
    kind = cfg.motif_kinds[int(rng.integers(0, len(cfg.motif_kinds)))]
    _coordinated_structure(b, streamer, bursts, strength=cfg.motif_strength, kind=kind)
    return b.record(room_id, streamer, label=1, keep_planted=True)


def _generate_one(job: Tuple[int, np.random.SeedSequence, ScenarioConfig, str]) -> RoomRecord:
    label, seq, cfg, room_id = job
    rng = np.random.default_rng(seq)
    if label:
        return generate_fraud_room(rng, cfg, room_id)
    return generate_benign_room(rng, cfg, room_id)


def split_sizes(num_rooms: int, fractions: Sequence[float]) -> List[int]:
    sizes = [int(round(num_rooms * f)) for f in fractions[:-1]]
    sizes.append(num_rooms - sum(sizes))
    if sizes[-1] < 0:
        raise ValueError(f"split fractions {tuple(fractions)} overflow {num_rooms} rooms")
    return sizes


def generate_splits(
    cfg: ScenarioConfig,
    split_fractions: Optional[Sequence[float]] = None,
    progress: bool = False,
) -> Dict[str, List[RoomRecord]]:
    """Stratified train/val/test rooms; each split draws from its own seed stream."""
    fractions = tuple(split_fractions) if split_fractions is not None else cfg.split_fractions
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"split fractions must be three values summing to 1, got {fractions}")

    split_seqs = np.random.SeedSequence(cfg.seed).spawn(len(SPLITS))
    jobs: Dict[str, List[Tuple[int, np.random.SeedSequence, ScenarioConfig, str]]] = {}
    for name, size, seq in zip(SPLITS, split_sizes(cfg.num_rooms, fractions), split_seqs):
        label_seq, *room_seqs = seq.spawn(size + 1)
        n_pos = int(round(size * cfg.positive_rate))
        labels = np.zeros(size, dtype=int)
        labels[:n_pos] = 1
        np.random.default_rng(label_seq).shuffle(labels)
        jobs[name] = [
            (int(y), s, cfg, f"{name}-{i:06d}") for i, (y, s) in enumerate(zip(labels, room_seqs))
        ]

    out: Dict[str, List[RoomRecord]] = {}
    for name in SPLITS:
        split_jobs = jobs[name]
        if cfg.gen_workers > 1 and len(split_jobs) > 1:
            with ProcessPoolExecutor(max_workers=cfg.gen_workers) as pool:
                rooms = list(pool.map(_generate_one, split_jobs, chunksize=16))
        else:
            rooms = [_generate_one(j) for j in tqdm(split_jobs, desc=f"synth {name}", disable=not progress)]
        out[name] = rooms
        logger.info("generated %s: %d rooms, %d positive", name, len(rooms), sum(r.label for r in rooms))
    return out


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_dataset(
    cfg: ScenarioConfig,
    out_dir: str,
    split_fractions: Optional[Sequence[float]] = None,
    progress: bool = False,
) -> Dict[str, str]:
    """Write train/val/test JSONL corpora plus manifest.json; returns split -> path."""
    splits = generate_splits(cfg, split_fractions, progress=progress)
    os.makedirs(out_dir, exist_ok=True)
    paths: Dict[str, str] = {}
    manifest: Dict[str, object] = {"scenario": dataclasses.asdict(cfg), "seed": cfg.seed, "splits": {}}
    for name, rooms in splits.items():
        path = os.path.join(out_dir, f"{name}.jsonl")
        write_rooms_jsonl(path, rooms)
        paths[name] = path
        manifest["splits"][name] = {
            "path": os.path.basename(path),
            "rooms": len(rooms),
            "positives": sum(r.label for r in rooms),
            "sha256": _sha256(path),
        }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return paths


def symmetric_kl_gaussian(a: np.ndarray, b: np.ndarray, eps: float = 1e-6) -> float:
    """Symmetrized KL between diagonal Gaussians fitted to the rows of a and b."""
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    var_a, var_b = a.var(axis=0) + eps, b.var(axis=0) + eps
    kl_ab = 0.5 * np.sum(np.log(var_b / var_a) + (var_a + (mu_a - mu_b) ** 2) / var_b - 1.0)
    kl_ba = 0.5 * np.sum(np.log(var_a / var_b) + (var_b + (mu_b - mu_a) ** 2) / var_a - 1.0)
    return float(kl_ab + kl_ba)


def planted_feature_split(rooms: Sequence[RoomRecord], slot_len_s: float, num_slots: int) -> Tuple[np.ndarray, np.ndarray]:
    """Text features of actions inside planted cells vs. all other text features."""
    planted_x: List[Tuple[float, ...]] = []
    other_x: List[Tuple[float, ...]] = []
    for room in rooms:
        cells = room.planted_capsules or frozenset()
        for a in room.actions:
            if a.text_feature is None:
                continue
            cell = (a.user_id, slot_of(a.timestamp_s, slot_len_s, num_slots))
            (planted_x if cell in cells else other_x).append(a.text_feature)
    return np.asarray(planted_x, dtype=float), np.asarray(other_x, dtype=float)
