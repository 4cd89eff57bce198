"""
Room-level risk assessment for live streams with user-timeslot capsules.

Rooms are split into capsules (one user's actions within one timeslot), the
capsules are reasoned over as a relation-aware graph, and four room vectors
(action, capsule, user view, timeslot view) are fused into one risk score with
per-capsule attribution.
"""

from acmil.batching import RoomBatch, RoomDataset, collate_rooms
from acmil.config import ModelConfig, PreprocessConfig, RunConfig, ScenarioConfig, load_config
from acmil.decoder import RiskOutput
from acmil.errors import (
    AcmilError,
    CheckpointError,
    ConfigError,
    EmptyRoomError,
    FeatureDimensionError,
    MetricError,
    RoomSchemaError,
)
from acmil.metrics import MetricReport, evaluate_scores
from acmil.model import ACMIL, MODEL_NAMES, build_model
from acmil.reasoner import RelationStructure, RiskAttribution
from acmil.room_data import (
    ActionEvent,
    ActionType,
    CapsuleGrid,
    RoomRecord,
    build_capsule_grid,
    parse_room,
    prepare_rooms,
    preprocess_room,
    read_rooms_jsonl,
    write_rooms_jsonl,
)
from acmil.synthgen import generate_dataset, generate_benign_room, generate_fraud_room

__all__ = [
    'ACMIL',
    'AcmilError',
    'ActionEvent',
    'ActionType',
    'CapsuleGrid',
    'CheckpointError',
    'ConfigError',
    'EmptyRoomError',
    'FeatureDimensionError',
    'MODEL_NAMES',
    'MetricError',
    'MetricReport',
    'ModelConfig',
    'PreprocessConfig',
    'RelationStructure',
    'RiskAttribution',
    'RiskOutput',
    'RoomBatch',
    'RoomDataset',
    'RoomRecord',
    'RoomSchemaError',
    'RunConfig',
    'ScenarioConfig',
    'build_capsule_grid',
    'build_model',
    'collate_rooms',
    'evaluate_scores',
    'generate_benign_room',
    'generate_dataset',
    'generate_fraud_room',
    'load_config',
    'parse_room',
    'prepare_rooms',
    'preprocess_room',
    'read_rooms_jsonl',
    'write_rooms_jsonl',
]
