"""
Exception hierarchy for the room risk pipeline.

Input-shaped failures (bad config line, malformed room record, wrong feature
width) also derive from ValueError, so callers that only catch ValueError
keep working.
"""

from __future__ import annotations
from typing import Optional


class AcmilError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(AcmilError, ValueError):
    """Invalid configuration file or value."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"Line {lineno}: {message}"
        super().__init__(message)


class RoomSchemaError(AcmilError, ValueError):
    """A room record violates the JSONL schema or a RoomRecord invariant."""

    def __init__(self, message: str, path: str = "", room_id: Optional[str] = None):
        self.path = path
        self.room_id = room_id
        prefix = ""
        if room_id is not None:
            prefix += f"room {room_id!r}: "
        if path:
            prefix += f"{path}: "
        super().__init__(prefix + message)


class EmptyRoomError(AcmilError):
    """A room has no actions left after preprocessing."""

    def __init__(self, room_id: str):
        self.room_id = room_id
        super().__init__(f"room {room_id!r}: empty after preprocessing")


class FeatureDimensionError(AcmilError, ValueError):
    """Text feature width disagrees with the configured d_text."""


class CheckpointError(AcmilError):
    """Checkpoint missing, of an unknown version, or incompatible with the run config."""


class MetricError(AcmilError, ValueError):
    """Metric undefined for the given labels (e.g. no positives)."""
