"""
Run configuration: preprocessing, synthetic scenario and model/training knobs.

Config files are flat ``key = value`` text:

    # capsule grid
    slot_len_s = 100
    top_viewers = 50
    d_k = 128
    motif_kinds = promotion, like_burst

A key is applied to every config section that declares a field of that name
(``d_text``, ``seed``, ``slot_len_s``, ``max_actions`` are shared on purpose).
"""

from __future__ import annotations
import dataclasses
import re
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

from acmil.errors import ConfigError


@dataclass(frozen=True)
class PreprocessConfig:
    window_s: float = 1800.0
    slot_len_s: float = 100.0
    top_viewers: int = 50
    max_actions: int = 2096
    drop_entry_only_viewers: bool = True
    entry_action_ids: Tuple[int, ...] = (0,)

    def __post_init__(self):
        for name in ("window_s", "slot_len_s", "top_viewers", "max_actions"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def num_slots(self) -> int:
        # last slot may be partial
        return int(-(-self.window_s // self.slot_len_s))


@dataclass(frozen=True)
class ScenarioConfig:
    num_rooms: int = 1000
    positive_rate: float = 0.0909
    seed: int = 0
    mean_viewers: int = 30
    mean_actions_per_viewer: float = 5.0
    motif_strength: float = 0.8
    d_text: int = 16
    vocab_size: int = 13
    session_s: float = 1800.0
    slot_len_s: float = 100.0
    min_shills: int = 2
    max_shills: int = 5
    motif_kinds: Tuple[str, ...] = ("promotion",)
    split_fractions: Tuple[float, ...] = (0.8, 0.1, 0.1)
    gen_workers: int = 0

    def __post_init__(self):
        if self.num_rooms < 0:
            raise ConfigError(f"num_rooms must be >= 0, got {self.num_rooms}")
        if not 0.0 < self.positive_rate < 1.0:
            raise ConfigError(f"positive_rate must be in (0, 1), got {self.positive_rate}")
        if self.mean_viewers < 0 or self.mean_actions_per_viewer < 0:
            raise ConfigError("mean_viewers and mean_actions_per_viewer must be >= 0")
        if not 0.0 <= self.motif_strength <= 1.0:
            raise ConfigError(f"motif_strength must be in [0, 1], got {self.motif_strength}")
        if self.d_text < 1:
            raise ConfigError(f"d_text must be >= 1, got {self.d_text}")
        if self.session_s <= 0 or self.slot_len_s <= 0:
            raise ConfigError("session_s and slot_len_s must be positive")
        if self.session_s < 2 * self.slot_len_s:
            raise ConfigError("session_s must span at least two slots for motif planting")
        if not 2 <= self.min_shills <= self.max_shills:
            raise ConfigError(
                f"need 2 <= min_shills <= max_shills, got {self.min_shills}..{self.max_shills}"
            )
        unknown = [k for k in self.motif_kinds if k not in MOTIF_KINDS]
        if unknown or not self.motif_kinds:
            raise ConfigError(f"motif_kinds must be a non-empty subset of {MOTIF_KINDS}, got {self.motif_kinds}")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-6:
            raise ConfigError(f"split_fractions must be three values summing to 1, got {self.split_fractions}")
        if any(f < 0 for f in self.split_fractions):
            raise ConfigError("split_fractions must be non-negative")

    @property
    def num_slots(self) -> int:
        return int(-(-self.session_s // self.slot_len_s))


MOTIF_KINDS = ("promotion", "like_burst")
LOSS_REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class ModelConfig:
    d_text: int = 16
    num_action_types: int = 13
    d_embed: int = 128
    d_k: int = 128
    num_heads: int = 8
    encoder_layers: int = 2
    graph_layers: int = 1
    recurrent_layers: int = 2
    dropout: float = 0.1
    gamma_cls: float = 1.0
    max_actions: int = 2096
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    loss_reduction: str = "sum"
    deterministic: bool = True
    num_workers: int = 0
    use_action_encoder: bool = True
    use_graph_bias: bool = True
    use_user_view: bool = True
    use_timeslot_view: bool = True

    def __post_init__(self):
        for name in ("d_text", "num_action_types", "d_embed", "d_k", "num_heads",
                     "encoder_layers", "graph_layers", "recurrent_layers", "max_actions",
                     "batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.num_heads or self.d_k % self.num_heads:
            raise ConfigError(
                f"d_model={self.d_model} and d_k={self.d_k} must be divisible by num_heads={self.num_heads}"
            )
        if self.d_k < 2:
            raise ConfigError("d_k must be >= 2 (MLP hidden width is d_k // 2)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.gamma_cls <= 0:
            raise ConfigError(f"gamma_cls must be positive, got {self.gamma_cls}")
        if self.loss_reduction not in LOSS_REDUCTIONS:
            raise ConfigError(f"loss_reduction must be one of {LOSS_REDUCTIONS}, got {self.loss_reduction!r}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")
        if not any((self.use_action_encoder, self.use_graph_bias,
                    self.use_user_view, self.use_timeslot_view)):
            raise ConfigError("at least one room representation must stay enabled")

    @property
    def d_model(self) -> int:
        """Action token width: action-id embedding concatenated with projected text."""
        return self.d_embed + self.d_k

    # fields that fix parameter shapes; a checkpoint must agree on all of them
    SHAPE_FIELDS = ("d_text", "num_action_types", "d_embed", "d_k", "num_heads",
                    "encoder_layers", "graph_layers", "recurrent_layers", "max_actions")


@dataclass(frozen=True)
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    SECTIONS = ("preprocess", "scenario", "model")

    def replace(self, **overrides: Any) -> "RunConfig":
        """Return a copy with ``key=value`` overrides routed like config-file keys."""
        return apply_overrides(self, {k: v for k, v in overrides.items() if v is not None})


# ---- Parsing ----

_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config_file(path: str) -> Dict[str, Tuple[str, int]]:
    """
    Parse flat ``key = value`` lines.

    Returns: dict key -> (raw value, line number)
    """
    entries: Dict[str, Tuple[str, int]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            m = _LINE.match(line)
            if not m:
                raise ConfigError(f"invalid format -> {raw.strip()}", lineno)
            key, value = m.group(1), m.group(2)
            if key in entries:
                raise ConfigError(f"duplicate key {key!r} (first set on line {entries[key][1]})", lineno)
            entries[key] = (value, lineno)
    return entries


def _coerce(raw: Any, hint: Any, key: str, lineno: Optional[int]) -> Any:
    if not isinstance(raw, str):
        # programmatic override, trust the type but normalize sequences
        if typing.get_origin(hint) is tuple:
            return tuple(raw) if isinstance(raw, (list, tuple)) else (raw,)
        if hint is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        return raw
    try:
        if hint is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if typing.get_origin(hint) is tuple:
            item = typing.get_args(hint)[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(_coerce(p, item, key, lineno) for p in parts)
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {getattr(hint, '__name__', hint)}", lineno)
    raise ConfigError(f"unsupported field type for {key}", lineno)


def _section_fields(cls) -> Dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def apply_overrides(
    run: RunConfig,
    values: Mapping[str, Any],
    linenos: Optional[Mapping[str, int]] = None,
) -> RunConfig:
    """Route every key to each section declaring it; unknown keys are an error."""
    linenos = linenos or {}
    updates: Dict[str, Dict[str, Any]] = {name: {} for name in RunConfig.SECTIONS}
    for key, raw in values.items():
        lineno = linenos.get(key)
        matched = False
        for name in RunConfig.SECTIONS:
            hints = _section_fields(type(getattr(run, name)))
            if key in hints:
                updates[name][key] = _coerce(raw, hints[key], key, lineno)
                matched = True
        if not matched:
            raise ConfigError(f"unknown config key {key!r}", lineno)

    sections = {}
    for name in RunConfig.SECTIONS:
        current = getattr(run, name)
        sections[name] = dataclasses.replace(current, **updates[name]) if updates[name] else current
    return RunConfig(**sections)


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then the config file (if any), then explicit overrides."""
    run = RunConfig()
    if path is not None:
        entries = parse_config_file(path)
        run = apply_overrides(
            run,
            {k: v for k, (v, _) in entries.items()},
            {k: n for k, (_, n) in entries.items()},
        )
    if overrides:
        run = apply_overrides(run, {k: v for k, v in overrides.items() if v is not None})
    return run


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_to_mapping(run: RunConfig) -> Dict[str, str]:
    """Flatten to key -> formatted value; shared keys must agree across sections."""
    flat: Dict[str, str] = {}
    for name in RunConfig.SECTIONS:
        for key, value in dataclasses.asdict(getattr(run, name)).items():
            text = _format_value(tuple(value) if isinstance(value, list) else value)
            if key in flat and flat[key] != text:
                raise ConfigError(f"shared key {key!r} disagrees across sections ({flat[key]} vs {text})")
            flat[key] = text
    return flat


def write_config_file(path: str, run: RunConfig) -> None:
    flat = config_to_mapping(run)
    lines = [f"{key} = {flat[key]}" for key in sorted(flat)]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def model_config_from_dict(data: Mapping[str, Any]) -> ModelConfig:
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
    return ModelConfig(**dict(data))


def iter_shape_mismatches(a: ModelConfig, b: ModelConfig) -> Iterable[Tuple[str, Any, Any]]:
    for name in ModelConfig.SHAPE_FIELDS:
        if getattr(a, name) != getattr(b, name):
            yield name, getattr(a, name), getattr(b, name)
