"""Configuration dataclasses and the flat key=value configuration format."""
from __future__ import annotations

import dataclasses
import logging
import typing
from contextlib import suppress
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Type, TypeVar, Union

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

ReplacementRules = List[Tuple[str, str]]
"""Defines key renames as used in normalize_keys()."""

KEY_ALIASES: ReplacementRules = [
    ("N", "num_trackers"),
    ("L", "memory_length"),
    ("c", "embed_dim"),
    ("C", "backbone_dim"),
    ("heads", "num_heads"),
    ("points", "num_points"),
    ("alpha_select", "selection_weight"),
    ("curriculum schedule", "curriculum"),
]

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

T = TypeVar("T")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the tracker network."""

    num_trackers: int = 10
    memory_length: int = 5
    embed_dim: int = 64
    backbone_dim: int = 128
    backbone_widths: Tuple[int, ...] = (16, 32, 64)
    """Output widths of the first three stride-2 blocks; the fourth block outputs `backbone_dim`."""

    num_heads: int = 4
    num_points: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: int = 128
    template_size: int = 128
    search_width: int = 640
    search_height: int = 480

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if min(self.num_trackers, self.memory_length, self.num_points, self.num_heads) < 1:
            raise ConfigError("num_trackers, memory_length, num_points and num_heads must be >= 1")
        if min(self.encoder_layers, self.decoder_layers) < 0:
            raise ConfigError("layer counts must not be negative")
        if len(self.backbone_widths) != 3:
            raise ConfigError("backbone_widths needs three entries")


@dataclass(frozen=True)
class TrainingConfig:
    """Loss weights, optimizer and curriculum."""

    lambda_cls: float = 1.0
    lambda_r: float = 5.0
    lambda_l1: float = 5.0
    lambda_iou: float = 2.0
    lambda_sim: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    lr_drop_epoch: int = 8
    """The learning rate is multiplied by `lr_drop_factor` once, after this many epochs."""

    lr_drop_factor: float = 0.1
    grad_clip: float = 0.5
    epochs: int = 10
    sequences_per_epoch: int = 64
    curriculum: Tuple[Tuple[int, int], ...] = ((2, 0), (3, 2), (4, 4), (5, 6), (6, 8))
    """(sequence length, first epoch using it), template frame included in the length."""

    temporal_transfer: bool = True
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        weights = (self.lambda_cls, self.lambda_r, self.lambda_l1, self.lambda_iou, self.lambda_sim)
        if any(value < 0 for value in weights):
            raise ConfigError("loss weights must be nonnegative")
        if not self.curriculum or any(length < 2 for length, _ in self.curriculum):
            raise ConfigError("curriculum lengths must be >= 2")


@dataclass(frozen=True)
class RuntimeConfig:
    """Inference-time decisions."""

    theta: float = 0.5
    """Presence threshold on the candidate confidence."""

    selection_weight: float = 1.0
    """Weight of the center distance in the final candidate selection."""

    temporal_transfer: bool = True

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("theta must lie in [0, 1]")


@dataclass(frozen=True)
class WorldConfig:
    """Parameters of the synthetic sequence generator."""

    image_width: int = 320
    image_height: int = 240
    sequence_length: int = 20
    target_min_size: int = 24
    target_max_size: int = 48
    target_shape: str = "random"
    """"ellipse", "rectangle" or "random"."""

    velocity_max: float = 6.0
    """Pixels per frame."""

    turn_noise: float = 0.3
    """Standard deviation of the heading change per frame, in radians."""

    occlusion_prob: float = 0.0
    out_of_view_prob: float = 0.0
    absent_min: int = 1
    absent_max: int = 5
    reappear_min_displacement: float = 60.0
    """Pixels between the centers before and after an absence."""

    num_distractors: int = 0
    distractor_similarity: float = 0.5
    """1.0 renders distractors in the target color, 0.0 in an unrelated color."""

    texture_noise: float = 12.0
    scripted_events: Tuple[Tuple[int, int], ...] = ()
    """(start frame, duration) absences that happen in addition to the random ones."""

    world_seed: int = 0

    def __post_init__(self):
        for name in ("occlusion_prob", "out_of_view_prob", "distractor_similarity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.sequence_length < 2:
            raise ConfigError("sequence_length must be >= 2")
        if not 1 <= self.absent_min <= self.absent_max:
            raise ConfigError("absence bounds must satisfy 1 <= absent_min <= absent_max")
        if self.target_shape not in ("ellipse", "rectangle", "random"):
            raise ConfigError("unknown target shape", self.target_shape)

    @property
    def size(self) -> Tuple[int, int]:
        return self.image_width, self.image_height


@dataclass(frozen=True)
class Settings:
    """All configuration sections read from one file."""

    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    world: WorldConfig = field(default_factory=WorldConfig)


def normalize_keys(
    parameters: Union[Dict[str, Any], Iterable[Tuple[str, Any]]],
    replacement_rules: Optional[ReplacementRules] = None,
    to_lowercase: bool = True,
    replace_whitespace: bool = True,
) -> Dict[str, Any]:
    """
    Apply replacement rules and basic formatting to configuration keys.

    Replacement rules are applied to the raw keys first, so case-sensitive aliases
    (`c` and `C`) can be told apart before lower-casing.
    """
    raw_props = dict(parameters)
    processed = {}

    for property_key, new_key in replacement_rules or []:
        with suppress(KeyError):
            processed[new_key] = raw_props.pop(property_key)

    for key, value in raw_props.items():
        key = key.strip()
        if to_lowercase:
            key = key.lower()

        if replace_whitespace:
            key = key.replace(" ", "_")

        processed[key] = value

    return processed


def read_key_values(path: Union[str, Path]) -> Dict[str, str]:
    """Read a flat `key = value` file, ignoring blank lines and `#` comments."""
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as error:
        raise ConfigError("could not read configuration file", str(path)) from error

    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, value = map(str.strip, line.split("=", 1))
        except ValueError as error:
            raise ConfigError(f"line {number} is not a key=value pair", line) from error
        values[key] = value

    return values


def load_settings(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> Settings:
    """Build `Settings` from a configuration file and/or explicit overrides."""
    raw: Dict[str, Any] = read_key_values(path) if path is not None else {}
    raw.update(overrides or {})
    parameters = normalize_keys(raw, KEY_ALIASES)

    sections = {}
    unknown = set(parameters)
    for name, section_type in (
        ("model", ModelConfig),
        ("training", TrainingConfig),
        ("runtime", RuntimeConfig),
        ("world", WorldConfig),
    ):
        # a key declared by several sections (temporal_transfer) goes to all of them
        items = [(key, parameters[key]) for key in _field_names(section_type) if key in parameters]
        unknown.difference_update(key for key, _ in items)
        sections[name] = build_section(section_type, items)

    if unknown:
        raise ConfigError("unknown configuration keys", sorted(unknown))

    logger.debug("loaded settings from %s with %d override(s)", path, len(overrides or {}))
    return Settings(**sections)


def build_section(section_type: Type[T], items: Iterable[Tuple[str, Any]]) -> T:
    """Instantiate a configuration dataclass from (key, raw value) pairs."""
    hints = typing.get_type_hints(section_type)
    values = {}
    for key, value in items:
        try:
            values[key] = _coerce(value, hints[key])
        except (TypeError, ValueError) as error:
            raise ConfigError(f"invalid value for {key}", value) from error
    return section_type(**values)


def _field_names(section_type: type) -> List[str]:
    return [f.name for f in dataclasses.fields(section_type)]


def _coerce(value: Any, hint: Any) -> Any:
    if not isinstance(value, str):
        if typing.get_origin(hint) is tuple:
            return tuple(_coerce(item, typing.get_args(hint)[0]) for item in value)
        return value

    value = value.strip()
    if hint is bool:
        if value.lower() in _TRUE:
            return True
        if value.lower() in _FALSE:
            return False
        raise ValueError(f"not a boolean: {value}")

    if hint in (int, float, str):
        return hint(value)

    if typing.get_origin(hint) is tuple:
        item_hint = typing.get_args(hint)[0]
        if not value:
            return ()
        if typing.get_origin(item_hint) is tuple:
            # pairs are written as a:b,c:d
            return tuple(
                tuple(int(part) for part in item.split(":")) for item in value.split(",")
            )
        return tuple(item_hint(item.strip()) for item in value.split(","))

    raise TypeError(f"unsupported configuration type {hint}")
