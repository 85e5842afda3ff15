"""Plain-text run configuration: ``key=value`` lines, strict schema.

One root seed feeds every random component (data generation, weight
init, batch order, augmentation, corruption) through named sub-streams,
so a run is fully pinned by its config file plus flag overrides.
Unknown keys are rejected by name; blank lines and ``#`` comments are
ignored; later lines override earlier ones, and command-line overrides
beat the file.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import AugmentationConfig, CorruptionConfig, DataConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Bad key, bad value, or invalid combination in a run configuration."""


def _parse_int(s: str) -> int:
    return int(s, 0)


def _parse_float(s: str) -> float:
    return float(s)


def _parse_bool(s: str) -> bool:
    lowered = s.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_str(s: str) -> str:
    return s


def _parse_ints(s: str) -> tuple:
    if not s.strip():
        return ()
    return tuple(int(part.strip(), 0) for part in s.split(","))


def _parse_morph(s: str) -> dict:
    """"1:1,2:-1" -> {1: 1, 2: -1}; empty string disables morphing."""
    out = {}
    if not s.strip():
        return out
    for part in s.split(","):
        if ":" not in part:
            raise ValueError(f"expected class:radius pairs, got {part!r}")
        cls, radius = part.split(":", 1)
        out[int(cls.strip(), 0)] = int(radius.strip(), 0)
    return out


# key -> parser; grouping by prefix happens in build_run_config
_SCHEMA = {
    "seed": _parse_int,
    "data.dir": _parse_str,
    "data.n_classes": _parse_int,
    "data.extents": _parse_ints,
    "data.aux_volumes": _parse_int,
    "data.manual_volumes": _parse_int,
    "data.manual_train": _parse_int,
    "data.manual_val": _parse_int,
    "data.aux_val": _parse_int,
    "model.channels": _parse_int,
    "model.kernel_size": _parse_int,
    "model.depth": _parse_int,
    "model.input_channels": _parse_int,
    "train.initial_lr": _parse_float,
    "train.lr_decay_factor": _parse_float,
    "train.lr_step": _parse_int,
    "train.weight_decay": _parse_float,
    "train.momentum": _parse_float,
    "train.batch_size": _parse_int,
    "train.max_epochs": _parse_int,
    "train.patience": _parse_int,
    "train.use_dice": _parse_bool,
    "train.boundary_weight": _parse_float,
    "train.dice_epsilon": _parse_float,
    "train.ecb_margin": _parse_float,
    "train.ecb_keep_boundary": _parse_bool,
    "corrupt.morph": _parse_morph,
    "corrupt.boundary_jitter": _parse_float,
    "corrupt.small_class_mislabel": _parse_float,
    "corrupt.small_classes": _parse_ints,
    "augment.enabled": _parse_bool,
    "augment.max_translation": _parse_int,
    "augment.max_rotation": _parse_float,
}


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    data: DataConfig = field(default_factory=DataConfig)
    model_channels: int = 64
    model_kernel_size: int = 7
    model_depth: int = 3
    model_input_channels: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    augment_enabled: bool = True
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(num_classes=num_classes, channels=self.model_channels,
                           kernel_size=self.model_kernel_size, depth=self.model_depth,
                           input_channels=self.model_input_channels)

    def augmentation(self) -> AugmentationConfig | None:
        return self.augment if self.augment_enabled else None


def parse_config_file(path) -> dict:
    """Read raw key=value strings; duplicate keys keep the last value."""
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries


def build_run_config(entries: dict) -> RunConfig:
    """Validate raw entries against the schema and assemble a RunConfig."""
    parsed = {}
    for key, value in entries.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            parsed[key] = _SCHEMA[key](value)
        except ValueError as err:
            raise ConfigError(f"invalid value for {key}: {value!r} ({err})") from err

    def take(key, default):
        return parsed.pop(key, default)

    seed = take("seed", 0)
    data_dir = take("data.dir", "data")
    try:
        data = DataConfig(
            n_classes=take("data.n_classes", 8),
            extents=tuple(take("data.extents", (8, 64, 64))),
            aux_volumes=take("data.aux_volumes", 60),
            manual_volumes=take("data.manual_volumes", 30),
            manual_train=take("data.manual_train", 15),
            manual_val=take("data.manual_val", 5),
            aux_val=take("data.aux_val", 6),
        )
        train = TrainConfig(
            initial_lr=take("train.initial_lr", 0.1),
            lr_decay_factor=take("train.lr_decay_factor", 0.1),
            lr_step=take("train.lr_step", 20),
            weight_decay=take("train.weight_decay", 1e-4),
            momentum=take("train.momentum", 0.9),
            batch_size=take("train.batch_size", 10),
            max_epochs=take("train.max_epochs", 60),
            patience=take("train.patience", 10),
            seed=seed,
            use_dice=take("train.use_dice", True),
            boundary_weight=take("train.boundary_weight", 5.0),
            dice_epsilon=take("train.dice_epsilon", 1e-6),
            ecb_margin=take("train.ecb_margin", 0.05),
            ecb_keep_boundary=take("train.ecb_keep_boundary", False),
        )
        default_small = tuple(range(4, data.n_classes))
        corruption = CorruptionConfig(
            morph=take("corrupt.morph", {1: 1, 2: -1, 3: 1}),
            boundary_jitter=take("corrupt.boundary_jitter", 0.25),
            small_class_mislabel=take("corrupt.small_class_mislabel", 0.25),
            small_classes=tuple(take("corrupt.small_classes", default_small)),
            seed=seed,
        )
        augment = AugmentationConfig(
            max_translation=take("augment.max_translation", 5),
            max_rotation=take("augment.max_rotation", 10.0),
        )
        cfg = RunConfig(
            seed=seed,
            data_dir=data_dir,
            data=data,
            model_channels=take("model.channels", 64),
            model_kernel_size=take("model.kernel_size", 7),
            model_depth=take("model.depth", 3),
            model_input_channels=take("model.input_channels", 1),
            train=train,
            corruption=corruption,
            augment_enabled=take("augment.enabled", True),
            augment=augment,
        )
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from err
    # sanity: everything consumed (schema and take() calls in sync)
    assert not parsed, f"unconsumed config keys: {sorted(parsed)}"
    return cfg


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File entries (if any) overridden by flag-supplied raw strings."""
    entries = parse_config_file(path) if path is not None else {}
    if overrides:
        entries.update(overrides)
    return build_run_config(entries)
