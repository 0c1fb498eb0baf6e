"""
Model and training configuration, and the flat `key=value` config file.

    # toy.cfg
    input_size=32
    widths=8,16,32,64
    fusion_strategy=conv_adaptive
    fusion_positions=3,4
    epochs=70

Absent keys take the defaults below. Unknown keys are errors.
"""
import dataclasses
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import ConfigError

EXPRESSIONS = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")
ABBREVIATIONS = ("AN", "DI", "FE", "HA", "SA", "SU")
NUM_CLASSES = len(EXPRESSIONS)
LAYERS = (1, 2, 3, 4)


class FusionStrategy(str, Enum):
    DATA = "data"  # texture and depth stacked on the channel axis, one backbone
    DECISION = "decision"  # average of the two branch softmax outputs
    FC_CONCAT = "fc_concat"  # concatenated pooled features before the head
    CONV_SUM = "conv_sum"  # unweighted sum of conv features
    CONV_ADAPTIVE = "conv_adaptive"  # importance-weighted sum of conv features

    @property
    def is_conv_level(self):
        return self in (FusionStrategy.CONV_SUM, FusionStrategy.CONV_ADAPTIVE)


MODALITIES = ("both", "texture", "depth")


@dataclass
class ModelConfig:
    input_size: int = 224
    widths: tuple = (64, 128, 256, 512)
    blocks_per_layer: int = 2
    modality: str = "both"
    ma_enabled: bool = True
    ma_positions: tuple = (1, 2)
    iwc_enabled: bool = True
    fusion_strategy: FusionStrategy = FusionStrategy.CONV_ADAPTIVE
    fusion_positions: tuple = (3, 4)
    num_classes: int = NUM_CLASSES
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.ma_positions = tuple(sorted(set(int(p) for p in self.ma_positions)))
        self.fusion_positions = tuple(sorted(set(int(p) for p in self.fusion_positions)))
        self.fusion_strategy = FusionStrategy(self.fusion_strategy)
        self.validate()

    @classmethod
    def toy(cls, **kwargs):
        """Desk-scale config: S=32, widths [8,16,32,64]; keeps every architectural ratio."""
        return cls(**{**dict(input_size=32, widths=(8, 16, 32, 64)), **kwargs})

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def validate(self):
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if len(self.widths) != 4 or any(w <= 0 for w in self.widths):
            raise ConfigError(f"widths must be four positive integers, got {self.widths}")
        if any(b != 2 * a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError(f"widths must double from one layer to the next, got {self.widths}")
        if self.blocks_per_layer < 1:
            raise ConfigError(f"blocks_per_layer must be >= 1, got {self.blocks_per_layer}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if not set(self.ma_positions) <= {1, 2}:
            raise ConfigError(f"ma_positions must be a subset of Layer1/Layer2, got {self.ma_positions}")
        if self.ma_enabled and not self.ma_positions:
            raise ConfigError("ma_enabled needs at least one entry in ma_positions")
        if not set(self.fusion_positions) <= set(LAYERS):
            raise ConfigError(f"fusion_positions must be a subset of Layer1..Layer4, got {self.fusion_positions}")
        if self.modality == "both" and self.fusion_strategy.is_conv_level and not self.fusion_positions:
            raise ConfigError(f"fusion_strategy={self.fusion_strategy.value} needs at least one entry in "
                              f"fusion_positions")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes is fixed at {NUM_CLASSES}, got {self.num_classes}")

    @property
    def uses_iwc(self):
        return self.modality == "both" and self.iwc_enabled \
               and self.fusion_strategy is FusionStrategy.CONV_ADAPTIVE

    @property
    def active_ma_positions(self):
        return self.ma_positions if self.ma_enabled else ()

    @property
    def needs_texture(self):
        return self.modality in ("both", "texture")

    @property
    def needs_depth(self):
        return self.modality in ("both", "depth")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["fusion_strategy"] = self.fusion_strategy.value
        return d


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 70
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        # a zero step size is allowed for dry runs; negative is not
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError(f"beta1 and beta2 must lie in (0, 1), got ({self.beta1}, {self.beta2})")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        return dataclasses.asdict(self)


def _int_list(value):
    return tuple(int(v) for v in value.split(",") if v.strip()) if value.strip() else ()


def _bool(value):
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


# key -> (target config, parser)
KEYS = {
    "input_size": ("model", int),
    "widths": ("model", _int_list),
    "blocks_per_layer": ("model", int),
    "modality": ("model", str.strip),
    "ma_enabled": ("model", _bool),
    "ma_positions": ("model", _int_list),
    "iwc_enabled": ("model", _bool),
    "fusion_strategy": ("model", lambda v: FusionStrategy(v.strip())),
    "fusion_positions": ("model", _int_list),
    "num_classes": ("model", int),
    "learning_rate": ("train", float),
    "beta1": ("train", float),
    "beta2": ("train", float),
    "epsilon": ("train", float),
    "epochs": ("train", int),
    "batch_size": ("train", int),
    "seed": ("both", int),
}


@dataclass
class ConfigValues:
    """Parsed key/value pairs split by target, before defaults are applied."""
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    # key -> where it was last set ("toy.cfg line 3", "override 1")
    origins: dict = field(default_factory=dict)

    def set(self, key, raw, where):
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        target, parse = KEYS[key]
        try:
            value = parse(raw)
        except ValueError as e:
            raise ConfigError(f"{where}: malformed value for {key!r}: {raw.strip()!r} ({e})") from None
        if target in ("model", "both"):
            self.model[key] = value
        if target in ("train", "both"):
            self.train[key] = value
        self.origins[key] = where

    def update(self, other):
        self.model.update(other.model)
        self.train.update(other.train)
        self.origins.update(other.origins)
        return self

    def cite(self, message):
        """Prefix `message` with where the keys it names were set (every set key when it names none)."""
        named = [k for k in self.origins if re.search(rf"\b{k}\b", message)]
        wheres = list(dict.fromkeys(self.origins[k] for k in (named or self.origins)))
        return f"{', '.join(wheres)}: {message}" if wheres else message

    def build(self, base_model=None):
        base_model = base_model or ModelConfig()
        try:
            model = base_model.replace(**self.model)
            train = TrainConfig(**self.train)
        except (TypeError, ValueError) as e:
            raise ConfigError(self.cite(str(e))) from None
        return model, train


def parse_lines(lines, source="<config>"):
    values = ConfigValues()
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source} line {lineno}: expected key=value, got {line.strip()!r}")
        key, raw = text.split("=", 1)
        values.set(key.strip(), raw, where=f"{source} line {lineno}")
    return values


def parse_overrides(pairs):
    """Parse `--set key=value` flags; they take precedence over the config file."""
    values = ConfigValues()
    for i, pair in enumerate(pairs or (), start=1):
        if "=" not in pair:
            raise ConfigError(f"override {i}: expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        values.set(key.strip(), raw, where=f"override {i}")
    return values


def load_config(path=None, overrides=None):
    """Read a config file and return (ModelConfig, TrainConfig).

    :param path: config file, or None for pure defaults.
    :param overrides: optional ConfigValues applied on top of the file.
    """
    values = ConfigValues()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"File {path} does not exist")
        values = parse_lines(path.read_text().splitlines(), source=str(path))
    if overrides is not None:
        values.update(overrides)
    return values.build()


def dump_config(model_config, train_config):
    """Render both configs as config-file text that `load_config` reads back."""
    m, t = model_config.to_dict(), train_config.to_dict()
    lines = []
    for key, (target, _) in KEYS.items():
        value = t[key] if target == "train" else m[key]
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
