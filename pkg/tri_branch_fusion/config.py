"""Run configuration loaded from YAML with strict key and type checking."""

import logging
import os
from dataclasses import dataclass, field, fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import (
    Any,
    Dict,
    Mapping,
    Optional,
    Tuple,
    Type,
    TypeVar,
    Union,
    get_args,
    get_origin,
    get_type_hints,
)

import yaml

from .errors import ConfigurationError
from .losses import DEFAULT_TAU
from .models import LabelStrategy, LossWeights
from .network import ModelConfig
from .selection import AIR_VALUE
from .synth import SynthConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "TNF_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
RESOLVED_CONFIG_NAME = "resolved_config.yaml"

T = TypeVar("T")

_SCALARS: Dict[type, Tuple[str, Tuple[type, ...]]] = {
    bool: ("a boolean", (bool,)),
    int: ("an integer", (int,)),
    float: ("a number", (int, float)),
    str: ("a string", (str,)),
}


def _key(path: str, name: str) -> str:
    return f"{path}.{name}" if path else name


def _coerce(tp: Any, value: Any, key: str) -> Any:
    origin = get_origin(tp)
    args = get_args(tp)

    if origin is Union:
        options = [a for a in args if a is not type(None)]
        if value is None or value == "none":
            if len(options) < len(args):
                return None
        if len(options) == 1:
            return _coerce(options[0], value, key)
        raise ConfigurationError(f"{key}: unsupported type {tp}")
    if tp is Any:
        return value
    if is_dataclass(tp):
        return from_plain(tp, value, key)
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError:
            choices = ", ".join(str(m.value) for m in tp)
            raise ConfigurationError(
                f"{key}: expected one of [{choices}], got {value!r}"
            ) from None
    if tp in _SCALARS:
        expected, accepted = _SCALARS[tp]
        wrong_bool = tp is not bool and isinstance(value, bool)
        if wrong_bool or not isinstance(value, accepted):
            raise ConfigurationError(
                f"{key}: expected {expected}, got {value!r}"
            )
        return float(value) if tp is float else value
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{key}: expected a list, got {value!r}")
        if origin is tuple and not (len(args) == 2 and args[1] is Ellipsis):
            if len(value) != len(args):
                raise ConfigurationError(
                    f"{key}: expected {len(args)} entries, got {len(value)}"
                )
            items = [
                _coerce(a, v, f"{key}[{i}]")
                for i, (a, v) in enumerate(zip(args, value))
            ]
        else:
            item_type = args[0] if args else Any
            items = [
                _coerce(item_type, v, f"{key}[{i}]")
                for i, v in enumerate(value)
            ]
        return tuple(items) if origin is tuple else items
    if origin is dict:
        if not isinstance(value, Mapping):
            raise ConfigurationError(f"{key}: expected a mapping")
        return dict(value)
    raise ConfigurationError(f"{key}: unsupported type {tp}")


def from_plain(cls: Type[T], data: Any, path: str = "") -> T:
    """Build dataclass ``cls`` from plain YAML data.

    Unknown keys, wrongly typed values and values rejected by the
    dataclass's own validation raise ConfigurationError naming the dotted
    key.
    """
    where = path or "config"
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"{where}: expected a mapping, got {data!r}")
    hints = get_type_hints(cls)
    names = [f.name for f in fields(cls)]  # type: ignore[arg-type]
    unknown = sorted(set(data) - set(names))
    if unknown:
        listed = ", ".join(_key(path, str(k)) for k in unknown)
        raise ConfigurationError(f"Unknown config key(s): {listed}")
    kwargs = {
        name: _coerce(hints[name], data[name], _key(path, name))
        for name in names
        if name in data
    }
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{where}: {e}") from e


def to_plain(value: Any) -> Any:
    """Convert dataclasses, enums and tuples into YAML-safe values."""
    if is_dataclass(value) and not isinstance(value, type):
        return {
            f.name: to_plain(getattr(value, f.name)) for f in fields(value)
        }
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    return value


@dataclass(frozen=True)
class ClipSection:
    enabled: bool = False
    tau: float = DEFAULT_TAU


@dataclass(frozen=True)
class LossSection:
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.8
    label_strategy: LabelStrategy = LabelStrategy.LABEL_MASKING
    clip: ClipSection = field(default_factory=ClipSection)

    def __post_init__(self) -> None:
        """Validate the loss weights after initialization."""
        self.weights()

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 10
    batch: int = 8
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    seed: int = 0
    weight_decay: float = 0.01
    checkpoint_every: int = 0
    pretrain_image_epochs: int = 0
    pretrain_tabular_epochs: int = 0
    pretrain_lr: float = 1e-3
    group_size: int = 8
    group_min_positive: int = 4
    pad_value: float = AIR_VALUE


@dataclass(frozen=True)
class DataSection:
    """Either a dataset directory or synthetic generator settings."""

    path: Optional[str] = None
    synth: Optional[SynthConfig] = None

    def __post_init__(self) -> None:
        """Fall back to the default generator when no source is given."""
        if self.path is not None and self.synth is not None:
            raise ConfigurationError(
                "data.path and data.synth are mutually exclusive"
            )
        if self.path is None and self.synth is None:
            object.__setattr__(self, "synth", SynthConfig())


@dataclass(frozen=True)
class EvalSection:
    theta: float = 0.5

    def __post_init__(self) -> None:
        """Validate the decision threshold after initialization."""
        if not 0.0 < self.theta < 1.0:
            raise ConfigurationError(
                f"eval.theta must be in (0, 1), got {self.theta}"
            )


@dataclass(frozen=True)
class OutputSection:
    dir: Optional[str] = None

    def resolve(self) -> Path:
        """Configured directory, else ``$TNF_OUTPUT_ROOT`` or ``runs``."""
        if self.dir is not None:
            return Path(self.dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce one run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self) -> None:
        """Check that data, grouping and encoders fit together."""
        input_shape = self.model.image.input_shape
        if input_shape[-1] != self.train.group_size:
            raise ConfigurationError(
                f"model.image.input_shape depth {input_shape[-1]} must equal "
                f"train.group_size {self.train.group_size}"
            )
        synth = self.data.synth
        if synth is None:
            return
        if tuple(synth.volume_shape[:3]) != tuple(input_shape[:3]):
            raise ConfigurationError(
                f"data.synth.volume_shape {synth.volume_shape} does not fit "
                f"model.image.input_shape {input_shape}"
            )
        if synth.n_attr != self.model.tabular.n_attr:
            raise ConfigurationError(
                f"data.synth.n_attr {synth.n_attr} differs from "
                f"model.tabular.n_attr {self.model.tabular.n_attr}"
            )
        if synth.num_classes != self.model.num_classes:
            raise ConfigurationError(
                f"data.synth.num_classes {synth.num_classes} differs from "
                f"the model's {self.model.num_classes} classes"
            )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.train.epochs,
            batch_size=self.train.batch,
            lr_max=self.train.lr_max,
            lr_min=self.train.lr_min,
            weight_decay=self.train.weight_decay,
            seed=self.train.seed,
            loss_weights=self.loss.weights(),
            label_strategy=self.loss.label_strategy,
            clip_enabled=self.loss.clip.enabled,
            clip_tau=self.loss.clip.tau,
            checkpoint_every=self.train.checkpoint_every,
            pretrain_image_epochs=self.train.pretrain_image_epochs,
            pretrain_tabular_epochs=self.train.pretrain_tabular_epochs,
            pretrain_lr=self.train.pretrain_lr,
            group_size=self.train.group_size,
            pad_value=self.train.pad_value,
            group_min_positive=self.train.group_min_positive,
            theta=self.eval.theta,
        )

    def output_dir(self) -> Path:
        return self.output.resolve()

    def to_dict(self) -> Dict[str, Any]:
        return to_plain(self)

    def dump_resolved(self, out_dir: Union[str, Path]) -> Path:
        """Write the fully resolved config next to a run's outputs."""
        path = Path(out_dir) / RESOLVED_CONFIG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8"
        )
        logger.debug(f"Wrote resolved config to {path}")
        return path


def parse_run_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{source} is not valid YAML: {e}") from e
    return from_plain(RunConfig, data)


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load a RunConfig from YAML; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"Cannot read config {path}: {e}") from e
    return parse_run_config(text, str(path))
