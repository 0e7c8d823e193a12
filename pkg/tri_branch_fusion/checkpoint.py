"""Binary checkpoints: model parameters, optimizer moments and run metadata.

Layout (little-endian): magic ``TNFC``, u32 format version, u32 header
length, a YAML header, then the raw tensor payloads in header order.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import yaml

from .config import from_plain, to_plain
from .errors import ConfigurationError, DataError
from .network import ModelConfig, TnfModel
from .optim import AdamW, CosineSchedule

logger = logging.getLogger(__name__)

MAGIC = b"TNFC"
FORMAT_VERSION = 1

PARAMETERS = "parameters"
FIRST_MOMENTS = "first_moments"
SECOND_MOMENTS = "second_moments"
SECTIONS = (PARAMETERS, FIRST_MOMENTS, SECOND_MOMENTS)

_U32 = np.dtype("<u4")


@dataclass
class Checkpoint:
    """Architecture echo, tensors and optional optimizer state of a model."""

    architecture: Dict[str, Any]
    parameters: Dict[str, np.ndarray]
    seed: int = 0
    epoch: Optional[int] = None
    best_val_acc: Optional[float] = None
    optimizer: Optional[Dict[str, Any]] = None
    first_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def tensor_section(self, section: str) -> Dict[str, np.ndarray]:
        return {
            PARAMETERS: self.parameters,
            FIRST_MOMENTS: self.first_moments,
            SECOND_MOMENTS: self.second_moments,
        }[section]


def _little_endian(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    entries: List[Dict[str, Any]] = []
    payloads: List[bytes] = []
    for section in SECTIONS:
        for name, array in checkpoint.tensor_section(section).items():
            data = _little_endian(np.asarray(array))
            entries.append(
                {
                    "section": section,
                    "name": name,
                    "shape": [int(d) for d in data.shape],
                    "dtype": data.dtype.str,
                }
            )
            payloads.append(data.tobytes())
    header = {
        "architecture": checkpoint.architecture,
        "seed": checkpoint.seed,
        "epoch": checkpoint.epoch,
        "best_val_acc": checkpoint.best_val_acc,
        "optimizer": checkpoint.optimizer,
        "tensors": entries,
    }
    header_bytes = yaml.safe_dump(header, sort_keys=False).encode("utf-8")
    prefix = np.array(
        [checkpoint.format_version, len(header_bytes)], dtype=_U32
    ).tobytes()
    return MAGIC + prefix + header_bytes + b"".join(payloads)


def decode_checkpoint(buffer: bytes, source: str = "<bytes>") -> Checkpoint:
    if buffer[: len(MAGIC)] != MAGIC:
        raise DataError(f"{source}: not a checkpoint (bad magic)")
    start = len(MAGIC) + 2 * _U32.itemsize
    if len(buffer) < start:
        raise DataError(f"{source}: truncated checkpoint header")
    version, header_length = (
        int(v) for v in np.frombuffer(buffer, _U32, 2, len(MAGIC))
    )
    if version != FORMAT_VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = yaml.safe_load(
            buffer[start : start + header_length].decode("utf-8")
        )
        entries = header["tensors"]
    except (UnicodeDecodeError, yaml.YAMLError, KeyError, TypeError) as e:
        raise DataError(f"{source}: corrupt checkpoint header: {e}") from e

    checkpoint = Checkpoint(
        architecture=header["architecture"],
        parameters={},
        seed=header.get("seed", 0),
        epoch=header.get("epoch"),
        best_val_acc=header.get("best_val_acc"),
        optimizer=header.get("optimizer"),
        format_version=version,
    )
    offset = start + header_length
    for entry in entries:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * dtype.itemsize
        if end > len(buffer):
            raise DataError(f"{source}: truncated tensor {entry['name']}")
        values = np.frombuffer(buffer, dtype, count, offset).reshape(shape)
        section = checkpoint.tensor_section(entry["section"])
        section[entry["name"]] = values.copy()
        offset = end
    if offset != len(buffer):
        raise DataError(f"{source}: {len(buffer) - offset} trailing bytes")
    return checkpoint


def checkpoint_from_model(
    model: TnfModel,
    optimizer: Optional[AdamW] = None,
    best_val_acc: Optional[float] = None,
    epoch: Optional[int] = None,
) -> Checkpoint:
    checkpoint = Checkpoint(
        architecture=to_plain(model.config),
        parameters=model.state_dict(),
        seed=model.seed,
        epoch=epoch,
        best_val_acc=None if best_val_acc is None else float(best_val_acc),
    )
    if optimizer is not None:
        state = optimizer.state
        checkpoint.optimizer = {
            "step": state.step,
            "total_steps": state.schedule.total_steps,
            "lr_max": state.schedule.lr_max,
            "lr_min": state.schedule.lr_min,
            "weight_decay": state.weight_decay,
            "betas": list(state.betas),
            "eps": state.eps,
            "param_steps": dict(state.param_steps),
        }
        checkpoint.first_moments = {
            k: v.copy() for k, v in state.first_moments.items()
        }
        checkpoint.second_moments = {
            k: v.copy() for k, v in state.second_moments.items()
        }
    return checkpoint


def save_checkpoint(
    path: Union[str, Path],
    model: TnfModel,
    optimizer: Optional[AdamW] = None,
    best_val_acc: Optional[float] = None,
    epoch: Optional[int] = None,
) -> Path:
    path = Path(path)
    payload = encode_checkpoint(
        checkpoint_from_model(model, optimizer, best_val_acc, epoch)
    )
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        raise DataError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        buffer = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(buffer, str(path))


def restore_model(
    checkpoint: Checkpoint, expected: Optional[ModelConfig] = None
) -> TnfModel:
    """Rebuild the model described by ``checkpoint`` and load its weights.

    Raises:
        ConfigurationError: When ``expected`` differs from the stored
            architecture
    """
    if expected is not None and to_plain(expected) != checkpoint.architecture:
        raise ConfigurationError(
            "Checkpoint architecture does not match the configured model"
        )
    config = from_plain(ModelConfig, checkpoint.architecture, "architecture")
    model = TnfModel(config, seed=checkpoint.seed)
    model.load_state_dict(checkpoint.parameters)
    return model


def restore_optimizer(checkpoint: Checkpoint, model: TnfModel) -> AdamW:
    """Rebuild an AdamW bound to ``model`` with the saved moments."""
    saved = checkpoint.optimizer
    if saved is None:
        raise DataError("Checkpoint holds no optimizer state")
    optimizer = AdamW(
        model,
        CosineSchedule(saved["total_steps"], saved["lr_max"], saved["lr_min"]),
        weight_decay=saved["weight_decay"],
        betas=(saved["betas"][0], saved["betas"][1]),
        eps=saved["eps"],
    )
    optimizer.state.step = saved["step"]
    optimizer.state.param_steps = dict(saved["param_steps"])
    optimizer.state.first_moments = {
        k: v.copy() for k, v in checkpoint.first_moments.items()
    }
    optimizer.state.second_moments = {
        k: v.copy() for k, v in checkpoint.second_moments.items()
    }
    return optimizer
