"""On-disk dataset format: one binary record file per split plus a manifest.

Split files start with the magic ``TNF1``, a u32 format version and a u32
record count. Every record then stores, little-endian:

    case id            u64
    image              u32 ndim, u32 dims, float32 payload
    tabular            u32 ndim, u32 dims, float32 payload
    slice labels       u32 count, u8 payload
    volume label       u8

``manifest.yaml`` lists the split files with their counts, shapes, dtypes,
per-record byte offsets and the generator settings that produced them.
"""

import logging
from dataclasses import asdict, dataclass, field, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import yaml

from .errors import DataError
from .models import CaseArrays, SplitData

logger = logging.getLogger(__name__)

MAGIC = b"TNF1"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.yaml"
HEADER_BYTES = len(MAGIC) + 8

U32 = np.dtype("<u4")
U64 = np.dtype("<u8")
F32 = np.dtype("<f4")
U8 = np.dtype("u1")


@dataclass
class SplitEntry:
    """Manifest description of one split file."""

    file: str
    count: int
    image_shape: List[int]
    tabular_shape: List[int]
    offsets: List[int] = field(default_factory=list)
    image_dtype: str = "<f4"
    tabular_dtype: str = "<f4"
    label_dtype: str = "u1"

    def __post_init__(self) -> None:
        """Check offsets against the record count after initialization."""
        if len(self.offsets) != self.count:
            raise DataError(
                f"{self.file}: {len(self.offsets)} offsets for "
                f"{self.count} records"
            )
        if any(b <= a for a, b in zip(self.offsets, self.offsets[1:])):
            raise DataError(f"{self.file}: offsets must strictly increase")


@dataclass
class DatasetManifest:
    format_version: int
    splits: Dict[str, SplitEntry]
    generator: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": self.format_version,
            "splits": {
                name: asdict(entry) for name, entry in self.splits.items()
            },
            "generator": self.generator,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DatasetManifest":
        try:
            version = int(data["format_version"])
            splits = {
                name: SplitEntry(**entry)
                for name, entry in data["splits"].items()
            }
        except (KeyError, TypeError, AttributeError) as e:
            raise DataError(f"Malformed dataset manifest: {e}") from e
        if version != FORMAT_VERSION:
            raise DataError(
                f"Unsupported dataset format version {version}, "
                f"expected {FORMAT_VERSION}"
            )
        return cls(version, splits, data.get("generator"))


def _pack_array(array: np.ndarray, dtype: np.dtype) -> bytes:
    header = np.array([array.ndim, *array.shape], dtype=U32).tobytes()
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def encode_record(cases: CaseArrays, index: int) -> bytes:
    slice_labels = np.asarray(cases.slice_labels[index])
    parts = [
        np.array([cases.case_ids[index]], dtype=U64).tobytes(),
        _pack_array(np.asarray(cases.images[index]), F32),
        _pack_array(np.asarray(cases.tabular[index]), F32),
        np.array([slice_labels.size], dtype=U32).tobytes(),
        slice_labels.astype(U8).tobytes(),
        np.array([cases.volume_labels[index]], dtype=U8).tobytes(),
    ]
    return b"".join(parts)


def encode_split(cases: CaseArrays) -> Tuple[bytes, List[int]]:
    """Serialize a split; returns (file bytes, record offsets)."""
    chunks = [MAGIC, np.array([FORMAT_VERSION, len(cases)], U32).tobytes()]
    offsets = []
    position = HEADER_BYTES
    for i in range(len(cases)):
        record = encode_record(cases, i)
        offsets.append(position)
        position += len(record)
        chunks.append(record)
    return b"".join(chunks), offsets


class _Reader:
    def __init__(self, buffer: bytes, source: str) -> None:
        self.buffer = buffer
        self.source = source
        self.position = 0

    def take(self, dtype: np.dtype, count: int) -> np.ndarray:
        size = dtype.itemsize * count
        if self.position + size > len(self.buffer):
            raise DataError(
                f"{self.source}: truncated record at byte {self.position}"
            )
        values = np.frombuffer(
            self.buffer, dtype=dtype, count=count, offset=self.position
        )
        self.position += size
        return values

    def take_array(self, dtype: np.dtype) -> np.ndarray:
        ndim = int(self.take(U32, 1)[0])
        shape = tuple(int(d) for d in self.take(U32, ndim))
        count = int(np.prod(shape)) if shape else 1
        return self.take(dtype, count).reshape(shape).copy()


def decode_split(buffer: bytes, source: str = "<bytes>") -> CaseArrays:
    if buffer[: len(MAGIC)] != MAGIC:
        raise DataError(f"{source}: bad magic {buffer[:len(MAGIC)]!r}")
    reader = _Reader(buffer, source)
    reader.position = len(MAGIC)
    version, count = (int(v) for v in reader.take(U32, 2))
    if version != FORMAT_VERSION:
        raise DataError(f"{source}: unsupported format version {version}")
    if count == 0:
        raise DataError(f"{source}: split has no records")
    ids, images, tabular, slice_labels, labels = [], [], [], [], []
    for _ in range(count):
        ids.append(int(reader.take(U64, 1)[0]))
        images.append(reader.take_array(F32))
        tabular.append(reader.take_array(F32))
        n_slices = int(reader.take(U32, 1)[0])
        slice_labels.append(reader.take(U8, n_slices).copy())
        labels.append(int(reader.take(U8, 1)[0]))
    if reader.position != len(buffer):
        raise DataError(
            f"{source}: {len(buffer) - reader.position} trailing bytes"
        )
    return CaseArrays(
        case_ids=np.asarray(ids, dtype=np.int64),
        images=np.stack(images),
        tabular=np.stack(tabular),
        slice_labels=np.stack(slice_labels),
        volume_labels=np.asarray(labels, dtype=np.int64),
    )


def write_dataset(
    splits: Mapping[str, CaseArrays],
    out_dir: Union[str, Path],
    generator: Any = None,
) -> DatasetManifest:
    """Write every split and ``manifest.yaml`` into ``out_dir``.

    Args:
        splits: Split name to cases
        out_dir: Target directory, created if needed
        generator: Settings echoed into the manifest (dataclass or mapping)

    Returns:
        The manifest that was written
    """
    out = Path(out_dir)
    empty = sorted(name for name, cases in splits.items() if not len(cases))
    if empty:
        raise DataError(f"Refusing to write empty splits {empty} to {out}")
    entries: Dict[str, SplitEntry] = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, cases in splits.items():
            payload, offsets = encode_split(cases)
            file_name = f"{name}.tnf"
            (out / file_name).write_bytes(payload)
            entries[name] = SplitEntry(
                file=file_name,
                count=len(cases),
                image_shape=[int(d) for d in cases.images.shape[1:]],
                tabular_shape=[int(d) for d in cases.tabular.shape[1:]],
                offsets=offsets,
            )
        echo = asdict(generator) if is_dataclass(generator) else generator
        manifest = DatasetManifest(FORMAT_VERSION, entries, _plain(echo))
        (out / MANIFEST_NAME).write_text(
            yaml.safe_dump(manifest.to_dict(), sort_keys=False),
            encoding="utf-8",
        )
    except OSError as e:
        raise DataError(f"Cannot write dataset to {out}: {e}") from e
    logger.info(
        f"Wrote dataset to {out}: "
        + ", ".join(f"{k}={v.count}" for k, v in entries.items())
    )
    return manifest


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Enum):
        return value.value
    return value


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME if root.is_dir() else root
    try:
        data = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"Cannot read manifest {manifest_path}: {e}") from e
    except yaml.YAMLError as e:
        raise DataError(f"Invalid manifest {manifest_path}: {e}") from e
    if not isinstance(data, dict):
        raise DataError(f"Invalid manifest {manifest_path}")
    return DatasetManifest.from_dict(data)


def load_dataset(path: Union[str, Path]) -> Dict[str, CaseArrays]:
    """Read every split named by the manifest at ``path``."""
    root = Path(path)
    if not root.is_dir():
        root = root.parent
    manifest = read_manifest(root)
    splits = {}
    for name, entry in manifest.splits.items():
        split_path = root / entry.file
        try:
            buffer = split_path.read_bytes()
        except OSError as e:
            raise DataError(f"Cannot read split {split_path}: {e}") from e
        cases = decode_split(buffer, str(split_path))
        if len(cases) != entry.count:
            raise DataError(
                f"{split_path}: {len(cases)} records, manifest says "
                f"{entry.count}"
            )
        splits[name] = cases
    return splits


def load_split_data(path: Union[str, Path]) -> SplitData:
    splits = load_dataset(path)
    missing = {"train", "val"} - set(splits)
    if missing:
        raise DataError(f"Dataset at {path} lacks splits {sorted(missing)}")
    return SplitData(
        train=splits["train"], val=splits["val"], test=splits.get("test")
    )
