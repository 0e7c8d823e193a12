"""Synthetic paired volumes and tabular records with inconsistent labels.

Positive volumes receive a Gaussian blob on a contiguous run of slices, so
per-slice labels follow the blob while the tabular record carries the
volume label. Grouping slices then reproduces the regime where a positive
table pairs with a negative image group.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .dataset_io import DatasetManifest, write_dataset
from .errors import ConfigurationError
from .models import CaseArrays, SplitData
from .selection import group_slice_labels

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


def split_bounds(n_cases: int, fractions: Sequence[float]) -> np.ndarray:
    """Return the n+1 cut points [0, ..., n_cases] of a split partition."""
    cuts = np.floor(np.cumsum(fractions) * n_cases).astype(int)
    cuts[-1] = n_cases
    return np.concatenate([[0], cuts])


@dataclass(frozen=True)
class SynthConfig:
    """Size, signal and label-structure parameters of a synthetic dataset."""

    n_cases: int = 600
    volume_shape: Tuple[int, int, int, int] = (1, 8, 8, 32)
    n_attr: int = 12
    n_informative: int = 4
    rho: float = 0.7
    slice_positive_rate: float = 0.15
    positive_fraction: float = 0.5
    num_classes: int = 2
    seed: int = 0
    split_fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    blob_amplitude: float = 3.0
    blob_sigma: float = 1.2
    noise_std: float = 1.0
    informative_shift: float = 1.5
    include_nuisance: bool = True

    def __post_init__(self) -> None:
        """Validate generator settings after initialization."""
        if self.n_cases < len(SPLIT_NAMES):
            raise ConfigurationError(
                f"n_cases must be >= {len(SPLIT_NAMES)}, got {self.n_cases}"
            )
        if len(self.volume_shape) != 4 or min(self.volume_shape) < 1:
            raise ConfigurationError(
                f"volume_shape must be 4 positive extents, "
                f"got {self.volume_shape}"
            )
        if not 0 <= self.n_informative <= self.n_attr or self.n_attr < 1:
            raise ConfigurationError(
                f"Need 1 <= n_attr and 0 <= n_informative <= n_attr, got "
                f"{self.n_attr}, {self.n_informative}"
            )
        rates = {
            "rho": self.rho,
            "slice_positive_rate": self.slice_positive_rate,
            "positive_fraction": self.positive_fraction,
        }
        for name, value in rates.items():
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1]: {value}")
        if self.num_classes not in (2, 3):
            raise ConfigurationError("num_classes must be 2 or 3")
        if len(self.split_fractions) != len(SPLIT_NAMES):
            raise ConfigurationError("split_fractions needs three entries")
        if min(self.split_fractions) < 0 or not math.isclose(
            sum(self.split_fractions), 1.0, abs_tol=1e-9
        ):
            raise ConfigurationError(
                f"split_fractions must be >= 0 and sum to 1, "
                f"got {self.split_fractions}"
            )
        sizes = np.diff(split_bounds(self.n_cases, self.split_fractions))
        if sizes.min() < 1:
            raise ConfigurationError(
                f"split_fractions {self.split_fractions} leave an empty "
                f"split for n_cases={self.n_cases}: sizes {sizes.tolist()}"
            )
        if self.blob_sigma <= 0 or self.noise_std < 0:
            raise ConfigurationError("Need blob_sigma > 0 and noise_std >= 0")


class SyntheticGenerator:
    """Draws cases deterministically from one seeded generator."""

    def __init__(self, config: SynthConfig) -> None:
        self.config = config
        self.logger = logging.getLogger(__name__)
        _, h, w, _ = config.volume_shape
        hh, ww = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        centre = ((h - 1) / 4.0, (w - 1) / 4.0)
        dist2 = (hh - centre[0]) ** 2 + (ww - centre[1]) ** 2
        self.blob = np.exp(-dist2 / (2.0 * config.blob_sigma**2))

    def _draw_label(self, rng: np.random.Generator) -> int:
        if rng.random() >= self.config.positive_fraction:
            return 0
        return int(rng.integers(1, self.config.num_classes))

    def _draw_volume(
        self, label: int, rng: np.random.Generator
    ) -> Tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        c, h, w, k = cfg.volume_shape
        volume = cfg.noise_std * rng.standard_normal((c, h, w, k))
        slice_labels = np.zeros(k, dtype=np.uint8)
        if label > 0:
            n_pos = max(1, int(rng.binomial(k, cfg.slice_positive_rate)))
            start = int(rng.integers(0, k - n_pos + 1))
            amplitude = cfg.blob_amplitude * label
            volume[:, :, :, start : start + n_pos] += (
                amplitude * self.blob[None, :, :, None]
            )
            slice_labels[start : start + n_pos] = label
        return volume.astype(np.float32), slice_labels

    def _draw_tabular(
        self, label: int, rng: np.random.Generator
    ) -> np.ndarray:
        cfg = self.config
        noise = rng.standard_normal(cfg.n_attr)
        record = np.zeros(cfg.n_attr)
        # label scaled to [-1, 1]
        scaled = 2.0 * label / (cfg.num_classes - 1) - 1.0
        signal = cfg.informative_shift * scaled
        informative = slice(0, cfg.n_informative)
        record[informative] = cfg.rho * signal + math.sqrt(
            1.0 - cfg.rho**2
        ) * noise[informative]
        if cfg.include_nuisance:
            record[cfg.n_informative :] = noise[cfg.n_informative :]
        return record.astype(np.float32)

    def generate_cases(self) -> CaseArrays:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        labels = np.zeros(cfg.n_cases, dtype=np.int64)
        images, tabular, slice_labels = [], [], []
        for i in range(cfg.n_cases):
            labels[i] = self._draw_label(rng)
            volume, per_slice = self._draw_volume(int(labels[i]), rng)
            images.append(volume)
            slice_labels.append(per_slice)
            tabular.append(self._draw_tabular(int(labels[i]), rng))
        cases = CaseArrays(
            case_ids=np.arange(cfg.n_cases, dtype=np.int64),
            images=np.stack(images),
            tabular=np.stack(tabular),
            slice_labels=np.stack(slice_labels),
            volume_labels=labels,
        )
        impossible = (cases.slice_labels.max(axis=1) > 0) & (labels == 0)
        assert not impossible.any(), "positive slice in a negative volume"
        return cases

    def split(self, cases: CaseArrays) -> Dict[str, CaseArrays]:
        """Partition cases into disjoint train/val/test subsets."""
        rng = np.random.default_rng(self.config.seed + 1)
        order = rng.permutation(len(cases))
        bounds = split_bounds(len(cases), self.config.split_fractions)
        return {
            name: cases.subset(np.sort(order[start:stop]))
            for name, start, stop in zip(SPLIT_NAMES, bounds, bounds[1:])
        }

    def generate(self) -> Dict[str, CaseArrays]:
        splits = self.split(self.generate_cases())
        self.logger.info(
            "Generated splits: "
            + ", ".join(f"{k}={len(v)}" for k, v in splits.items())
        )
        return splits


def as_split_data(splits: Dict[str, CaseArrays]) -> SplitData:
    return SplitData(
        train=splits["train"], val=splits["val"], test=splits.get("test")
    )


def gen_synthetic(
    config: SynthConfig, out_dir: Union[str, Path]
) -> DatasetManifest:
    """Generate a dataset and write it with its manifest under ``out_dir``."""
    splits = SyntheticGenerator(config).generate()
    return write_dataset(splits, out_dir, generator=config)


@dataclass
class InconsistencyTable:
    """2x2 counts of (tabular label, image label) for slices and groups.

    Rows index the tabular (volume) label and columns the image label, both
    binarized as positive when > 0. Cell [1, 0] counts positive tables
    paired with negative images.
    """

    slice_counts: np.ndarray
    group_counts: np.ndarray
    group_size: int

    @property
    def slice_inconsistent(self) -> int:
        return int(self.slice_counts[1, 0])

    @property
    def group_inconsistent(self) -> int:
        return int(self.group_counts[1, 0])

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for unit, counts in (
            ("slice", self.slice_counts),
            (f"group_{self.group_size}", self.group_counts),
        ):
            for tab in (0, 1):
                rows.append(
                    {
                        "unit": unit,
                        "tabular": tab,
                        "image_0": int(counts[tab, 0]),
                        "image_1": int(counts[tab, 1]),
                    }
                )
        return pd.DataFrame(rows)


def inconsistency_stats(
    cases: CaseArrays, group_size: int = 8, min_positive: int = 4
) -> InconsistencyTable:
    """Count label agreement per slice and per G-slice group."""
    slice_counts = np.zeros((2, 2), dtype=np.int64)
    group_counts = np.zeros((2, 2), dtype=np.int64)
    pairs = zip(cases.slice_labels, cases.volume_labels)
    for per_slice, volume_label in pairs:
        tab = int(volume_label > 0)
        positive = np.asarray(per_slice) > 0
        slice_counts[tab, 1] += int(positive.sum())
        slice_counts[tab, 0] += int((~positive).sum())
        groups = group_slice_labels(per_slice, group_size, min_positive) > 0
        group_counts[tab, 1] += int(groups.sum())
        group_counts[tab, 0] += int((~groups).sum())
    return InconsistencyTable(slice_counts, group_counts, group_size)
