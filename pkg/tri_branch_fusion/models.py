"""Data records shared across training, inference and evaluation."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, ContractError, ValidationError

PROBABILITY_TOLERANCE = 1e-6


class LabelStrategy(str, Enum):
    """How image and tabular labels are reconciled during training."""

    CONSISTENT = "consistent"
    LABEL_MASKING = "label_masking"
    MAX_LIKELIHOOD_SELECTION = "max_likelihood_selection"


@dataclass(frozen=True)
class LossWeights:
    """Branch weights lambda1 (image), lambda2 (tabular), lambda3 (fusion)."""

    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.8

    def __post_init__(self) -> None:
        """Validate the weights after initialization."""
        values = (self.lambda1, self.lambda2, self.lambda3)
        if any(w < 0 for w in values):
            raise ConfigurationError(f"Loss weights must be >= 0: {values}")
        if not any(w > 0 for w in values):
            raise ConfigurationError("At least one loss weight must be > 0")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(
            self.lambda1 * factor, self.lambda2 * factor, self.lambda3 * factor
        )


@dataclass
class MultimodalSample:
    """One case: an image volume [c,h,w,K] paired with a tabular record."""

    case_id: int
    image: np.ndarray
    tabular: np.ndarray
    slice_labels: np.ndarray
    volume_label: int

    def __post_init__(self) -> None:
        """Validate sample data after initialization."""
        if self.image.ndim != 4:
            raise ValidationError(
                f"Case {self.case_id}: image must be [c,h,w,K], "
                f"got {self.image.shape}"
            )
        if self.slice_labels.shape != (self.image.shape[-1],):
            raise ValidationError(
                f"Case {self.case_id}: {self.slice_labels.shape[0]} slice "
                f"labels for {self.image.shape[-1]} slices"
            )

    @property
    def image_label(self) -> int:
        """Volume-level image label: the highest slice label."""
        return int(self.slice_labels.max()) if self.slice_labels.size else 0


@dataclass
class CaseArrays:
    """Column-wise storage for the cases of one split."""

    case_ids: np.ndarray
    images: np.ndarray
    tabular: np.ndarray
    slice_labels: np.ndarray
    volume_labels: np.ndarray

    def __post_init__(self) -> None:
        """Check that every column describes the same cases."""
        n = len(self.case_ids)
        columns = {
            "images": self.images,
            "tabular": self.tabular,
            "slice_labels": self.slice_labels,
            "volume_labels": self.volume_labels,
        }
        for name, column in columns.items():
            if len(column) != n:
                raise ValidationError(
                    f"{name} has {len(column)} rows, expected {n}"
                )

    def __len__(self) -> int:
        return len(self.case_ids)

    def sample(self, index: int) -> MultimodalSample:
        return MultimodalSample(
            case_id=int(self.case_ids[index]),
            image=self.images[index],
            tabular=self.tabular[index],
            slice_labels=self.slice_labels[index],
            volume_label=int(self.volume_labels[index]),
        )

    def subset(self, indices: Sequence[int]) -> "CaseArrays":
        idx = np.asarray(indices, dtype=np.int64)
        return CaseArrays(
            case_ids=self.case_ids[idx],
            images=self.images[idx],
            tabular=self.tabular[idx],
            slice_labels=self.slice_labels[idx],
            volume_labels=self.volume_labels[idx],
        )

    @classmethod
    def from_samples(cls, samples: Sequence[MultimodalSample]) -> "CaseArrays":
        return cls(
            case_ids=np.array([s.case_id for s in samples], dtype=np.int64),
            images=np.stack([s.image for s in samples]),
            tabular=np.stack([s.tabular for s in samples]),
            slice_labels=np.stack([s.slice_labels for s in samples]),
            volume_labels=np.array(
                [s.volume_label for s in samples], dtype=np.int64
            ),
        )


@dataclass
class SplitData:
    """Train/validation(/test) partition of a dataset."""

    train: CaseArrays
    val: CaseArrays
    test: Optional[CaseArrays] = None


def _check_probability(name: str, vector: Optional[np.ndarray]) -> None:
    if vector is None:
        return
    totals = np.sum(vector, axis=-1)
    worst = float(np.max(np.abs(totals - 1.0))) if totals.size else 0.0
    if worst > PROBABILITY_TOLERANCE or np.any(vector < 0):
        raise ValidationError(
            f"{name} rows are not probability vectors "
            f"(max deviation {worst:.3e})"
        )


@dataclass
class BranchLikelihoods:
    """Branch probabilities, [C] or [n, C]; absent branches are ``None``."""

    z_i: Optional[np.ndarray] = None
    z_t: Optional[np.ndarray] = None
    z_f: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        """Validate the probability vectors after initialization."""
        if not self.present():
            raise ContractError("At least one branch likelihood is required")
        for name in ("z_i", "z_t", "z_f"):
            _check_probability(name, getattr(self, name))
        shapes = {np.shape(z) for z in self.present()}
        if len(shapes) > 1:
            raise ValidationError(f"Branch shapes differ: {sorted(shapes)}")

    def present(self) -> List[np.ndarray]:
        return [z for z in (self.z_i, self.z_t, self.z_f) if z is not None]


@dataclass
class PredictionSet:
    """Averaged scores, decisions and ground truth over one split."""

    scores: np.ndarray
    predicted: np.ndarray
    labels: np.ndarray
    theta: float = 0.5
    case_ids: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        """Validate prediction data after initialization."""
        if self.scores.ndim != 2:
            raise ValidationError(
                f"scores must be [n, C], got {self.scores.shape}"
            )
        n, classes = self.scores.shape
        if len(self.predicted) != n or len(self.labels) != n:
            raise ValidationError("scores, predicted and labels differ in n")
        if classes == 2 and not 0.0 < self.theta < 1.0:
            raise ValidationError(f"theta must be in (0, 1), got {self.theta}")
        if n and (self.predicted.min() < 0 or self.predicted.max() >= classes):
            raise ValidationError("predicted labels out of range")

    @property
    def num_classes(self) -> int:
        return int(self.scores.shape[1])

    def __len__(self) -> int:
        return int(self.scores.shape[0])


@dataclass
class MetricsReport:
    """Classification metrics for one evaluation run.

    ``auroc`` and ``auprc`` are ``None`` when the ground truth holds a single
    class.
    """

    acc: float
    mcc: float
    auroc: Optional[float]
    auprc: Optional[float]
    recall: float
    jaccard: float
    macro_f1: float
    roc_points: List[Tuple[float, float]] = field(default_factory=list)
    pr_points: List[Tuple[float, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        """Check metric ranges after initialization."""
        eps = 1e-9
        unit = {
            "acc": self.acc,
            "auroc": self.auroc,
            "auprc": self.auprc,
            "recall": self.recall,
            "jaccard": self.jaccard,
            "macro_f1": self.macro_f1,
        }
        for name, value in unit.items():
            if value is not None and not -eps <= value <= 1.0 + eps:
                raise ValidationError(f"{name} outside [0, 1]: {value}")
        if not -1.0 - eps <= self.mcc <= 1.0 + eps:
            raise ValidationError(f"mcc outside [-1, 1]: {self.mcc}")

    def as_dict(self) -> Dict[str, Optional[float]]:
        """Return the scalar metrics keyed by name."""
        return {
            "acc": self.acc,
            "mcc": self.mcc,
            "auroc": self.auroc,
            "auprc": self.auprc,
            "recall": self.recall,
            "jaccard": self.jaccard,
            "macro_f1": self.macro_f1,
        }
