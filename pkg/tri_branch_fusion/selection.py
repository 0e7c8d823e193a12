"""Slice grouping, maximum likelihood selection and training views."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError, ValidationError
from .models import CaseArrays, LabelStrategy
from .network import TnfModel
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

AIR_VALUE = -1000.0
DEFAULT_GROUP_SIZE = 24
DEFAULT_MIN_POSITIVE = 4

GroupScorer = Callable[[np.ndarray], Union[np.ndarray, Sequence[float]]]


@dataclass
class VolumeGrouping:
    """A K-slice volume cut into ceil(K/G) slabs of exactly G slices."""

    group_size: int
    pad_value: float
    n_slices: int
    groups: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        """Check group count and slab depth after initialization."""
        expected = math.ceil(self.n_slices / self.group_size)
        if len(self.groups) != expected:
            raise ValidationError(
                f"{self.n_slices} slices need {expected} groups of "
                f"{self.group_size}, got {len(self.groups)}"
            )
        for i, group in enumerate(self.groups):
            if group.shape[-1] != self.group_size:
                raise ValidationError(
                    f"Group {i} has {group.shape[-1]} slices, expected "
                    f"{self.group_size}"
                )

    def __len__(self) -> int:
        return len(self.groups)

    @property
    def padded_slices(self) -> int:
        return len(self.groups) * self.group_size - self.n_slices

    def stack(self) -> np.ndarray:
        """Return the groups as one [N, c, h, w, G] array."""
        return np.stack(self.groups)


def group_volume(
    volume: Union[np.ndarray, Tensor],
    group_size: int = DEFAULT_GROUP_SIZE,
    pad_value: float = AIR_VALUE,
) -> VolumeGrouping:
    """Split a [c, h, w, K] volume into consecutive G-slice groups.

    The last group is filled up to G slices with ``pad_value``.
    """
    data = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    if data.ndim != 4:
        raise DimensionError(f"Volume must be [c, h, w, K], got {data.shape}")
    if group_size < 1:
        raise ValidationError(f"Group size must be >= 1, got {group_size}")
    k = data.shape[-1]
    if k == 0:
        raise ValidationError("Cannot group an empty volume (K = 0)")
    n_groups = math.ceil(k / group_size)
    padded = np.full(
        data.shape[:-1] + (n_groups * group_size,), pad_value, dtype=data.dtype
    )
    padded[..., :k] = data
    groups = [
        padded[..., j * group_size : (j + 1) * group_size].copy()
        for j in range(n_groups)
    ]
    return VolumeGrouping(group_size, pad_value, k, groups)


def group_slice_labels(
    slice_labels: np.ndarray,
    group_size: int = DEFAULT_GROUP_SIZE,
    min_positive: int = DEFAULT_MIN_POSITIVE,
) -> np.ndarray:
    """Label each G-slice group from its slices.

    A group is positive when at least ``min_positive`` of its slices are;
    it then carries the highest slice label it contains. Padding slices
    count as negative.
    """
    labels = np.asarray(slice_labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size == 0:
        raise ValidationError(
            f"Slice labels must be a non-empty vector, got {labels.shape}"
        )
    n_groups = math.ceil(labels.size / group_size)
    padded = np.zeros(n_groups * group_size, dtype=np.int64)
    padded[: labels.size] = labels
    blocks = padded.reshape(n_groups, group_size)
    positive = (blocks > 0).sum(axis=1) >= min_positive
    return np.where(positive, blocks.max(axis=1), 0)


def max_likelihood_select(
    groups: Union[VolumeGrouping, Sequence[np.ndarray]],
    scorer: GroupScorer,
) -> Tuple[int, np.ndarray]:
    """Return (j', group j') where j' maximizes the positive likelihood.

    Ties resolve to the lowest group index.
    """
    slabs = groups.groups if isinstance(groups, VolumeGrouping) else groups
    if len(slabs) == 0:
        raise ContractError("max_likelihood_select needs at least one group")
    scores = np.asarray(scorer(np.stack(list(slabs))), dtype=np.float64)
    if scores.shape != (len(slabs),):
        raise ContractError(
            f"Scorer returned {scores.shape} for {len(slabs)} groups"
        )
    best = int(np.argmax(scores))
    return best, slabs[best]


class ImageBranchScorer:
    """Scores slabs by the image branch's positive likelihood 1 - z_i[0]."""

    def __init__(self, model: TnfModel, batch_size: int = 64) -> None:
        self.model = model
        self.batch_size = batch_size

    def __call__(self, slabs: np.ndarray) -> np.ndarray:
        scores = []
        with no_grad():
            for start in range(0, len(slabs), self.batch_size):
                chunk = Tensor(slabs[start : start + self.batch_size])
                z_i = self.model.image_encoder(chunk).likelihood.data
                scores.append(1.0 - z_i[:, 0].astype(np.float64))
        return np.concatenate(scores) if scores else np.zeros(0)


@dataclass
class TrainingView:
    """Per-sample training inputs derived from volume-level cases.

    Rows are image slabs [c,h,w,G] paired with their case's tabular vector.
    ``case_index`` maps each row back to the case it came from.
    """

    images: np.ndarray
    tabular: np.ndarray
    image_labels: np.ndarray
    tabular_labels: np.ndarray
    case_index: np.ndarray

    def __post_init__(self) -> None:
        """Check that every column has one entry per row."""
        n = len(self.images)
        columns = ("tabular", "image_labels", "tabular_labels", "case_index")
        for name in columns:
            if len(getattr(self, name)) != n:
                raise ValidationError(f"TrainingView column {name} != {n}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def consistent_fraction(self) -> float:
        if not len(self):
            return 1.0
        return float(np.mean(self.image_labels == self.tabular_labels))


def select_groups(
    cases: CaseArrays,
    scorer: GroupScorer,
    group_size: int,
    pad_value: float = AIR_VALUE,
) -> Tuple[np.ndarray, np.ndarray]:
    """Pick the most positive group of every case.

    Returns (selected group index per case, [n, c, h, w, G] slabs). All
    groups of all cases are scored in one pass.
    """
    groupings = [
        group_volume(image, group_size, pad_value) for image in cases.images
    ]
    if not groupings:
        raise ContractError("Cannot select groups from an empty split")
    counts = [len(g) for g in groupings]
    scores = np.asarray(
        scorer(np.concatenate([g.stack() for g in groupings])),
        dtype=np.float64,
    )
    bounds = np.cumsum([0] + counts)
    selected = np.array(
        [
            int(np.argmax(scores[bounds[i] : bounds[i + 1]]))
            for i in range(len(groupings))
        ],
        dtype=np.int64,
    )
    slabs = np.stack([g.groups[j] for g, j in zip(groupings, selected)])
    return selected, slabs


def build_group_view(
    cases: CaseArrays,
    strategy: LabelStrategy,
    group_size: int,
    pad_value: float = AIR_VALUE,
    min_positive: int = DEFAULT_MIN_POSITIVE,
    scorer: Optional[GroupScorer] = None,
) -> TrainingView:
    """Turn cases into slab-level training rows for ``strategy``.

    CONSISTENT keeps every group and labels it with the volume label;
    LABEL_MASKING keeps every group with its own group label as the image
    label; MAX_LIKELIHOOD_SELECTION keeps one scored group per case, labelled
    with the volume label.
    """
    strategy = LabelStrategy(strategy)
    if strategy is LabelStrategy.MAX_LIKELIHOOD_SELECTION:
        if scorer is None:
            raise ContractError(
                "Maximum likelihood selection needs a pretrained image scorer"
            )
        _, slabs = select_groups(cases, scorer, group_size, pad_value)
        labels = cases.volume_labels.astype(np.int64)
        view = TrainingView(
            images=slabs,
            tabular=cases.tabular,
            image_labels=labels.copy(),
            tabular_labels=labels,
            case_index=np.arange(len(cases)),
        )
        if not np.array_equal(view.image_labels, view.tabular_labels):
            raise ContractError("Selected groups carry inconsistent labels")
        return view

    images, image_labels, case_index = [], [], []
    for i in range(len(cases)):
        grouping = group_volume(cases.images[i], group_size, pad_value)
        if strategy is LabelStrategy.LABEL_MASKING:
            labels = group_slice_labels(
                cases.slice_labels[i], group_size, min_positive
            )
        else:
            labels = np.full(len(grouping), cases.volume_labels[i])
        images.extend(grouping.groups)
        image_labels.extend(int(y) for y in labels)
        case_index.extend([i] * len(grouping))
    index = np.asarray(case_index, dtype=np.int64)
    view = TrainingView(
        images=np.stack(images),
        tabular=cases.tabular[index],
        image_labels=np.asarray(image_labels, dtype=np.int64),
        tabular_labels=cases.volume_labels[index].astype(np.int64),
        case_index=index,
    )
    logger.debug(
        f"{strategy.value} view: {len(view)} rows, "
        f"{view.consistent_fraction:.3f} consistent"
    )
    return view
