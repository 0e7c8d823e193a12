"""Grad-CAM heatmaps for 3D volumes and exact Shapley attribute importance."""

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from scipy.ndimage import zoom
from scipy.special import comb

from .errors import (
    ContractError,
    DataError,
    GraphError,
    ValidationError,
)
from .network import TnfModel
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

MAX_EXACT_ATTRIBUTES = 16

ValueFunction = Callable[[np.ndarray], float]


class CamBranch(str, Enum):
    IMAGE = "image"
    FUSION = "fusion"


@dataclass(frozen=True)
class CamTarget:
    """Which output to explain: a branch and one of its classes."""

    branch: CamBranch = CamBranch.IMAGE
    class_index: int = 1

    def __post_init__(self) -> None:
        """Validate the target after initialization."""
        object.__setattr__(self, "branch", CamBranch(self.branch))
        if self.class_index < 0:
            raise ValidationError(
                f"class_index must be >= 0, got {self.class_index}"
            )


@dataclass
class Heatmap:
    """Grad-CAM map on the conv grid and resampled to the input grid."""

    values: np.ndarray
    upsampled: np.ndarray
    target: CamTarget
    layer: int
    channel_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        """Check non-negativity after initialization."""
        if self.values.ndim != 3 or self.upsampled.ndim != 3:
            raise ValidationError("Heatmaps must be 3D volumes")
        if np.any(self.values < 0) or np.any(self.upsampled < 0):
            raise ValidationError("Heatmap values must be non-negative")

    def mass_fraction(self, region: Tuple[slice, slice, slice]) -> float:
        """Share of the upsampled heatmap mass inside ``region``."""
        total = float(self.upsampled.sum())
        if total == 0.0:
            return 0.0
        return float(self.upsampled[region].sum()) / total

    def write(self, path: Union[str, Path]) -> Path:
        """Write raw little-endian float32 values plus a YAML header.

        Returns:
            Path of the sidecar header
        """
        path = Path(path)
        header_path = path.with_suffix(path.suffix + ".yaml")
        header = {
            "dims": list(self.upsampled.shape),
            "spacing": [1.0, 1.0, 1.0],
            "dtype": "<f4",
            "order": "C",
            "source_dims": list(self.values.shape),
            "branch": self.target.branch.value,
            "class_index": self.target.class_index,
            "layer": self.layer,
        }
        try:
            path.write_bytes(self.upsampled.astype("<f4").tobytes())
            header_path.write_text(
                yaml.safe_dump(header, sort_keys=False), encoding="utf-8"
            )
        except OSError as e:
            raise DataError(f"Cannot write heatmap to {path}: {e}") from e
        return header_path


def channel_weights(gradient: np.ndarray) -> np.ndarray:
    """Average a [c, h, w, d] gradient into one weight per channel."""
    return gradient.mean(axis=(1, 2, 3))


def grad_cam_from_activation(
    activation: np.ndarray, gradient: np.ndarray
) -> np.ndarray:
    """ReLU(sum_k w_k A_k) with w_k the pooled gradient of channel k."""
    if activation.shape != gradient.shape or activation.ndim != 4:
        raise ValidationError(
            f"Activation {activation.shape} and gradient {gradient.shape} "
            f"must be matching [c, h, w, d] arrays"
        )
    weights = channel_weights(gradient)
    return np.maximum(np.tensordot(weights, activation, axes=1), 0.0)


def upsample_trilinear(
    volume: np.ndarray, shape: Tuple[int, int, int]
) -> np.ndarray:
    factors = [t / s for t, s in zip(shape, volume.shape)]
    resized = zoom(volume, factors, order=1, mode="nearest", grid_mode=False)
    if resized.shape != tuple(shape):
        raise ContractError(f"Upsampled {resized.shape}, expected {shape}")
    return np.maximum(resized, 0.0)


def grad_cam_3d(
    model: TnfModel,
    x_i: np.ndarray,
    x_t: Optional[np.ndarray],
    target: CamTarget,
    layer: int = -1,
) -> Heatmap:
    """Grad-CAM of one sample for one branch output.

    ``x_i`` is a single [c, h, w, d] slab (or a batch of one) and ``x_t``
    its tabular record, required for the fusion branch. ``layer`` indexes
    the image encoder's conv stages; the default is the last one. Each call
    runs one backward pass from the chosen logit.
    """
    image = np.asarray(x_i)
    if image.ndim == 4:
        image = image[None]
    if image.ndim != 5 or image.shape[0] != 1:
        raise ValidationError(
            f"Grad-CAM explains one sample, got image {np.shape(x_i)}"
        )
    tabular = None
    if x_t is not None:
        tabular = np.asarray(x_t).reshape(1, -1)
    if target.branch is CamBranch.FUSION:
        if not model.has_fusion:
            raise GraphError("Model has no fusion branch to explain")
        if tabular is None:
            raise GraphError("The fusion output needs the tabular input")
    if not 0 <= target.class_index < model.config.num_classes:
        raise ValidationError(
            f"class_index {target.class_index} outside "
            f"[0, {model.config.num_classes})"
        )

    model.zero_grad()
    x_t_tensor = None
    if tabular is not None and target.branch is CamBranch.FUSION:
        x_t_tensor = Tensor(tabular)
    out = model(Tensor(image), x_t_tensor)
    assert out.image is not None
    try:
        activation = out.image.activations[layer]
    except IndexError as e:
        raise GraphError(
            f"Image encoder has {len(out.image.activations)} conv stages, "
            f"no layer {layer}"
        ) from e
    if target.branch is CamBranch.FUSION:
        assert out.fused is not None
        logits = out.fused.logits
    else:
        logits = out.image.logits
    backward(logits[0, target.class_index])
    gradient = activation.grad
    model.zero_grad()
    if gradient is None:
        raise GraphError(
            f"Conv stage {layer} is not on the path to the "
            f"{target.branch.value} output"
        )

    values = grad_cam_from_activation(activation.data[0], gradient[0])
    upsampled = upsample_trilinear(
        values.astype(np.float64), tuple(image.shape[2:])
    )
    return Heatmap(
        values=values,
        upsampled=upsampled,
        target=target,
        layer=layer,
        channel_weights=channel_weights(gradient[0]),
    )


@dataclass
class AttributionReport:
    """Exact Shapley values of a set function over attributes."""

    phi: np.ndarray
    ranking: List[int]
    description: str
    empty_value: float
    full_value: float

    def __post_init__(self) -> None:
        """Check the efficiency property after initialization."""
        gap = abs(float(self.phi.sum()) - (self.full_value - self.empty_value))
        if gap > 1e-8 * max(1.0, abs(self.full_value - self.empty_value)):
            raise ContractError(
                f"Shapley values violate efficiency by {gap:.3e}"
            )

    @property
    def n_attr(self) -> int:
        return int(self.phi.shape[0])


def shapley_importance(
    value_fn: ValueFunction,
    n_attr: int,
    description: str = "",
    max_attr: int = MAX_EXACT_ATTRIBUTES,
) -> AttributionReport:
    """Exact Shapley values by enumerating all 2^n attribute subsets.

    ``value_fn`` receives a boolean mask of the attributes in the subset.
    phi_i = sum over S not containing i of
    |S|! (n - |S| - 1)! / n! * (f(S + i) - f(S)).
    """
    if n_attr < 1:
        raise ValidationError("Shapley attribution needs n_attr >= 1")
    if n_attr > max_attr:
        raise ValidationError(
            f"Exact Shapley values over {n_attr} attributes need 2^{n_attr} "
            f"evaluations; the cap is {max_attr}. Select a subset of at most "
            f"{max_attr} attributes first"
        )
    values: Dict[Tuple[bool, ...], float] = {}
    for subset in itertools.product((False, True), repeat=n_attr):
        values[subset] = float(value_fn(np.array(subset, dtype=bool)))
    logger.debug(f"Evaluated {len(values)} subsets for {description!r}")

    weights = [
        1.0 / (n_attr * comb(n_attr - 1, size, exact=True))
        for size in range(n_attr)
    ]
    phi = np.zeros(n_attr)
    for subset, value in values.items():
        size = sum(subset)
        for i in range(n_attr):
            if subset[i]:
                continue
            with_i = subset[:i] + (True,) + subset[i + 1 :]
            phi[i] += weights[size] * (values[with_i] - value)

    report = AttributionReport(
        phi=phi,
        ranking=[],
        description=description,
        empty_value=values[(False,) * n_attr],
        full_value=values[(True,) * n_attr],
    )
    report.ranking = select_top_k(report, n_attr)
    return report


def select_top_k(report: AttributionReport, k: int) -> List[int]:
    """Ids of the k largest |phi|, ties broken by the lower id."""
    if k < 0 or k > report.n_attr:
        raise ValidationError(f"k must be in [0, {report.n_attr}], got {k}")
    order = sorted(
        range(report.n_attr), key=lambda i: (-abs(report.phi[i]), i)
    )
    return order[:k]


class TabularAccuracyValue:
    """Set function: tabular-branch accuracy with absent attributes imputed.

    Attributes outside the subset are replaced by their training-set mean.
    With ``players`` only those attributes take part in the game; every
    other attribute keeps its observed value.
    """

    def __init__(
        self,
        model: TnfModel,
        train_tabular: np.ndarray,
        val_tabular: np.ndarray,
        val_labels: np.ndarray,
        theta: float = 0.5,
        players: Optional[Sequence[int]] = None,
    ) -> None:
        self.model = model
        self.means = np.asarray(train_tabular, dtype=np.float64).mean(axis=0)
        self.val_tabular = np.asarray(val_tabular, dtype=np.float64)
        self.val_labels = np.asarray(val_labels, dtype=np.int64)
        self.theta = theta
        width = self.val_tabular.shape[1]
        self.players = list(range(width)) if players is None else list(players)
        if any(not 0 <= p < width for p in self.players):
            raise ValidationError(
                f"Attribute ids must be in [0, {width}): {self.players}"
            )
        self.evaluations = 0

    @property
    def n_attr(self) -> int:
        return len(self.players)

    def __call__(self, mask: np.ndarray) -> float:
        self.evaluations += 1
        keep = np.ones(self.val_tabular.shape[1], dtype=bool)
        keep[self.players] = np.asarray(mask, dtype=bool)
        x = np.where(keep[None, :], self.val_tabular, self.means[None, :])
        with no_grad():
            z_t = self.model(x_t=Tensor(x)).tabular
        assert z_t is not None
        probs = z_t.likelihood.data
        if probs.shape[1] == 2:
            predicted = (probs[:, 1] >= self.theta).astype(np.int64)
        else:
            predicted = probs.argmax(axis=1)
        return float(np.mean(predicted == self.val_labels))
