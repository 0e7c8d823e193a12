"""Ensemble decisions, missing-modality inference and split evaluation."""

import logging
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, ContractError
from .metrics import compute_metrics
from .models import BranchLikelihoods, CaseArrays, MetricsReport, PredictionSet
from .network import TnfModel
from .selection import AIR_VALUE, ImageBranchScorer, select_groups
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


class Modality(str, Enum):
    IMAGE = "image"
    TABULAR = "tabular"


def ensemble_predict(
    likelihoods: BranchLikelihoods, theta: float = 0.5
) -> Tuple[np.ndarray, np.ndarray]:
    """Average the present branches and decide.

    Works on one sample ([C] vectors) or a batch ([n, C]). Binary decisions
    are 1 iff the averaged positive-class probability is >= ``theta``;
    multi-class decisions take the argmax.

    Returns:
        (averaged scores, predicted labels)
    """
    present = likelihoods.present()
    if not present:
        raise ContractError("No branch likelihood available")
    scores = np.mean(np.stack([np.asarray(z, np.float64) for z in present]), 0)
    if scores.shape[-1] == 2:
        if not 0.0 < theta < 1.0:
            raise ConfigurationError(f"theta must be in (0, 1), got {theta}")
        predicted = (scores[..., 1] >= theta).astype(np.int64)
    else:
        predicted = np.argmax(scores, axis=-1).astype(np.int64)
    return scores, predicted


class Predictor:
    """Runs a trained model over volume-level cases.

    Every volume is grouped and the model's own image branch picks the most
    positive group, which is then paired with the case's tabular record.
    """

    VIEWS = ("image", "tabular", "fusion", "ensemble")

    def __init__(
        self,
        model: TnfModel,
        theta: float = 0.5,
        group_size: int = 8,
        pad_value: float = AIR_VALUE,
        batch_size: int = 64,
    ) -> None:
        self.model = model
        self.theta = theta
        self.group_size = group_size
        self.pad_value = pad_value
        self.batch_size = batch_size
        self.logger = logging.getLogger(__name__)

    def branch_likelihoods(
        self,
        cases: CaseArrays,
        drop_modality: Optional[Modality] = None,
    ) -> BranchLikelihoods:
        """Return [n, C] likelihoods of every branch that can run.

        Dropping either modality also disables the fusion branch.
        """
        drop = None if drop_modality is None else Modality(drop_modality)
        slabs = None
        if drop is not Modality.IMAGE:
            _, slabs = select_groups(
                cases,
                ImageBranchScorer(self.model, self.batch_size),
                self.group_size,
                self.pad_value,
            )
        tabular = None if drop is Modality.TABULAR else cases.tabular

        collected: Dict[str, List[np.ndarray]] = {
            "z_i": [],
            "z_t": [],
            "z_f": [],
        }
        with no_grad():
            for start in range(0, len(cases), self.batch_size):
                stop = start + self.batch_size
                out = self.model(
                    None if slabs is None else Tensor(slabs[start:stop]),
                    None if tabular is None else Tensor(tabular[start:stop]),
                )
                batch = out.likelihoods()
                for name in collected:
                    value = getattr(batch, name)
                    if value is not None:
                        collected[name].append(value.astype(np.float64))
        stacked = {
            name: np.concatenate(parts) if parts else None
            for name, parts in collected.items()
        }
        return BranchLikelihoods(**stacked)

    def predict(
        self,
        cases: CaseArrays,
        drop_modality: Optional[Modality] = None,
    ) -> Dict[str, PredictionSet]:
        """Return one PredictionSet per available view.

        Views are the single branches that ran plus their ensemble.
        """
        likelihoods = self.branch_likelihoods(cases, drop_modality)
        labels = np.asarray(cases.volume_labels, dtype=np.int64)
        views: Dict[str, BranchLikelihoods] = {}
        for view, name in zip(self.VIEWS, ("z_i", "z_t", "z_f")):
            z = getattr(likelihoods, name)
            if z is not None:
                views[view] = BranchLikelihoods(**{name: z})
        views["ensemble"] = likelihoods

        results = {}
        for view, branches in views.items():
            scores, predicted = ensemble_predict(branches, self.theta)
            results[view] = PredictionSet(
                scores=scores,
                predicted=predicted,
                labels=labels,
                theta=self.theta,
                case_ids=cases.case_ids,
            )
        return results

    def evaluate(
        self,
        cases: CaseArrays,
        drop_modality: Optional[Modality] = None,
    ) -> Dict[str, MetricsReport]:
        reports = {
            view: compute_metrics(predictions)
            for view, predictions in self.predict(cases, drop_modality).items()
        }
        summary = ", ".join(f"{v}={r.acc:.3f}" for v, r in reports.items())
        self.logger.info(f"Accuracy by view: {summary}")
        return reports


def evaluate_split(
    model: TnfModel,
    cases: CaseArrays,
    theta: float = 0.5,
    group_size: int = 8,
    pad_value: float = AIR_VALUE,
    drop_modality: Optional[Modality] = None,
) -> Dict[str, MetricsReport]:
    """Shorthand for ``Predictor(...).evaluate(cases, drop_modality)``."""
    predictor = Predictor(model, theta, group_size, pad_value)
    return predictor.evaluate(cases, drop_modality)
