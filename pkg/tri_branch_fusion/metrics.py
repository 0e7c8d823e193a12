"""Classification metrics, ROC and precision-recall curves."""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata
from sklearn import metrics as skm

from .errors import ValidationError
from .models import MetricsReport, PredictionSet

logger = logging.getLogger(__name__)

Points = List[Tuple[float, float]]


def _binary_inputs(
    scores: Sequence[float], labels: Sequence[int]
) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError(
            f"scores {s.shape} and labels {y.shape} must be equal-length "
            f"vectors"
        )
    if y.all() or not y.any():
        raise ValidationError(
            "Ranking metrics need both positive and negative samples"
        )
    return s, y


def auroc_rank(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve as the Mann-Whitney rank statistic.

    Tied scores share their mid-rank, so each tied pair counts one half.
    """
    s, y = _binary_inputs(scores, labels)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> Points:
    """(FPR, TPR) pairs, one per distinct threshold, from (0,0) to (1,1)."""
    s, y = _binary_inputs(scores, labels)
    fpr, tpr, _ = skm.roc_curve(y, s, drop_intermediate=False)
    return [(float(a), float(b)) for a, b in zip(fpr, tpr)]


def pr_curve(scores: Sequence[float], labels: Sequence[int]) -> Points:
    """(recall, precision) pairs ordered by increasing recall."""
    s, y = _binary_inputs(scores, labels)
    precision, recall, _ = skm.precision_recall_curve(y, s)
    return [
        (float(r), float(p)) for r, p in zip(recall[::-1], precision[::-1])
    ]


def curve_area(points: Points) -> float:
    """Trapezoidal area under an ordered point list."""
    x, y = zip(*points)
    return float(skm.auc(np.asarray(x), np.asarray(y)))


def _positive_scores(predictions: PredictionSet) -> np.ndarray:
    if predictions.num_classes == 2:
        return predictions.scores[:, 1]
    return 1.0 - predictions.scores[:, 0]


def compute_metrics(predictions: PredictionSet) -> MetricsReport:
    """Compute all metrics for one split.

    Binary tasks use class 1 as the positive class for AUROC, AUPRC,
    recall and Jaccard. Multi-class tasks macro-average them one-vs-rest;
    curve points then rank any non-zero class against class 0. AUROC and
    AUPRC are ``None`` when a class is missing from the ground truth.
    """
    y = np.asarray(predictions.labels, dtype=np.int64)
    pred = np.asarray(predictions.predicted, dtype=np.int64)
    classes = predictions.num_classes
    if len(y) == 0:
        raise ValidationError("Cannot compute metrics on an empty split")
    class_ids = list(range(classes))

    acc = float(skm.accuracy_score(y, pred))
    mcc = float(skm.matthews_corrcoef(y, pred))
    macro_f1 = float(
        skm.f1_score(
            y, pred, labels=class_ids, average="macro", zero_division=0
        )
    )
    if classes == 2:
        recall = float(skm.recall_score(y, pred, pos_label=1, zero_division=0))
        jaccard = float(
            skm.jaccard_score(y, pred, pos_label=1, zero_division=0)
        )
    else:
        recall = float(
            skm.recall_score(
                y, pred, labels=class_ids, average="macro", zero_division=0
            )
        )
        jaccard = float(
            skm.jaccard_score(
                y, pred, labels=class_ids, average="macro", zero_division=0
            )
        )

    auroc: Optional[float] = None
    auprc: Optional[float] = None
    roc_points: Points = []
    pr_points: Points = []
    present = set(np.unique(y).tolist())
    if present == set(class_ids):
        if classes == 2:
            positive = predictions.scores[:, 1]
            auroc = auroc_rank(positive, y == 1)
            auprc = float(skm.average_precision_score(y == 1, positive))
        else:
            auroc = float(
                np.mean(
                    [
                        auroc_rank(predictions.scores[:, c], y == c)
                        for c in class_ids
                    ]
                )
            )
            auprc = float(
                np.mean(
                    [
                        skm.average_precision_score(
                            y == c, predictions.scores[:, c]
                        )
                        for c in class_ids
                    ]
                )
            )
        ranked = _positive_scores(predictions)
        roc_points = roc_curve(ranked, y > 0)
        pr_points = pr_curve(ranked, y > 0)
    else:
        logger.warning(
            f"Ground truth holds classes {sorted(present)} of {classes}; "
            f"AUROC and AUPRC are undefined"
        )

    return MetricsReport(
        acc=acc,
        mcc=mcc,
        auroc=auroc,
        auprc=auprc,
        recall=recall,
        jaccard=jaccard,
        macro_f1=macro_f1,
        roc_points=roc_points,
        pr_points=pr_points,
    )
