"""Tri-branch, label-masked and contrastive training objectives.

All branch terms take logits; the cross-entropy applies the softmax that
turns them into the branch likelihoods z_i, z_t and z_f.
"""

import logging
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError
from .functional import (
    LabelArray,
    l2_normalize,
    masked_logsumexp,
    softmax_cross_entropy,
    validate_labels,
)
from .models import LossWeights
from .tensor import Tensor, matmul

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.9995


def tnf_loss(
    logits_i: Tensor,
    logits_t: Tensor,
    logits_f: Optional[Tensor],
    y_i: LabelArray,
    y_t: LabelArray,
    y_f: Optional[LabelArray],
    w: LossWeights,
) -> Tensor:
    """lambda1 CE(z_i, y_i) + lambda2 CE(z_t, y_t) + lambda3 CE(z_f, y_f).

    A fusion-less model passes ``logits_f=None`` and the third term is
    dropped.
    """
    total = w.lambda1 * softmax_cross_entropy(logits_i, y_i)
    total = total + w.lambda2 * softmax_cross_entropy(logits_t, y_t)
    if logits_f is not None:
        if y_f is None:
            raise ContractError("Fusion logits given without fusion labels")
        total = total + w.lambda3 * softmax_cross_entropy(logits_f, y_f)
    return total


def label_masked_loss(
    logits_i: Tensor,
    logits_t: Tensor,
    logits_f: Optional[Tensor],
    y_i: LabelArray,
    y_t: LabelArray,
    w: LossWeights,
) -> Tensor:
    """Tri-branch loss whose fusion term only covers samples with y_i == y_t.

    The fusion term of a consistent sample uses y_i as its label. Every term
    is divided by the full batch size N. When no sample is consistent the
    fusion term is left out of the graph altogether.
    """
    batch, classes = logits_i.shape
    y_i = validate_labels(y_i, batch, classes)
    y_t = validate_labels(y_t, batch, classes)
    total = w.lambda1 * softmax_cross_entropy(logits_i, y_i)
    total = total + w.lambda2 * softmax_cross_entropy(logits_t, y_t)
    if logits_f is None:
        return total

    consistent = np.flatnonzero(y_i == y_t)
    if consistent.size == 0:
        logger.debug(f"Fusion term masked for all {batch} samples")
        return total
    fused = softmax_cross_entropy(
        logits_f[consistent], y_i[consistent], reduction="sum"
    )
    return total + fused * (w.lambda3 / batch)


def clip_contrastive(
    f_i: Tensor, f_t: Tensor, tau: float = DEFAULT_TAU
) -> Tensor:
    """Sum over j of -log(exp(s_jj) / sum_{k != j} exp(s_jk)).

    s_jk = cos(f_i[j], f_t[k]) / tau. The positive pair is left out of the
    denominator.
    """
    if f_i.ndim != 2 or f_i.shape != f_t.shape:
        raise DimensionError(
            f"Contrastive features must both be [N, e]: {f_i.shape}, "
            f"{f_t.shape}"
        )
    n = f_i.shape[0]
    if n < 2:
        raise ContractError(
            f"Contrastive loss needs a batch of at least 2, got {n}"
        )
    if tau <= 0:
        raise ContractError(f"Temperature must be positive, got {tau}")
    sims = matmul(l2_normalize(f_i), l2_normalize(f_t).swap_last()) / tau
    rows = np.arange(n)
    positives = sims[rows, rows]
    others = masked_logsumexp(sims, ~np.eye(n, dtype=bool), axis=1)
    return (others - positives).sum()


def clip_finetune_loss(
    logits_i: Tensor,
    logits_t: Tensor,
    f_i: Tensor,
    f_t: Tensor,
    y: LabelArray,
    w: LossWeights,
    tau: float = DEFAULT_TAU,
    y_t: Optional[LabelArray] = None,
) -> Tensor:
    """Cross-entropy on both branches plus the symmetric contrastive loss.

    ``y_t`` defaults to ``y``. A zero ``lambda3`` leaves the contrastive
    term out.
    """
    total = w.lambda1 * softmax_cross_entropy(logits_i, y)
    total = total + w.lambda2 * softmax_cross_entropy(
        logits_t, y if y_t is None else y_t
    )
    if w.lambda3 == 0:
        return total
    symmetric = 0.5 * clip_contrastive(f_i, f_t, tau) + 0.5 * clip_contrastive(
        f_t, f_i, tau
    )
    return total + w.lambda3 * symmetric
