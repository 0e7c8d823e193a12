"""Differentiable kernels built on :mod:`tri_branch_fusion.tensor`."""

from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NormalizationError, ValidationError
from .tensor import Tensor, matmul

LabelArray = Union[np.ndarray, Sequence[int]]


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """3D cross-correlation of ``x`` [b,c,h,w,d] with ``weight``.

    ``weight`` is [c_out, c, kh, kw, kd]; each output extent is
    floor((in + 2*padding - k) / stride) + 1.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise DimensionError(
            f"conv3d expects 5D input and kernel, got {x.shape} "
            f"and {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv3d channel mismatch: input {x.shape}, "
            f"kernel {weight.shape}"
        )
    if stride < 1 or padding < 0:
        raise DimensionError(
            f"conv3d needs stride >= 1 and padding >= 0, "
            f"got {stride}, {padding}"
        )
    kernel = weight.shape[2:]
    padded = tuple(s + 2 * padding for s in x.shape[2:])
    if any(k > p for k, p in zip(kernel, padded)):
        raise DimensionError(
            f"conv3d kernel {kernel} larger than padded input {padded}"
        )

    pad = ((0, 0), (0, 0)) + ((padding, padding),) * 3
    x_padded = np.pad(x.data, pad)
    windows = sliding_window_view(x_padded, kernel, axis=(2, 3, 4))
    windows = windows[:, :, ::stride, ::stride, ::stride]
    # windows: (b, c, oh, ow, od, kh, kw, kd)
    w_data = weight.data
    out = np.tensordot(windows, w_data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = out.transpose(0, 4, 1, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    out_spatial = out.shape[2:]

    def grad_fn(g: np.ndarray) -> tuple:
        grad_x = grad_w = grad_b = None
        if weight.requires_grad:
            axes = ([0, 2, 3, 4], [0, 2, 3, 4])
            grad_w = np.tensordot(g, windows, axes=axes)
        if bias is not None and bias.requires_grad:
            grad_b = g.sum(axis=(0, 2, 3, 4))
        if x.requires_grad:
            grad_padded = np.zeros_like(x_padded)
            oh, ow, od = out_spatial
            for i in range(kernel[0]):
                for j in range(kernel[1]):
                    for k in range(kernel[2]):
                        contrib = np.tensordot(
                            g, w_data[:, :, i, j, k], axes=([1], [0])
                        ).transpose(0, 4, 1, 2, 3)
                        grad_padded[
                            :,
                            :,
                            i : i + stride * oh : stride,
                            j : j + stride * ow : stride,
                            k : k + stride * od : stride,
                        ] += contrib
            h, w, d = x.shape[2:]
            grad_x = grad_padded[
                :,
                :,
                padding : padding + h,
                padding : padding + w,
                padding : padding + d,
            ]
        return grad_x, grad_w, grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, grad_fn, "conv3d")


def avg_pool3d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping windowed average pooling over the 3 spatial axes."""
    if x.ndim != 5:
        raise DimensionError(f"avg_pool3d expects 5D input, got {x.shape}")
    b, c, h, w, d = x.shape
    if h % kernel or w % kernel or d % kernel:
        raise DimensionError(
            f"avg_pool3d window {kernel} does not tile {x.shape[2:]}"
        )
    blocks = x.reshape(
        b, c, h // kernel, kernel, w // kernel, kernel, d // kernel, kernel
    )
    return blocks.mean(axis=(3, 5, 7))


def global_avg_pool3d(x: Tensor) -> Tensor:
    """f_avg: average over all spatial positions, [b,c,h,w,d] -> [b,c]."""
    if x.ndim != 5:
        raise DimensionError(
            f"global_avg_pool3d expects 5D input, got {x.shape}"
        )
    return x.mean(axis=(2, 3, 4))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-max stabilized softmax."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g: np.ndarray) -> tuple:
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor._from_op(out, (x,), grad_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g: np.ndarray) -> tuple:
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), grad_fn, "log_softmax")


def validate_labels(
    labels: LabelArray, batch: int, classes: int
) -> np.ndarray:
    """Return labels as an int array, checking count and range."""
    array = np.asarray(labels)
    if array.ndim != 1 or array.shape[0] != batch:
        raise ValidationError(
            f"Expected {batch} labels, got shape {array.shape}"
        )
    if array.size and not np.issubdtype(array.dtype, np.integer):
        if not np.all(np.equal(np.mod(array, 1), 0)):
            raise ValidationError("Labels must be integer class ids")
    array = array.astype(np.int64)
    if array.size and (array.min() < 0 or array.max() >= classes):
        raise ValidationError(
            f"Label out of range [0, {classes}): "
            f"min {array.min()}, max {array.max()}"
        )
    return array


def softmax_cross_entropy(
    logits: Tensor, labels: LabelArray, reduction: str = "mean"
) -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels.

    ``reduction`` is ``"mean"`` (scalar), ``"sum"`` (scalar) or ``"none"``
    (one loss per row).
    """
    if logits.ndim != 2:
        raise DimensionError(
            f"softmax_cross_entropy expects [b, C] logits, got {logits.shape}"
        )
    batch, classes = logits.shape
    y = validate_labels(labels, batch, classes)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    per_sample = -log_probs[rows, y]
    probs = np.exp(log_probs)

    if reduction == "none":
        out = per_sample
    elif reduction == "sum":
        out = np.asarray(per_sample.sum())
    elif reduction == "mean":
        out = np.asarray(per_sample.mean())
    else:
        raise ValueError(f"Unknown reduction: {reduction}")

    def grad_fn(g: np.ndarray) -> tuple:
        delta = probs.copy()
        delta[rows, y] -= 1.0
        if reduction == "none":
            return (delta * g[:, None],)
        scale = g / batch if reduction == "mean" else g
        return (delta * scale,)

    return Tensor._from_op(out, (logits,), grad_fn, "cross_entropy")


def masked_logsumexp(x: Tensor, keep: np.ndarray, axis: int = -1) -> Tensor:
    """log of the sum of exp(x) over entries where ``keep`` is True."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    if not keep.any(axis=axis).all():
        raise ValidationError("masked_logsumexp: a row keeps no entries")
    masked = np.where(keep, x.data, -np.inf)
    peak = masked.max(axis=axis, keepdims=True)
    total = np.exp(masked - peak).sum(axis=axis, keepdims=True)
    out_keep = peak + np.log(total)
    weights = np.exp(masked - out_keep)

    def grad_fn(g: np.ndarray) -> tuple:
        return (weights * np.expand_dims(g, axis),)

    return Tensor._from_op(
        np.squeeze(out_keep, axis=axis), (x,), grad_fn, "masked_logsumexp"
    )


def layer_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise DimensionError(
            f"layer_norm width mismatch: input {x.shape}, "
            f"gamma {gamma.shape}, beta {beta.shape}"
        )
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (variance + eps).sqrt() * gamma + beta


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale every row to unit Euclidean norm."""
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis))
    if np.any(norms == 0.0):
        rows = np.flatnonzero(norms == 0.0).tolist()
        raise NormalizationError(f"Zero-norm feature rows: {rows}")
    return x / (x * x).sum(axis=axis, keepdims=True).sqrt()


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"attention shape mismatch: q {q.shape}, k {k.shape}, "
            f"v {v.shape}"
        )
    scores = matmul(q, k.swap_last()) / math.sqrt(q.shape[-1])
    return matmul(softmax(scores, axis=-1), v)
