"""Composite differentiable functions built from the primitive ops."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, record_op, shape_error


def relu(x: Tensor, rule: str = "backprop") -> Tensor:
    return record_op("relu", [x], rule=rule)


def maxpool2x2(x: Tensor) -> Tensor:
    return record_op("maxpool2x2", [x])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of (N, C, H, W) input with (O, C, kh, kw) weights."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise shape_error("conv2d", x.shape, weight.shape)
    n, _, h, w = x.shape
    o, c, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    rows = record_op("unfold", [x], kernel=(kh, kw), stride=stride, padding=padding)
    out = rows @ weight.reshape(o, c * kh * kw).T
    if bias is not None:
        out = out + bias
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise shape_error("dense", x.shape, weight.shape)
    out = x @ weight.T
    return out + bias if bias is not None else out


def log_softmax(logits: Tensor) -> Tensor:
    # the shift is a constant; the expression is exact for any shift
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    return z - z.exp().sum(axis=1, keepdims=True).log()


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label].

    ``labels`` is either an index vector or a (batch, classes) matrix of
    target weights whose rows sum to one (blended labels).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise shape_error("softmax_cross_entropy", logits.shape)
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if labels.shape[0] != n:
            raise shape_error("softmax_cross_entropy", logits.shape, labels.shape)
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"label out of range [0, {k})")
        target = np.zeros((n, k))
        target[np.arange(n), labels.astype(int)] = 1.0
    else:
        if labels.shape != (n, k):
            raise shape_error("softmax_cross_entropy", logits.shape, labels.shape)
        target = labels.astype(float)
    return -(log_softmax(logits) * Tensor(target)).sum() * (1.0 / n)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    return x / ((x * x).sum().sqrt() + eps)
