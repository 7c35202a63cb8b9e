"""Class, invariance and saliency losses and their weighted sum."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, softmax_cross_entropy
from .saliency import NORM_EPS, SaliencyMap

ALL_INVALID = "saliency mask has no valid pixels"


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if any(not np.isfinite(v) or v < 0 for v in w):
            raise ValueError(f"loss weights must be finite and >= 0, got {w}")
        if not any(v > 0 for v in w):
            raise ValueError("at least one loss weight must be positive")

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        """``"a,b,g"`` -> LossWeights."""
        parts = [p for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected three comma-separated weights, got {text!r}")
        return cls(*(float(p) for p in parts))


@dataclass
class LossReport:
    l_class: float
    l_sal: float
    l_inv: float
    l_total: float
    sal_distances: np.ndarray = field(default_factory=lambda: np.zeros(0))
    warning: str | None = None
    total: Tensor | None = field(default=None, repr=False)

    @property
    def sal_distance(self) -> float:
        return float(np.mean(self.sal_distances)) if len(self.sal_distances) else 0.0

    def to_json(self, iteration: int, ms: float, **extra) -> str:
        row = {
            "iteration": iteration,
            "l_class": self.l_class,
            "l_sal": self.l_sal,
            "l_inv": self.l_inv,
            "l_total": self.l_total,
            "sal_distance": self.sal_distance,
            "ms": ms,
            "warning": self.warning,
        }
        row.update(extra)
        return json.dumps(row)


def class_loss(logits_orig: Tensor, logits_aug: Tensor, labels, labels_aug=None) -> Tensor:
    """Cross-entropy on both blocks, each batch-averaged, summed.

    ``labels_aug`` (an (N, K) weight matrix) overrides the target of the
    augmented block for mixed-label samples.
    """
    target_aug = labels if labels_aug is None else labels_aug
    return softmax_cross_entropy(logits_orig, labels) + softmax_cross_entropy(logits_aug, target_aug)


def _distance(a: Tensor, b: Tensor, metric: str) -> Tensor:
    d = a - b
    if metric == "l2":
        return (d * d).mean()
    if metric == "l1":
        return d.abs().mean()
    raise ValueError(f"unknown distance {metric!r}")


def invariance_loss(captured_orig: dict, captured_aug: dict, layers, metric: str = "l2") -> Tensor:
    """Sum over ``layers`` of the mean (squared) distance between activations."""
    total = Tensor(0.0)
    for layer in layers:
        if layer not in captured_orig or layer not in captured_aug:
            raise KeyError(f"activation of layer {layer} was not captured")
        a, b = captured_orig[layer], captured_aug[layer]
        if a.shape != b.shape:
            raise ValueError(f"layer {layer}: activation shapes {a.shape} and {b.shape} differ")
        total = total + _distance(a, b, metric)
    return total


def _normalized(values: Tensor, mask: Tensor, eps: float) -> Tensor:
    v = values * mask
    norm = (v * v).sum().sqrt()
    return v / norm if norm.data > eps else v * 0.0


def saliency_distance(a: Tensor, b: Tensor, mask: np.ndarray, eps: float = NORM_EPS) -> Tensor | None:
    """MSE over valid pixels between the masked, unit-normalized maps.

    Returns ``None`` when no pixel is valid.  Invalid pixels are multiplied by
    an exact zero before anything else, so they cannot influence the value.
    """
    mask = np.asarray(mask, dtype=np.float64)
    n = mask.sum()
    if n == 0:
        return None
    m = Tensor(mask)
    d = _normalized(a, m, eps) - _normalized(b, m, eps)
    return (d * d).sum() / n


def saliency_loss(map_orig: SaliencyMap, map_aug_inverted: SaliencyMap, mask=None, eps: float = NORM_EPS):
    """Scale-invariant map distance; returns ``(loss, warning)``.

    ``mask`` defaults to the AND of the two maps' validity masks.  An
    all-invalid mask gives a zero loss and the warning string.
    """
    if map_orig.shape != map_aug_inverted.shape:
        raise ValueError(f"map shapes differ: {map_orig.shape} vs {map_aug_inverted.shape}")
    if mask is None:
        mask = map_orig.valid_mask * map_aug_inverted.valid_mask
    d = saliency_distance(map_orig.values, map_aug_inverted.values, mask, eps)
    if d is None:
        return Tensor(0.0), ALL_INVALID
    return d, None


def combined_loss(l_class: Tensor | None, l_sal: Tensor | None, l_inv: Tensor | None, w: LossWeights) -> Tensor:
    """alpha*L_class + beta*L_sal + gamma*L_inv; zero-weight terms stay off the graph."""
    total = None
    for weight, term in ((w.alpha, l_class), (w.beta, l_sal), (w.gamma, l_inv)):
        if weight == 0 or term is None:
            continue
        part = term if weight == 1 else term * weight
        total = part if total is None else total + part
    return total if total is not None else Tensor(0.0)
