"""Gradient saliency maps.

The vanilla map (target-logit gradient, |.|, max over channels) can stay on
the graph so a loss on it is differentiable with respect to the network
parameters.  The ReLU-rule variants, SmoothGrad and Grad-CAM are for
visualization only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import GraphError, Tensor, grad_of, record_op
from .autodiff.ops import RELU_RULES
from .nn import Conv2d, Network
from .transforms.geometry import resize

NORM_EPS = 1e-8


@dataclass
class SaliencyMap:
    values: Tensor
    normalized: bool = False
    valid_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            self.values = Tensor(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"saliency map must be 2-d, got {self.values.shape}")
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.values.shape)
        else:
            self.valid_mask = np.asarray(self.valid_mask, dtype=np.float64)
            if self.valid_mask.shape != self.values.shape:
                raise ValueError("valid_mask shape does not match the map")
            if not np.isin(self.valid_mask, (0.0, 1.0)).all():
                raise ValueError("valid_mask entries must be 0 or 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def numpy(self) -> np.ndarray:
        return self.values.data


def target_weights(labels, num_classes: int) -> np.ndarray:
    """One-hot rows for an index vector; (N, K) weight matrices pass through."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != num_classes:
            raise ValueError(f"target weights need {num_classes} columns")
        return labels.astype(np.float64)
    labels = labels.astype(int).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"target class out of range [0, {num_classes})")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def channel_reduce(grad: Tensor) -> Tensor:
    """(N, C, H, W) gradient -> (N, H, W) map: max over channels of |grad|."""
    return grad.abs().max(axis=1)


def _input_leaf(x) -> Tensor:
    if isinstance(x, Tensor):
        if not x.requires_grad:
            raise GraphError("saliency input is detached (requires_grad=False)")
        return x
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def input_gradients(
    net: Network,
    x,
    targets,
    differentiable: bool = False,
    retain_graph: bool | None = None,
    relu_rule: str = "backprop",
    logits: Tensor | None = None,
) -> Tensor:
    """d(sum_i <targets_i, logits_i>)/dx for a batch.

    With a batch-independent network one backward pass yields every
    sample's own gradient.  Pass ``logits`` (computed from the leaf ``x``)
    to reuse an existing forward pass.
    """
    x = _input_leaf(x)
    if logits is None:
        logits, _ = net.forward(x, relu_rule=relu_rule)
    weights = target_weights(targets, logits.shape[1])
    if weights.shape[0] != x.shape[0]:
        raise ValueError("one target per sample required")
    if retain_graph is None:
        retain_graph = differentiable
    if net.batch_coupled and x.shape[0] > 1:
        # per-sample passes: batch statistics couple the samples
        out = None
        for i in range(x.shape[0]):
            score = (logits[i] * Tensor(weights[i])).sum()
            g = grad_of(score, x, create_graph=differentiable, retain_graph=True)
            row = record_op("index_put", [g[i : i + 1]], index=slice(i, i + 1), shape=x.shape)
            out = row if out is None else out + row
        return out
    score = (logits * Tensor(weights)).sum()
    return grad_of(score, x, create_graph=differentiable, retain_graph=retain_graph)


def saliency_maps(net: Network, x, targets, differentiable: bool = False, **kw) -> Tensor:
    """Batched vanilla maps, shape (N, H, W), not normalized."""
    return channel_reduce(input_gradients(net, x, targets, differentiable=differentiable, **kw))


def _check_image(net: Network, x, target_class: int):
    shape = x.shape if isinstance(x, Tensor) else np.shape(x)
    if len(shape) != 3:
        raise ValueError(f"expected a single (C, H, W) image, got shape {shape}")
    if not 0 <= int(target_class) < net.num_classes:
        raise ValueError(f"target class {target_class} out of range [0, {net.num_classes})")


def _batched(x):
    if isinstance(x, Tensor):
        if not x.requires_grad:
            raise GraphError("saliency input is detached (requires_grad=False)")
        return x.reshape((1,) + x.shape)
    return Tensor(np.asarray(x, dtype=np.float64)[None], requires_grad=True)


def vanilla_saliency(net: Network, x, target_class: int, differentiable: bool = False) -> SaliencyMap:
    """Map of |d logit[target] / d pixel|, max over channels, shape (H, W)."""
    _check_image(net, x, target_class)
    xb = _batched(x)
    logits, _ = net.forward(xb)
    target = np.array([target_class])
    if xb.is_leaf:
        grad = input_gradients(net, xb, target, differentiable=differentiable, logits=logits)
    else:
        score = (logits * Tensor(target_weights(target, logits.shape[1]))).sum()
        grad = grad_of(score, x, create_graph=differentiable).reshape((1,) + x.shape)
    return SaliencyMap(channel_reduce(grad)[0])


def masked_norm(values: Tensor, mask: np.ndarray) -> Tensor:
    v = values * Tensor(mask)
    return (v * v).sum().sqrt()


def normalize_map(m: SaliencyMap, eps: float = NORM_EPS) -> SaliencyMap:
    """Scale to unit l2 norm over valid pixels.

    A map whose valid-pixel norm is at most ``eps`` counts as zero and comes
    back all zeros, which keeps normalization idempotent.
    """
    norm = masked_norm(m.values, m.valid_mask)
    values = m.values / norm if norm.data > eps else m.values * 0.0
    return replace(m, values=values, normalized=True)


def relu_rule_saliency(net: Network, x, target_class: int, rule: str = "backprop") -> SaliencyMap:
    """Vanilla-style map with the chosen ReLU backward rule (backprop, deconv, guided)."""
    if rule not in RELU_RULES:
        raise ValueError(f"unknown rule {rule!r}; expected one of {RELU_RULES}")
    _check_image(net, x, target_class)
    xb = _batched(x)
    grad = input_gradients(net, xb, np.array([target_class]), relu_rule=rule)
    return SaliencyMap(channel_reduce(grad)[0].detach())


def smoothgrad(
    net: Network,
    x,
    target_class: int,
    n: int = 25,
    sigma: float | None = None,
    seed: int = 0,
) -> SaliencyMap:
    """Mean vanilla map over ``n`` copies of ``x`` with Gaussian pixel noise.

    ``sigma`` defaults to 0.1 times the image's dynamic range.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    _check_image(net, x, target_class)
    img = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if sigma is None:
        sigma = 0.1 * float(img.max() - img.min())
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    noisy = img[None] + sigma * rng.standard_normal((n,) + img.shape)
    maps = saliency_maps(net, noisy, np.full(n, target_class))
    return SaliencyMap(Tensor(maps.data.mean(axis=0)))


def _last_conv(net: Network) -> int:
    idx = [i for i, layer in enumerate(net.layers) if isinstance(layer, Conv2d)]
    if not idx:
        raise ValueError("Grad-CAM needs at least one conv2d layer")
    return idx[-1]


def gradcam(net: Network, x, target_class: int, merge: bool = True) -> SaliencyMap:
    """Grad-CAM at the last conv layer, optionally merged with the guided map.

    Channel weights are the spatial mean of the target-logit gradient at the
    conv output; the weighted feature sum goes through ReLU and a bilinear
    resize to the input size.  With ``merge`` the result is multiplied by the
    guided-backprop map.
    """
    _check_image(net, x, target_class)
    layer = _last_conv(net)
    xb = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)[None], requires_grad=True)
    logits, captured = net.forward(xb, capture=[layer])
    feat = captured[layer]
    score = (logits * Tensor(target_weights(np.array([target_class]), logits.shape[1]))).sum()
    g = grad_of(score, feat).data[0]
    weights = g.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, feat.data[0], axes=1), 0.0)
    cam = resize(cam, xb.shape[2:]).data
    if merge:
        cam = cam * relu_rule_saliency(net, xb.data[0], target_class, rule="guided").numpy()
    return SaliencyMap(Tensor(cam))
