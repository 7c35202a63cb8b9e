"""Layers, the reference classifiers and SGD."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, conv2d, linear, maxpool2x2, relu, softmax_cross_entropy

__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "Dense",
    "Flatten",
    "GlobalAvgPool",
    "MaxPool2x2",
    "Network",
    "ReLU",
    "SGD",
    "init_params",
    "small_cnn",
    "softmax_cross_entropy",
    "tiny_cnn",
]


class Layer:
    kind = "?"
    params: tuple[str, ...] = ()

    def parameters(self) -> list[Tensor]:
        return [getattr(self, p) for p in self.params]

    def attrs(self) -> dict:
        return {}

    def out_shape(self, shape: tuple) -> tuple:
        return shape

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.attrs().items())
        return f"{type(self).__name__}({args})"


class Conv2d(Layer):
    kind = "conv2d"
    params = ("weight", "bias")

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1, padding: int = 0):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(np.zeros((out_channels, in_channels, kernel_size, kernel_size)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def attrs(self):
        return dict(
            in_channels=self.in_channels,
            out_channels=self.out_channels,
            kernel_size=self.kernel_size,
            stride=self.stride,
            padding=self.padding,
        )

    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size**2

    def out_shape(self, shape):
        n, c, h, w = shape
        k, s, p = self.kernel_size, self.stride, self.padding
        return (n, self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def __call__(self, x, **_):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Dense(Layer):
    kind = "dense"
    params = ("weight", "bias")

    def __init__(self, in_features: int, out_features: int):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(np.zeros((out_features, in_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def attrs(self):
        return dict(in_features=self.in_features, out_features=self.out_features)

    def fan_in(self) -> int:
        return self.in_features

    def out_shape(self, shape):
        return (shape[0], self.out_features)

    def __call__(self, x, **_):
        return linear(x, self.weight, self.bias)


class ReLU(Layer):
    kind = "relu"

    def __call__(self, x, relu_rule: str = "backprop", **_):
        return relu(x, rule=relu_rule)


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def out_shape(self, shape):
        n, c, h, w = shape
        return (n, c, h // 2, w // 2)

    def __call__(self, x, **_):
        return maxpool2x2(x)


class GlobalAvgPool(Layer):
    kind = "avgpool-global"

    def out_shape(self, shape):
        return shape[:2]

    def __call__(self, x, **_):
        if x.ndim != 4:
            raise ShapeError(f"avgpool-global: expected 4-d input, got {x.shape}")
        return x.mean(axis=(2, 3))


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))

    def __call__(self, x, **_):
        return x.reshape(x.shape[0], -1)


class BatchNorm2d(Layer):
    """Batch normalization over (N, H, W) per channel.

    Running statistics are plain arrays updated outside the graph.
    """

    kind = "batchnorm2d"
    params = ("gamma", "beta")

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.training = True

    def attrs(self):
        return dict(num_features=self.num_features, momentum=self.momentum, eps=self.eps)

    def __call__(self, x, **_):
        if x.ndim != 4 or x.shape[1] != self.num_features:
            raise ShapeError(f"batchnorm2d: expected (N, {self.num_features}, H, W), got {x.shape}")
        shape = (1, self.num_features, 1, 1)
        if self.training:
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1)
            xhat = centered / (var + self.eps).sqrt()
        else:
            mean = Tensor(self.running_mean.reshape(shape))
            std = Tensor(np.sqrt(self.running_var.reshape(shape) + self.eps))
            xhat = (x - mean) / std
        return xhat * self.gamma.reshape(shape) + self.beta.reshape(shape)


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, Dense, ReLU, MaxPool2x2, GlobalAvgPool, Flatten, BatchNorm2d)}


class Network:
    """Ordered layer stack ending in a (batch, num_classes) logit layer."""

    def __init__(self, layers: Sequence[Layer], name: str = "custom"):
        self.layers = list(layers)
        self.name = name

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{i}.{p}", getattr(layer, p)) for i, layer in enumerate(self.layers) for p in layer.params]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        """Non-differentiable state (batchnorm running statistics)."""
        return [
            (f"{i}.{attr}", getattr(layer, attr))
            for i, layer in enumerate(self.layers)
            if isinstance(layer, BatchNorm2d)
            for attr in ("running_mean", "running_var")
        ]

    @property
    def num_classes(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, Dense):
                return layer.out_features
        raise ValueError("network has no dense output layer")

    @property
    def batch_coupled(self) -> bool:
        """True when one sample's output depends on other samples in the batch."""
        return any(isinstance(l, BatchNorm2d) and l.training for l in self.layers)

    def train(self, mode: bool = True) -> Network:
        for layer in self.layers:
            if isinstance(layer, BatchNorm2d):
                layer.training = mode
        return self

    def eval(self) -> Network:
        return self.train(False)

    def shapes(self, input_shape: tuple) -> list[tuple]:
        """Output shape after every layer for the given input shape."""
        out, shape = [], tuple(input_shape)
        for layer in self.layers:
            shape = layer.out_shape(shape)
            out.append(shape)
        return out

    def forward(self, x, capture: Iterable[int] = (), relu_rule: str = "backprop"):
        """Run the stack; returns ``(logits, {layer index: activation})``."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        capture = set(capture)
        missing = [i for i in capture if not 0 <= i < len(self.layers)]
        if missing:
            raise IndexError(f"capture indices out of range: {missing}")
        captured = {}
        for i, layer in enumerate(self.layers):
            try:
                x = layer(x, relu_rule=relu_rule)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            if i in capture:
                captured[i] = x
        if x.ndim != 2:
            raise ShapeError(f"network output must be (batch, classes), got {x.shape}")
        return x, captured

    def __call__(self, x) -> Tensor:
        return self.forward(x)[0]

    def describe(self) -> dict:
        return {
            "name": self.name,
            "layers": [{"kind": l.kind, "attrs": l.attrs()} for l in self.layers],
            "parameters": [{"name": n, "shape": list(p.shape)} for n, p in self.named_parameters()],
        }

    @classmethod
    def from_description(cls, desc: dict) -> Network:
        layers = []
        for entry in desc["layers"]:
            try:
                layer_cls = LAYER_KINDS[entry["kind"]]
            except KeyError:
                raise ValueError(f"unknown layer kind {entry['kind']!r}") from None
            layers.append(layer_cls(**entry.get("attrs", {})))
        return cls(layers, name=desc.get("name", "custom"))


def small_cnn(num_classes: int = 10, in_channels: int = 3, input_size: int = 32, batchnorm: bool = False) -> Network:
    """SmallCNN-10: three conv(3x3, pad 1)-relu-maxpool blocks (16, 32, 64 channels), flatten, dense."""
    if input_size % 8:
        raise ValueError("input_size must be a multiple of 8")
    layers: list[Layer] = []
    c = in_channels
    for width in (16, 32, 64):
        layers.append(Conv2d(c, width, 3, padding=1))
        if batchnorm:
            layers.append(BatchNorm2d(width))
        layers += [ReLU(), MaxPool2x2()]
        c = width
    side = input_size // 8
    layers += [Flatten(), Dense(64 * side * side, num_classes)]
    return Network(layers, name="small_cnn")


def tiny_cnn(num_classes: int = 10, in_channels: int = 3, input_size: int = 8, width: int = 4) -> Network:
    """Two conv blocks; sized for finite-difference checks."""
    side = input_size // 4
    layers = [
        Conv2d(in_channels, width, 3, padding=1),
        ReLU(),
        MaxPool2x2(),
        Conv2d(width, width, 3, padding=1),
        ReLU(),
        MaxPool2x2(),
        Flatten(),
        Dense(width * side * side, num_classes),
    ]
    return Network(layers, name="tiny_cnn")


def last_conv_block_output(net: Network) -> int:
    """Index of the last layer belonging to the final conv block."""
    last_conv = max(i for i, l in enumerate(net.layers) if isinstance(l, Conv2d))
    idx = last_conv
    for i in range(last_conv + 1, len(net.layers)):
        if isinstance(net.layers[i], (ReLU, MaxPool2x2, BatchNorm2d)):
            idx = i
        else:
            break
    return idx


def init_params(net: Network, seed: int) -> None:
    """He-normal weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if isinstance(layer, (Conv2d, Dense)):
            std = np.sqrt(2.0 / layer.fan_in())
            layer.weight.data = rng.normal(0.0, std, size=layer.weight.shape)
            layer.bias.data = np.zeros(layer.bias.shape)
        elif isinstance(layer, BatchNorm2d):
            layer.gamma.data = np.ones(layer.num_features)
            layer.beta.data = np.zeros(layer.num_features)
            layer.running_mean = np.zeros(layer.num_features)
            layer.running_var = np.ones(layer.num_features)


class SGD:
    """v <- momentum * v + g;  p <- p - lr * v, in parameter order."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: Sequence) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ShapeError(f"sgd: gradient {g.shape} does not match parameter {p.shape}")
            self.velocity[i] = self.momentum * self.velocity[i] + g
            # fresh array: graphs built before the step keep the old values
            p.data = p.data - self.lr * self.velocity[i]

    def state_dict(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum, "velocity": [v.copy() for v in self.velocity]}


def sgd_step(net: Network, grads: Sequence, lr: float, momentum: float, state: SGD | None = None) -> SGD:
    """Functional wrapper: apply one step, creating optimizer state on first use."""
    if state is None:
        state = SGD(net.parameters(), lr=lr, momentum=momentum)
    state.lr, state.momentum = lr, momentum
    state.step(grads)
    return state
