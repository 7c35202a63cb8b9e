"""Primitive operations.

Each op evaluates eagerly on numpy arrays in ``forward`` and expresses its
vector-Jacobian product in ``backward`` with recorded tensor operations.
Masks derived from forward values (ReLU, max, abs) enter the backward pass
as constants, which makes their second derivative zero.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, record_op, register, shape_error


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise shape_error(kind, a, b) from None


def _sum_to(g: Tensor, shape) -> Tensor:
    return g if g.shape == tuple(shape) else record_op("sum_to", [g], shape=tuple(shape))


class Op:
    kind = "?"

    def __init__(self, **attrs):
        for k, v in attrs.items():
            setattr(self, k, v)


class _Binary(Op):
    def check(self, a, b):
        _broadcast_shape(self.kind, a, b)


@register("add")
class Add(_Binary):
    def forward(self, a, b):
        return a + b

    def backward(self, g, inputs, needs):
        a, b = inputs
        return (_sum_to(g, a.shape) if needs[0] else None, _sum_to(g, b.shape) if needs[1] else None)


@register("sub")
class Sub(_Binary):
    def forward(self, a, b):
        return a - b

    def backward(self, g, inputs, needs):
        a, b = inputs
        return (_sum_to(g, a.shape) if needs[0] else None, _sum_to(-g, b.shape) if needs[1] else None)


@register("mul")
class Mul(_Binary):
    def forward(self, a, b):
        return a * b

    def backward(self, g, inputs, needs):
        a, b = inputs
        return (
            _sum_to(g * b, a.shape) if needs[0] else None,
            _sum_to(g * a, b.shape) if needs[1] else None,
        )


@register("div")
class Div(_Binary):
    def forward(self, a, b):
        return a / b

    def backward(self, g, inputs, needs):
        a, b = inputs
        return (
            _sum_to(g / b, a.shape) if needs[0] else None,
            _sum_to(-(g * a) / (b * b), b.shape) if needs[1] else None,
        )


@register("neg")
class Neg(Op):
    def forward(self, a):
        return -a

    def backward(self, g, inputs, needs):
        return (-g,)


@register("pow")
class Pow(Op):
    exponent: float

    def forward(self, a):
        return a**self.exponent

    def backward(self, g, inputs, needs):
        (a,) = inputs
        p = self.exponent
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (g * a * 2.0,)
        return (g * (a ** (p - 1.0)) * p,)


@register("exp")
class Exp(Op):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g, inputs, needs):
        return (g * inputs[0].exp(),)


@register("log")
class Log(Op):
    def forward(self, a):
        return np.log(a)

    def backward(self, g, inputs, needs):
        return (g / inputs[0],)


@register("sqrt")
class Sqrt(Op):
    """Square root; the derivative at exactly zero is taken as zero."""

    def forward(self, a):
        return np.sqrt(a)

    def backward(self, g, inputs, needs):
        (a,) = inputs
        zero = a.data <= 0
        if not zero.any():
            return (g * 0.5 / a.sqrt(),)
        safe = a + Tensor(zero.astype(float))
        return (g * Tensor(0.5 * ~zero) / safe.sqrt(),)


@register("abs")
class Abs(Op):
    def forward(self, a):
        return np.abs(a)

    def backward(self, g, inputs, needs):
        return (g * Tensor(np.sign(inputs[0].data)),)


RELU_RULES = ("backprop", "deconv", "guided")


@register("relu")
class Relu(Op):
    """max(x, 0).

    ``rule`` selects how the backward pass treats the unit: ``backprop`` is
    the chain rule, ``deconv`` passes only positive incoming signal and
    ``guided`` requires both a positive input and a positive signal.  The two
    non-standard rules are for visualization and are not differentiable.
    """

    rule = "backprop"

    def check(self, a):
        if self.rule not in RELU_RULES:
            raise ValueError(f"relu: unknown rule {self.rule!r}")

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g, inputs, needs):
        fwd = inputs[0].data > 0
        if self.rule == "backprop":
            return (g * Tensor(fwd.astype(float)),)
        sig = g.data > 0
        mask = sig if self.rule == "deconv" else sig & fwd
        return (Tensor(g.data * mask),)


@register("max")
class Max(Op):
    """Maximum along one axis; ties go to the lowest index."""

    axis: int

    def check(self, a):
        if not -len(a) <= self.axis < len(a):
            raise shape_error(self.kind, a)

    def forward(self, a):
        return np.max(a, axis=self.axis)

    def backward(self, g, inputs, needs):
        (a,) = inputs
        axis = self.axis % a.ndim
        idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        onehot = np.zeros(a.shape)
        np.put_along_axis(onehot, idx, 1.0, axis=axis)
        expanded = g.reshape(np.expand_dims(g.data, axis).shape).broadcast_to(a.shape)
        return (expanded * Tensor(onehot),)


@register("sum")
class Sum(Op):
    axis = None
    keepdims = False

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g, inputs, needs):
        (a,) = inputs
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else tuple(self.axis)
            kept = list(a.shape)
            for ax in axes:
                kept[ax % a.ndim] = 1
            g = g.reshape(tuple(kept))
        elif self.axis is None and not self.keepdims:
            g = g.reshape((1,) * a.ndim)
        return (g.broadcast_to(a.shape),)


@register("sum_to")
class SumTo(Op):
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""

    shape: tuple

    def check(self, a):
        try:
            if np.broadcast_shapes(a, self.shape) != tuple(a):
                raise ValueError
        except ValueError:
            raise shape_error(self.kind, a, self.shape) from None

    def forward(self, a):
        lead = a.ndim - len(self.shape)
        out = a.sum(axis=tuple(range(lead))) if lead else a
        axes = tuple(i for i, n in enumerate(self.shape) if n == 1 and out.shape[i] != 1)
        if axes:
            out = out.sum(axis=axes, keepdims=True)
        return out

    def backward(self, g, inputs, needs):
        return (g.broadcast_to(inputs[0].shape),)


@register("broadcast_to")
class BroadcastTo(Op):
    shape: tuple

    def check(self, a):
        try:
            np.broadcast_shapes(a, self.shape)
        except ValueError:
            raise shape_error(self.kind, a, self.shape) from None

    def forward(self, a):
        return np.broadcast_to(a, self.shape)

    def backward(self, g, inputs, needs):
        return (_sum_to(g, inputs[0].shape),)


@register("reshape")
class Reshape(Op):
    shape: tuple

    def check(self, a):
        try:
            np.empty(a, dtype=np.int8).reshape(self.shape)
        except ValueError:
            raise shape_error(self.kind, a, self.shape) from None

    def forward(self, a):
        return np.reshape(a, self.shape)

    def backward(self, g, inputs, needs):
        return (g.reshape(inputs[0].shape),)


@register("transpose")
class Transpose(Op):
    axes: tuple

    def check(self, a):
        if sorted(self.axes) != list(range(len(a))):
            raise shape_error(self.kind, a, self.axes)

    def forward(self, a):
        return np.transpose(a, self.axes)

    def backward(self, g, inputs, needs):
        return (g.transpose(tuple(np.argsort(self.axes))),)


def _swap(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(tuple(axes))


@register("matmul")
class Matmul(Op):
    def check(self, a, b):
        if len(a) < 2 or len(b) < 2 or a[-1] != b[-2]:
            raise shape_error(self.kind, a, b)
        _broadcast_shape(self.kind, a[:-2], b[:-2])

    def forward(self, a, b):
        return a @ b

    def backward(self, g, inputs, needs):
        a, b = inputs
        return (
            _sum_to(g @ _swap(b), a.shape) if needs[0] else None,
            _sum_to(_swap(a) @ g, b.shape) if needs[1] else None,
        )


@register("index")
class Index(Op):
    index: object

    def forward(self, a):
        return a[self.index]

    def backward(self, g, inputs, needs):
        return (record_op("index_put", [g], index=self.index, shape=inputs[0].shape),)


@register("index_put")
class IndexPut(Op):
    """Scatter-add into zeros of ``shape`` (adjoint of index)."""

    index: object
    shape: tuple

    def forward(self, a):
        out = np.zeros(self.shape)
        np.add.at(out, self.index, a)
        return out

    def backward(self, g, inputs, needs):
        return (g[self.index],)


@register("flip")
class Flip(Op):
    axis: int

    def forward(self, a):
        return np.flip(a, axis=self.axis).copy()

    def backward(self, g, inputs, needs):
        return (g.flip(self.axis),)


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


@register("unfold")
class Unfold(Op):
    """im2col: (N, C, H, W) -> (N*Ho*Wo, C*kh*kw) patch rows."""

    kernel: tuple
    stride: int = 1
    padding: int = 0

    def check(self, x):
        kh, kw = self.kernel
        if len(x) != 4 or x[2] + 2 * self.padding < kh or x[3] + 2 * self.padding < kw:
            raise shape_error(self.kind, x, self.kernel)

    def forward(self, x):
        kh, kw = self.kernel
        s, p = self.stride, self.padding
        n, c, h, w = x.shape
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        ho, wo = _conv_out(h, kh, s, p), _conv_out(w, kw, s, p)
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
        win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)

    def backward(self, g, inputs, needs):
        return (
            record_op(
                "fold",
                [g],
                kernel=self.kernel,
                stride=self.stride,
                padding=self.padding,
                shape=inputs[0].shape,
            ),
        )


@register("fold")
class Fold(Op):
    """col2im: scatter-add patch rows back into an image (adjoint of unfold)."""

    kernel: tuple
    stride: int = 1
    padding: int = 0
    shape: tuple = ()

    def forward(self, cols):
        kh, kw = self.kernel
        s, p = self.stride, self.padding
        n, c, h, w = self.shape
        ho, wo = _conv_out(h, kh, s, p), _conv_out(w, kw, s, p)
        # one contiguous copy makes the strided accumulation below much cheaper
        patches = np.ascontiguousarray(cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
        out = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(kh):
            for j in range(kw):
                out[:, :, i : i + s * ho : s, j : j + s * wo : s] += patches[:, :, i, j]
        return out[:, :, p : p + h, p : p + w]

    def backward(self, g, inputs, needs):
        return (record_op("unfold", [g], kernel=self.kernel, stride=self.stride, padding=self.padding),)


@register("maxpool2x2")
class MaxPool2x2(Op):
    """2x2 max pooling with stride 2; ties go to the first element in row-major window order."""

    def check(self, x):
        if len(x) != 4 or x[2] % 2 or x[3] % 2:
            raise shape_error(self.kind, x)

    def forward(self, x):
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2)
        return win.max(axis=(3, 5))

    def backward(self, g, inputs, needs):
        x = inputs[0].data
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        arg = win.argmax(axis=-1)
        onehot = (np.arange(4) == arg[..., None]).astype(float)
        mask = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (record_op("upsample2x2", [g]) * Tensor(mask),)


@register("upsample2x2")
class Upsample2x2(Op):
    """Nearest-neighbour 2x upsampling of the last two axes."""

    def forward(self, x):
        return x.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(self, g, inputs, needs):
        return (record_op("sumpool2x2", [g]),)


@register("sumpool2x2")
class SumPool2x2(Op):
    def check(self, x):
        if len(x) < 2 or x[-2] % 2 or x[-1] % 2:
            raise shape_error(self.kind, x)

    def forward(self, x):
        *lead, h, w = x.shape
        return x.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1))

    def backward(self, g, inputs, needs):
        return (record_op("upsample2x2", [g]),)


@register("sparse_linear")
class SparseLinear(Op):
    """out = reshape(M @ ravel(x), out_shape) for a fixed sparse matrix M."""

    matrix: object
    out_shape: tuple

    def check(self, x):
        if int(np.prod(x)) != self.matrix.shape[1]:
            raise shape_error(self.kind, x, self.matrix.shape)

    def forward(self, x):
        return (self.matrix @ x.reshape(-1)).reshape(self.out_shape)

    def backward(self, g, inputs, needs):
        return (
            record_op("sparse_linear", [g], matrix=self.matrix.T.tocsr(), out_shape=inputs[0].shape),
        )
