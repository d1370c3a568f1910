"""Tensor module holds the dense value type every other module computes with and the reverse-mode
 gradient machinery used by the trainer.

The Module contains following Classes and functions
- `Tensor`: Immutable float32 n-dimensional array. All elements are finite.
- `GradTape`: Records the ops executed while it is active so `backward` can replay them in reverse.
- op functions (`matmul`, `softmax_rows`, `conv2d`, `group_norm`, `linear`, `silu`, `upsample2x`, `add`,
 `sub`, `mul`, `scale`, `reshape`, `transpose`, `sum_all`, `mean_squared_error`): the frozen op set the toy
 U-Net needs.

Ops record themselves only when a tape is active on the current thread, so inference pays nothing for
the gradient bookkeeping.
"""
import numbers
import threading

import numpy as np

from attn_style.exc import MissingGradientError, NumericError, ShapeError


_state = threading.local()


def current_tape():
    """Return the innermost active GradTape of this thread or None."""
    stack = getattr(_state, "tapes", None)
    if not stack:
        return None
    return stack[-1]


def _freeze(array, op):
    if not np.all(np.isfinite(array)):
        raise NumericError("Non-finite value produced by %s" % op)
    array.setflags(write=False)
    return array


class Tensor(object):
    """Dense row-major array of 32-bit reals.

    Tensors are values: the backing array is read-only and every op returns a new Tensor, so a Tensor can
    be shared freely between threads.

    :param data: anything `numpy.asarray` accepts
    :param shape: optional target shape, product must equal the element count
    """

    __slots__ = ("_array",)

    def __init__(self, data, shape=None):
        array = np.array(data, dtype=np.float32)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if int(np.prod(shape)) != array.size:
                raise ShapeError("Cannot view %d elements as %r" % (array.size, shape))
            array = array.reshape(shape)
        if any(s <= 0 for s in array.shape):
            raise ShapeError("Dimension sizes must be positive, got %r" % (array.shape,))
        self._array = _freeze(array, "Tensor()")

    @classmethod
    def _wrap(cls, array, op):
        obj = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float32)
        if not array.flags.c_contiguous:
            array = array.copy()
        obj._array = _freeze(array, op)
        return obj

    @classmethod
    def zeros(cls, shape):
        return cls._wrap(np.zeros(shape, dtype=np.float32), "zeros")

    @property
    def shape(self):
        return self._array.shape

    @property
    def ndim(self):
        return self._array.ndim

    @property
    def size(self):
        return self._array.size

    @property
    def data(self):
        """Flat row-major view of the elements."""
        return self._array.reshape(-1)

    def numpy(self):
        """Return the read-only backing array."""
        return self._array

    def item(self):
        if self.size != 1:
            raise ShapeError("item() needs a single element tensor, got shape %r" % (self.shape,))
        return float(self._array.reshape(-1)[0])

    def __repr__(self):
        return "<Tensor shape=%r>" % (self.shape,)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, numbers.Real):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class TapeRecord(object):
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape(object):
    """Ordered record of executed ops.

    Use as a context manager; every op run inside the block is appended to `records`. One tape per
    training step, written by a single thread.

    **Examples**

        >>> with GradTape() as tape:
        ...     loss = sum_all(mul(x, x))
        >>> grads = tape.backward(loss, {"x": x})
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc_info):
        _state.tapes.pop()

    def __len__(self):
        return len(self.records)

    def record(self, op, inputs, output, backward):
        self.records.append(TapeRecord(op, inputs, output, backward))

    def backward(self, loss, parameters):
        """Run reverse-mode accumulation from a scalar loss.

        :param loss: scalar Tensor produced while this tape was active
        :param parameters: mapping of name to Tensor to return gradients for
        :returns: dict of name to float32 ndarray shaped like the parameter
        """
        if loss.size != 1:
            raise ShapeError("backward() needs a scalar loss, got shape %r" % (loss.shape,))
        grads = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        for record in reversed(self.records):
            grad = grads.pop(id(record.output), None)
            if grad is None:
                continue
            for tensor, partial in zip(record.inputs, record.backward(grad)):
                if partial is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + partial
                else:
                    grads[key] = partial
        result = {}
        for name, parameter in parameters.items():
            try:
                grad = grads[id(parameter)]
            except KeyError:
                raise MissingGradientError("Parameter %r is not on the tape" % name)
            result[name] = np.asarray(grad, dtype=np.float32).reshape(parameter.shape)
        return result


def backward(loss, tape, parameters):
    """Module level alias of `GradTape.backward`."""
    return tape.backward(loss, parameters)


def _emit(op, inputs, array, backward):
    output = Tensor._wrap(array, op)
    tape = current_tape()
    if tape is not None:
        tape.record(op, inputs, output, backward)
    return output


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        target = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("%s: incompatible shapes %r and %r" % (op, a.shape, b.shape))
    if target != a.shape:
        raise ShapeError("%s: %r may only broadcast into %r" % (op, b.shape, a.shape))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def grad_fn(grad):
        return grad, _unbroadcast(grad, b.shape)

    return _emit("add", (a, b), a.numpy() + b.numpy(), grad_fn)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def grad_fn(grad):
        return grad, -_unbroadcast(grad, b.shape)

    return _emit("sub", (a, b), a.numpy() - b.numpy(), grad_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def grad_fn(grad):
        return grad * b.numpy(), _unbroadcast(grad * a.numpy(), b.shape)

    return _emit("mul", (a, b), a.numpy() * b.numpy(), grad_fn)


def scale(x, factor):
    """Multiply by a python constant."""
    x = as_tensor(x)
    factor = float(factor)

    def grad_fn(grad):
        return (grad * factor,)

    return _emit("scale", (x,), x.numpy() * np.float32(factor), grad_fn)


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError("Cannot reshape %r into %r" % (x.shape, shape))

    def grad_fn(grad):
        return (grad.reshape(x.shape),)

    return _emit("reshape", (x,), x.numpy().reshape(shape), grad_fn)


def transpose(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("transpose expects a matrix, got shape %r" % (x.shape,))

    def grad_fn(grad):
        return (grad.T,)

    return _emit("transpose", (x,), x.numpy().T, grad_fn)


def matmul(a, b):
    """Matrix product of an m×k and a k×n Tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul: cannot multiply %r by %r" % (a.shape, b.shape))

    def grad_fn(grad):
        return grad @ b.numpy().T, a.numpy().T @ grad

    return _emit("matmul", (a, b), a.numpy() @ b.numpy(), grad_fn)


def softmax_rows(x):
    """Row-wise softmax, stabilized by subtracting the row maximum and accumulated in float64."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("softmax_rows expects a matrix, got shape %r" % (x.shape,))
    shifted = x.numpy().astype(np.float64)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)

    def grad_fn(grad):
        return (probs * (grad - (grad * probs).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", (x,), probs, grad_fn)


def silu(x):
    x = as_tensor(x)
    values = x.numpy().astype(np.float64)
    sigmoid = 0.5 * (1.0 + np.tanh(0.5 * values))

    def grad_fn(grad):
        return (grad * (sigmoid + values * sigmoid * (1.0 - sigmoid)),)

    return _emit("silu", (x,), values * sigmoid, grad_fn)


def linear(x, weight, bias=None):
    """Affine map `x @ weight + bias` for x of shape n×in and weight of shape in×out."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError("linear: cannot apply %r weight to %r input" % (weight.shape, x.shape))
    out = x.numpy() @ weight.numpy()
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError("linear: bias shape %r does not match %r" % (bias.shape, weight.shape))
        out = out + bias.numpy()
        inputs = (x, weight, bias)

    def grad_fn(grad):
        grads = (grad @ weight.numpy().T, x.numpy().T @ grad)
        if bias is not None:
            grads += (grad.sum(axis=0),)
        return grads

    return _emit("linear", inputs, out, grad_fn)


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlation of a C_in×H×W input with a C_out×C_in×k×k kernel.

    :param stride: step between output positions
    :param pad: zero padding added on every spatial border
    :returns: Tensor of shape C_out×H'×W' with H' = (H + 2·pad − k)/stride + 1
    :raises ShapeError: when that output size is not a whole number
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError("conv2d: expected C×H×W input and 4-d kernel, got %r, %r" % (x.shape, weight.shape))
    c_in, height, width = x.shape
    c_out, k_in, k, k_w = weight.shape
    if k_in != c_in or k != k_w:
        raise ShapeError("conv2d: kernel %r does not fit input %r" % (weight.shape, x.shape))
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: invalid stride %r / pad %r" % (stride, pad))
    span_h, span_w = height + 2 * pad - k, width + 2 * pad - k
    if span_h < 0 or span_w < 0:
        raise ShapeError("conv2d: kernel %d exceeds the padded input %r (pad=%d)" % (k, x.shape, pad))
    if span_h % stride or span_w % stride:
        raise ShapeError(
            "conv2d: stride %d does not tile the padded input %r with kernel %d (pad=%d)"
            % (stride, x.shape, k, pad)
        )
    out_h, out_w = span_h // stride + 1, span_w // stride + 1

    padded = np.pad(x.numpy(), ((0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, out_h * out_w)
    kernel = weight.numpy().reshape(c_out, c_in * k * k)
    out = kernel @ cols
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError("conv2d: bias shape %r does not match %d output channels" % (bias.shape, c_out))
        out = out + bias.numpy()[:, None]
        inputs = (x, weight, bias)

    def grad_fn(grad):
        grad = grad.reshape(c_out, out_h * out_w)
        grad_weight = (grad @ cols.T).reshape(weight.shape)
        grad_cols = (kernel.T @ grad).reshape(c_in, k, k, out_h, out_w)
        grad_padded = np.zeros(padded.shape, dtype=grad_cols.dtype)
        for i in range(k):
            for j in range(k):
                grad_padded[
                    :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride
                ] += grad_cols[:, i, j]
        grads = (grad_padded[:, pad : pad + height, pad : pad + width], grad_weight)
        if bias is not None:
            grads += (grad.sum(axis=1),)
        return grads

    return _emit("conv2d", inputs, out.reshape(c_out, out_h, out_w), grad_fn)


def group_norm(x, groups, scale, shift, eps=1e-5):
    """Normalize each channel group of a C×H×W input to zero mean and unit variance, then apply the
    per-channel affine `scale`, `shift`.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.ndim != 3:
        raise ShapeError("group_norm expects C×H×W input, got %r" % (x.shape,))
    channels = x.shape[0]
    if groups < 1 or channels % groups:
        raise ShapeError("group_norm: %d channels are not divisible into %r groups" % (channels, groups))
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ShapeError("group_norm: affine parameters must have shape (%d,)" % channels)
    if not eps > 0:
        raise ShapeError("group_norm: eps must be positive")
    grouped = x.numpy().astype(np.float64).reshape(groups, -1)
    mean = grouped.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(grouped.var(axis=1, keepdims=True) + eps)
    normed = ((grouped - mean) * inv_std).reshape(x.shape)
    out = normed * scale.numpy()[:, None, None] + shift.numpy()[:, None, None]

    def grad_fn(grad):
        grad_normed = (grad * scale.numpy()[:, None, None]).reshape(groups, -1)
        flat = normed.reshape(groups, -1)
        count = flat.shape[1]
        grad_x = (
            inv_std
            / count
            * (
                count * grad_normed
                - grad_normed.sum(axis=1, keepdims=True)
                - flat * (grad_normed * flat).sum(axis=1, keepdims=True)
            )
        )
        return (
            grad_x.reshape(x.shape),
            (grad * normed).sum(axis=(1, 2)),
            grad.sum(axis=(1, 2)),
        )

    return _emit("group_norm", (x, scale, shift), out, grad_fn)


def upsample2x(x):
    """Nearest-neighbour upsampling of a C×H×W input to C×2H×2W."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError("upsample2x expects C×H×W input, got %r" % (x.shape,))
    channels, height, width = x.shape

    def grad_fn(grad):
        return (grad.reshape(channels, height, 2, width, 2).sum(axis=(2, 4)),)

    return _emit("upsample2x", (x,), x.numpy().repeat(2, axis=1).repeat(2, axis=2), grad_fn)


def sum_all(x):
    x = as_tensor(x)

    def grad_fn(grad):
        return (np.full(x.shape, float(grad.reshape(-1)[0])),)

    return _emit("sum_all", (x,), np.array(x.numpy().sum(dtype=np.float64)), grad_fn)


def mean_squared_error(prediction, target):
    """Mean over all elements of the squared difference, accumulated in float64."""
    prediction, target = as_tensor(prediction), as_tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError("mean_squared_error: %r vs %r" % (prediction.shape, target.shape))
    diff = prediction.numpy().astype(np.float64) - target.numpy().astype(np.float64)

    def grad_fn(grad):
        partial = float(grad.reshape(-1)[0]) * 2.0 * diff / diff.size
        return partial, -partial

    return _emit("mean_squared_error", (prediction, target), np.array(np.mean(diff * diff)), grad_fn)
