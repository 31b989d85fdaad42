"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive builds a new immutable Tensor and, when any operand requires
a gradient, records a backward closure mapping the output gradient to one
gradient per operand. `backward()` walks the recorded graph once, in reverse
topological order, and sums contributions over fan-out.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ValidationError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

LEAKY_SLOPE = 0.01


class Tensor:
    """Immutable dense tensor node.

    data: float64 array, read-only once constructed
    requires_grad: True for parameters and for any node depending on one
    op: primitive tag ("leaf" for inputs and parameters)
    """

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        op: str,
        parents: Tuple["Tensor", ...],
        backward: BackwardFn,
    ) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(data, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        # Constant subgraphs record nothing.
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    # ----- Introspection -----
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # ----- Operators -----
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap a constant; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValidationError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ----- Elementwise arithmetic -----
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, "add", (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, "subtract", (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)

    def backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, "multiply", (a, b), backward)


def add_bias(x: ArrayLike, bias: ArrayLike) -> Tensor:
    """Add a per-channel bias along axis 1 (dense rows or conv feature maps)."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise ValidationError(f"add_bias: incompatible shapes {x.shape} and {bias.shape}")
    view = (1, bias.shape[0]) + (1,) * (x.data.ndim - 2)
    return add(x, reshape(bias, view))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray):
        return (2.0 * a.data * g,)

    return Tensor._from_op(a.data * a.data, "square", (a,), backward)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g: np.ndarray):
        return (g * out,)

    return Tensor._from_op(out, "exp", (a,), backward)


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValidationError(f"log: input of shape {a.shape} has non-positive entries")

    def backward(g: np.ndarray):
        return (g / a.data,)

    return Tensor._from_op(np.log(a.data), "log", (a,), backward)


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)

    def backward(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, "sigmoid", (a,), backward)


def leaky_relu(a: ArrayLike, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0.0, 1.0, slope)

    def backward(g: np.ndarray):
        return (g * factor,)

    return Tensor._from_op(a.data * factor, "leaky_relu", (a,), backward)


def clip(a: ArrayLike, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; gradient is zero where clamping is active."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)

    def backward(g: np.ndarray):
        return (np.where(inside, g, 0.0),)

    return Tensor._from_op(np.clip(a.data, low, high), "clip", (a,), backward)


# ----- Shape and reductions -----
def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValidationError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    def backward(g: np.ndarray):
        return (g.reshape(a.shape),)

    return Tensor._from_op(out, "reshape", (a,), backward)


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValidationError(f"transpose: expected a matrix, got shape {a.shape}")

    def backward(g: np.ndarray):
        return (g.T,)

    return Tensor._from_op(a.data.T, "transpose", (a,), backward)


def reduce_sum(a: ArrayLike, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(out, "sum", (a,), backward)


def reduce_mean(a: ArrayLike, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValidationError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, "matmul", (a, b), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ValidationError("concat: no operands")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ValidationError(
            f"concat: incompatible shapes {[p.shape for p in parts]} along axis {axis}"
        ) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, "concat", parts, backward)


def gather(a: ArrayLike, indices: Sequence[int], axis: int = 0) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise ValidationError(f"gather: indices out of range for axis {axis} of shape {a.shape}")
    out = np.take(a.data, idx, axis=axis)

    def backward(g: np.ndarray):
        full = np.zeros(a.shape)
        locator = (slice(None),) * (axis % a.data.ndim) + (idx,)
        np.add.at(full, locator, g)
        return (full,)

    return Tensor._from_op(out, "gather", (a,), backward)


# ----- 3-D convolution -----
def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def conv_transpose_output_extent(extent: int, kernel: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (extent - 1) * stride - 2 * padding + kernel + output_padding


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    width = ((0, 0), (0, 0)) + ((padding, padding),) * 3
    return np.pad(x, width)


def _columns(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Strided (N, C, oD, oH, oW, k, k, k) window view of the padded input."""
    windows = sliding_window_view(_pad(x, padding), (kernel,) * 3, axis=(2, 3, 4))
    return windows[:, :, ::stride, ::stride, ::stride]


def _conv3d_values(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    cols = _columns(x, w.shape[2], stride, padding)
    return np.einsum("ncdhwijk,fcijk->nfdhw", cols, w, optimize=True)


def _conv3d_scatter(g: np.ndarray, w: np.ndarray, in_shape: Tuple[int, ...], stride: int, padding: int) -> np.ndarray:
    """Adjoint of `_conv3d_values` with respect to its input."""
    n, c, d, h, wd = in_shape
    k = w.shape[2]
    od, oh, ow = g.shape[2:]
    padded = np.zeros((n, c, d + 2 * padding, h + 2 * padding, wd + 2 * padding))
    for i in range(k):
        for j in range(k):
            for l in range(k):
                contribution = np.einsum("nfdhw,fc->ncdhw", g, w[:, :, i, j, l])
                padded[
                    :, :,
                    i:i + stride * (od - 1) + 1:stride,
                    j:j + stride * (oh - 1) + 1:stride,
                    l:l + stride * (ow - 1) + 1:stride,
                ] += contribution
    return padded[:, :, padding:padding + d, padding:padding + h, padding:padding + wd]


def _check_conv(name: str, x: Tensor, w: Tensor, channel_axis: int) -> None:
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ValidationError(f"{name}: expected 5-D input and kernel, got {x.shape} and {w.shape}")
    k = w.shape[2]
    if w.shape[3] != k or w.shape[4] != k:
        raise ValidationError(f"{name}: kernel must be cubic, got {w.shape}")
    if x.shape[1] != w.shape[channel_axis]:
        raise ValidationError(f"{name}: channel mismatch between input {x.shape} and kernel {w.shape}")


def conv3d(x: ArrayLike, w: ArrayLike, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, D, H, W) input with (F, C, k, k, k) kernels."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv("conv3d", x, w, channel_axis=1)
    k = w.shape[2]
    extents = [conv_output_extent(e, k, stride, padding) for e in x.shape[2:]]
    if min(extents) < 1:
        raise ValidationError(f"conv3d: kernel {w.shape} does not fit input {x.shape} with padding {padding}")

    def backward(g: np.ndarray):
        gx = _conv3d_scatter(g, w.data, x.shape, stride, padding) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.einsum("nfdhw,ncdhwijk->fcijk", g, _columns(x.data, k, stride, padding), optimize=True)
        return gx, gw

    return Tensor._from_op(_conv3d_values(x.data, w.data, stride, padding), "conv3d", (x, w), backward)


def conv3d_transpose(
    x: ArrayLike,
    w: ArrayLike,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution: the exact adjoint of `conv3d` with the same kernel.

    x: (N, F, d, h, w); w: (F, C, k, k, k) laid out as for the forward conv3d.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_conv("conv3d_transpose", x, w, channel_axis=0)
    if not 0 <= output_padding < max(stride, 1):
        raise ValidationError(f"conv3d_transpose: output_padding {output_padding} must be in [0, {stride})")
    k = w.shape[2]
    extents = [conv_transpose_output_extent(e, k, stride, padding, output_padding) for e in x.shape[2:]]
    if min(extents) < 1:
        raise ValidationError(f"conv3d_transpose: input {x.shape} with kernel {w.shape} yields an empty output")
    out_shape = (x.shape[0], w.shape[1], *extents)

    def backward(g: np.ndarray):
        gx = _conv3d_values(g, w.data, stride, padding) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.einsum("nfdhw,ncdhwijk->fcijk", x.data, _columns(g, k, stride, padding), optimize=True)
        return gx, gw

    values = _conv3d_scatter(x.data, w.data, out_shape, stride, padding)
    return Tensor._from_op(values, "conv3d_transpose", (x, w), backward)


# ----- Reverse pass -----
def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited: set[int] = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Gradient of a scalar root with respect to leaves that require gradients.

    When `leaves` is given, every listed tensor gets an entry, zero if the
    root does not depend on it.
    """
    if root.data.size != 1:
        raise ValidationError(f"backward: root must be a scalar, got shape {root.shape}")

    grads: Dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    found: Dict[int, Tuple[Tensor, np.ndarray]] = {}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                found[id(node)] = (node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    if leaves is None:
        return {node: g for node, g in found.values()}
    result: Dict[Tensor, np.ndarray] = {}
    for leaf in leaves:
        entry = found.get(id(leaf))
        result[leaf] = entry[1] if entry is not None else np.zeros(leaf.shape)
    return result


def gradient_check(
    f: Callable[[Tensor], Tensor],
    x: ArrayLike,
    h: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between backward() and central differences.

    indices: flat coordinates to check (all of them by default)
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    analytic = backward(f(leaf), leaves=[leaf])[leaf].ravel()

    coords = range(base.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        step = np.zeros(base.size)
        step[i] = h
        step = step.reshape(base.shape)
        plus = f(Tensor(base + step)).item()
        minus = f(Tensor(base - step)).item()
        numeric = (plus - minus) / (2.0 * h)
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
