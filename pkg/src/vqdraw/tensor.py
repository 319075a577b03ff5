"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient, the output records its parents and a closure that maps the output
gradient to input gradients. :func:`backward` walks that graph once in reverse
topological order. The graph lives only as long as the tensors that reference
it, so each forward pass builds a fresh one.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np

GROUP_NORM_EPS = 1e-5

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's shape rule."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph nodes."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise and linear algebra
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "subtract")


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "multiply")


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    s = float(s)

    def backward(g):
        return (g * s,)

    return _result(a.data * a.data.dtype.type(s), (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not (m, k) x (k, n)")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (B, in) and weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result(out, parents, backward, "linear")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        # zero subgradient at exactly 0
        return (g * mask,)

    return _result(np.maximum(a.data, 0), (a,), backward, "relu")


def channel_mask(x: Tensor, mask: Tensor) -> Tensor:
    """Broadcast a length-C vector over axis 1 of ``x`` and multiply."""
    if mask.ndim != 1 or x.ndim < 2 or x.shape[1] != mask.shape[0]:
        raise ShapeError(f"channel_mask: mask {mask.shape} does not match channels of {x.shape}")
    view = mask.data.reshape((1, -1) + (1,) * (x.ndim - 2))
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        return g * view, (g * x.data).sum(axis=reduce_axes)

    return _result(x.data * view, (x, mask), backward, "channel_mask")


# --------------------------------------------------------------------------
# reductions and losses
# --------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape),)

    return _result(a.data.sum(axis=axes), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, a.shape),)

    return _result(a.data.mean(axis=axes), (a,), backward, "mean")


def mean_squared_error(a, b, axis=None) -> Tensor:
    """Mean of ``(a - b)**2`` over ``axis`` (all axes by default).

    ``a`` and ``b`` broadcast against each other; the reduction axes index
    the broadcast shape.
    """
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape("mean_squared_error", a, b)
    axes = _norm_axes(axis, len(shape))
    count = math.prod(shape[i] for i in axes)
    diff = a.data - b.data

    def backward(g):
        d = np.expand_dims(g, axes) * (2.0 / count) * diff
        return _unbroadcast(d, a.shape), _unbroadcast(-d, b.shape)

    return _result(np.square(diff).mean(axis=axes), (a, b), backward, "mean_squared_error")


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), backward, "reshape")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concatenate: shapes {[t.shape for t in tensors]} differ off axis {axis}"
        ) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return _result(out, tensors, backward, "concatenate")


def take_rows(a: Tensor, index) -> Tensor:
    """Pick ``a[b, index[b]]`` for every row ``b``; the index is a constant."""
    index = np.asarray(index, dtype=np.intp)
    if a.ndim < 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"take_rows: index {index.shape} does not select from {a.shape}")
    rows = np.arange(a.shape[0])

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _result(a.data[rows, index], (a,), backward, "take_rows")


# --------------------------------------------------------------------------
# convolutions
# --------------------------------------------------------------------------


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather (B, C, Hp, Wp) patches into a (kh*kw*C, B*ho*wo) matrix.

    Kernel offsets lead so every per-offset slab is contiguous.
    """
    b, c = xp.shape[:2]
    cols = np.empty((kh, kw, c, b, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(kh * kw * c, b * ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add a (kh*kw*C, B*ho*wo) matrix back onto a (B, C, Hp, Wp) canvas."""
    b, c, hp, wp = shape
    cols = cols.reshape(kh, kw, c, b, ho, wo)
    canvas = np.zeros((c, b, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            canvas[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[i, j]
    return canvas.transpose(1, 0, 2, 3)


def _kernel_matrix(weight: np.ndarray) -> np.ndarray:
    # (O, I, kh, kw) -> (O, kh*kw*I), matching the im2col row order
    o = weight.shape[0]
    return weight.transpose(0, 2, 3, 1).reshape(o, -1)


def _kernel_tensor(mat: np.ndarray, shape) -> np.ndarray:
    # inverse of _kernel_matrix
    o, i, kh, kw = shape
    return mat.reshape(o, kh, kw, i).transpose(0, 3, 1, 2)


def _channels_first(a: np.ndarray) -> np.ndarray:
    # (B, C, H, W) -> (C, B*H*W)
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def _batch_first(a: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    # (C, B*H*W) -> contiguous (B, C, H, W)
    return np.ascontiguousarray(a.reshape(-1, b, h, w).transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, Cin, H, W) with weight (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    cout, cin, kh, kw = weight.shape
    b, _, h, w = x.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = _kernel_matrix(weight.data)
    out = w2 @ cols
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
        out += bias.data[:, None]
        parents.append(bias)
    out = _batch_first(out, b, ho, wo)

    def backward(g):
        g2 = _channels_first(g)
        gx = None
        if x.requires_grad:
            full = _col2im(w2.T @ g2, xp.shape, kh, kw, stride, ho, wo)
            gx = full[:, :, padding : padding + h, padding : padding + w]
        gw = _kernel_tensor(g2 @ cols.T, weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return _result(out, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution of (B, Cin, H, W) with weight (Cin, Cout, kh, kw).

    Output extent is ``(H - 1) * stride - 2 * padding + kh``; this is the
    adjoint of :func:`conv2d` with the same stride and padding.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {weight.shape}")
    cin, cout, kh, kw = weight.shape
    b, _, h, w = x.shape
    full_shape = (b, cout, (h - 1) * stride + kh, (w - 1) * stride + kw)
    ho, wo = full_shape[2] - 2 * padding, full_shape[3] - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: padding {padding} leaves no output for {x.shape}")
    x2 = _channels_first(x.data)
    w2 = _kernel_matrix(weight.data)
    full = _col2im(w2.T @ x2, full_shape, kh, kw, stride, h, w)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv_transpose2d: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        gcols = _im2col(_pad(g, padding), kh, kw, stride, h, w)
        gx = _batch_first(w2 @ gcols, b, h, w) if x.requires_grad else None
        gw = _kernel_tensor(x2 @ gcols.T, weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, parents, backward, "conv_transpose2d")



# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = GROUP_NORM_EPS) -> Tensor:
    """Normalize each group of channels per example, then scale and shift per channel."""
    if x.ndim < 2:
        raise ShapeError(f"group_norm: input {x.shape} has no channel axis")
    b, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide {c} channels")
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"group_norm: scale {weight.shape} / shift {bias.shape} do not match {c} channels")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    var = np.square(centered).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(x.shape)
    cview = (1, -1) + (1,) * (x.ndim - 2)
    out = xhat * weight.data.reshape(cview) + bias.data.reshape(cview)
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = (g * weight.data.reshape(cview)).reshape(b, groups, -1)
            xh = xhat.reshape(b, groups, -1)
            gx = inv_std * (
                dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True)
            )
            gx = gx.reshape(x.shape)
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return _result(out, (x, weight, bias), backward, "group_norm")


# --------------------------------------------------------------------------
# generic entry point and backward pass
# --------------------------------------------------------------------------

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "subtract": subtract,
    "scalar-multiply": scale,
    "multiply": multiply,
    "matrix-multiply": matmul,
    "linear": linear,
    "conv2d": conv2d,
    "conv-transpose2d": conv_transpose2d,
    "relu": relu,
    "group-normalization": group_norm,
    "channel-mask-multiply": channel_mask,
    "mean-squared-error": mean_squared_error,
    "mean": mean,
    "sum": sum,
    "concatenate": lambda *ts, axis=0: concatenate(ts, axis=axis),
    "reshape": reshape,
    "take-rows": take_rows,
}


def apply(op_kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch ``op_kind`` by name, e.g. ``apply("relu", t)``."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; expected one of {sorted(OPS)}") from None
    return fn(*inputs, **attrs)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d loss / d leaf into ``leaf.grad`` for every reachable leaf.

    Leaf gradients add onto whatever is already stored, which is what gradient
    accumulation across micro-batches relies on. When ``params`` is given, the
    gradient contributed by this call is returned for each of them, with exact
    zeros for parameters the loss does not reach.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    contributed: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                contributed[id(node)] = g
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return None
    return [contributed.get(id(p), np.zeros_like(p.data)) for p in params]
