"""Dense float32 tensors with a reverse-mode gradient tape.

Every op returns a new :class:`Tensor`. When any input is tracked (a leaf with
``requires_grad`` or the output of a tracked op) the result carries a
:class:`Node` recording the op kind, its inputs and a closure that maps the
output gradient to input gradients. Node ids come from a global counter, so
sorting by id gives a topological order without an explicit list.

Layouts are NCHW for images and ``(out, in, kh, kw)`` for conv kernels;
transposed-conv kernels are ``(in, out, kh, kw)``.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()
_default_dtype = np.float32


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    Only the finite-difference oracle uses this (with float64)."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = old


class Node:
    __slots__ = ("id", "kind", "inputs", "backward")

    def __init__(self, kind: str, inputs: tuple, backward: Callable):
        self.id = next(_node_ids)
        self.kind = kind
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _default_dtype:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        return t

    @property
    def dims(self) -> tuple:
        return self.data.shape

    shape = dims

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *dims):
        if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
            dims = tuple(dims[0])
        return reshape(self, dims)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_nonscalar(t):
    raise ShapeError(f"item() needs a single-element tensor, got dims {list(t.dims)}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _finish(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    t = Tensor._wrap(out)
    if any(i.tracked for i in inputs):
        t.node = Node(kind, tuple(inputs), backward)
    return t


def _unbroadcast(grad: np.ndarray, dims: tuple) -> np.ndarray:
    while grad.ndim > len(dims):
        grad = grad.sum(axis=0)
    for ax, d in enumerate(dims):
        if d == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_dims(kind: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.dims, b.dims)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible dims {list(a.dims)} and {list(b.dims)}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_dims("add", a, b)
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.dims), _unbroadcast(g, b.dims)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_dims("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.dims), _unbroadcast(-g, b.dims)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_dims("mul", a, b)
    return _finish("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.dims), _unbroadcast(g * a.data, b.dims)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _finish("relu", np.where(mask, x.data, 0).astype(x.data.dtype), (x,),
                   lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1, slope).astype(x.data.dtype)
    return _finish("leaky_relu", x.data * factor, (x,), lambda g: (g * factor,))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _finish("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _finish("tanh", t, (x,), lambda g: (g * (1 - t * t),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _finish("exp", e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive input")
    return _finish("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Hard clamp; zero gradient where the clamp is active."""
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _finish("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def softplus(x) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    x = as_tensor(x)
    out = np.logaddexp(0, x.data).astype(x.data.dtype)
    return _finish("softplus", out, (x,), lambda g: (g * _stable_sigmoid(x.data),))


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.dims[1] != b.dims[0]:
        raise ShapeError(f"matmul: incompatible dims {list(a.dims)} and {list(b.dims)}")
    return _finish("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(x, dims) -> Tensor:
    x = as_tensor(x)
    dims = tuple(int(d) for d in dims)
    try:
        out = x.data.reshape(dims)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {list(x.dims)} to {list(dims)}") from None
    src = x.dims
    return _finish("reshape", out, (x,), lambda g: (g.reshape(src),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible dims " + " and ".join(str(list(t.dims)) for t in ts)) from None
    splits = np.cumsum([t.dims[axis] for t in ts])[:-1]
    return _finish("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    src = x.dims

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _finish("sum", out, (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    src = x.dims
    count = x.data.size // max(out.size, 1)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _finish("mean", out, (x,), back)


def broadcast(x, dims) -> Tensor:
    x = as_tensor(x)
    dims = tuple(dims)
    try:
        out = np.broadcast_to(x.data, dims).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {list(x.dims)} to {list(dims)}") from None
    src = x.dims
    return _finish("broadcast", out, (x,), lambda g: (_unbroadcast(g, src),))


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def transpose_conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + kernel


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix (N*ho*wo, C*kh*kw), rows ordered (n, y, x), columns (c, i, j)."""
    n, c, h, w = x.shape
    need_h, need_w = (ho - 1) * stride + kh, (wo - 1) * stride + kw
    xp = np.pad(x, ((0, 0), (0, 0), (pad, max(pad, need_h - h - pad)), (pad, max(pad, need_w - w - pad))))
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, c, kh, kw), (sn, sh * stride, sw * stride, sc, sh, sw), writeable=False)
    return np.ascontiguousarray(win).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, n: int, h: int, w: int, stride: int, pad: int) -> np.ndarray:
    """Sum patch contributions back onto (N, C, h, w).

    ``cols`` is laid out (C, kh, kw, N, hi, wi) so each tap is a contiguous slab.
    """
    c, kh, kw, _, hi, wi = cols.shape
    hp = max(h + 2 * pad, (hi - 1) * stride + kh)
    wp = max(w + 2 * pad, (wi - 1) * stride + kw)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * hi:stride, j:j + stride * wi:stride] += cols[:, i, j]
    return np.ascontiguousarray(out[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3))


def _rows_to_nchw(m: np.ndarray, n: int, ho: int, wo: int) -> np.ndarray:
    return np.ascontiguousarray(m.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))


def _nchw_to_channel_rows(a: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W)."""
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)).reshape(a.shape[1], -1)


def _check_conv(kind, x, w, in_axis):
    if x.data.ndim != 4 or w.data.ndim != 4 or x.dims[1] != w.dims[in_axis]:
        raise ShapeError(f"{kind}: incompatible dims {list(x.dims)} and {list(w.dims)}")


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    _check_conv("conv2d", x, w, 1)
    n, c, h, wd = x.dims
    o, _, kh, kw = w.dims
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {list(w.dims)} does not fit input {list(x.dims)}")
    cols = _im2col(x.data, kh, kw, stride, pad, ho, wo)
    wmat = w.data.reshape(o, -1)
    out = _rows_to_nchw(cols @ wmat.T, n, ho, wo)

    def back(g):
        gx = gw = None
        if w.tracked:
            grows = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
            gw = (grows.T @ cols).reshape(w.dims)
        if x.tracked:
            gcols = (wmat.T @ _nchw_to_channel_rows(g)).reshape(c, kh, kw, n, ho, wo)
            gx = _col2im(gcols, n, h, wd, stride, pad)
        return gx, gw

    return _finish("conv2d", out, (x, w), back)


def transpose_conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of conv2d with respect to its input; kernel layout (in, out, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv("transpose_conv2d", x, w, 0)
    n, i_ch, h, wd = x.dims
    _, o, kh, kw = w.dims
    ho, wo = transpose_conv_output_size(h, kh, stride, pad), transpose_conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"transpose_conv2d: kernel {list(w.dims)} does not fit input {list(x.dims)}")
    wmat = w.data.reshape(i_ch, -1)
    xrows = _nchw_to_channel_rows(x.data)
    out = _col2im((wmat.T @ xrows).reshape(o, kh, kw, n, h, wd), n, ho, wo, stride, pad)

    def back(g):
        gcols = _im2col(g, kh, kw, stride, pad, h, wd)
        gx = _rows_to_nchw(gcols @ wmat.T, n, h, wd) if x.tracked else None
        gw = (xrows @ gcols).reshape(w.dims) if w.tracked else None
        return gx, gw

    return _finish("transpose_conv2d", out, (x, w), back)


# ---------------------------------------------------------------- dispatch

OPS: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul, "conv2d": conv2d,
    "transpose_conv2d": transpose_conv2d, "relu": relu, "leaky_relu": leaky_relu,
    "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "reshape": reshape,
    "concat": concat, "sum": sum_, "mean": mean, "broadcast": broadcast,
    "softplus": softplus, "neg": neg, "clip": clip,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(.) through the tape.

    Gradients of leaves with ``requires_grad`` are accumulated into ``.grad``
    and also returned keyed by tensor.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got dims {list(root.dims)}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    if root.node is None:
        order = []
    else:
        seen = {root.node.id: root}
        stack = [root]
        while stack:
            t = stack.pop()
            for inp in t.node.inputs:
                if inp.node is not None and inp.node.id not in seen:
                    seen[inp.node.id] = inp
                    stack.append(inp)
        order = [seen[k] for k in sorted(seen, reverse=True)]

    leaves: dict[int, Tensor] = {}
    if root.requires_grad:
        leaves[id(root)] = root
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.tracked:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.dims)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.node is None:
                leaves[key] = inp

    out: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out
