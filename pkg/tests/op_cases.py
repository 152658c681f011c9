"""Random instances of every op kind, wrapped as scalar functions for gradcheck."""

import numpy as np

from disentlab import tensor as T
from disentlab.tensor import Tensor


def _shape(rng, lo=1, hi=4, max_rank=3):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=rng.integers(1, max_rank + 1)))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, size=shape) * rng.choice([-1, 1], size=shape)
    return Tensor(x)


def case(kind, rng):
    """Return (fn, leaves) with fn() -> scalar Tensor."""
    if kind in ("add", "sub", "mul"):
        a_shape = _shape(rng)
        b_shape = tuple(1 if rng.random() < 0.3 else d for d in a_shape)
        if rng.random() < 0.3:
            b_shape = b_shape[1:] or b_shape
        a, b = Tensor(rng.standard_normal(a_shape)), Tensor(rng.standard_normal(b_shape))
        op = {"add": T.add, "sub": T.sub, "mul": T.mul}[kind]
        w = _weights(rng, op(a, b))
        return (lambda: _probe_fixed(op(a, b), w)), [a, b]
    if kind == "matmul":
        n, k, m = rng.integers(1, 5, size=3)
        a, b = Tensor(rng.standard_normal((n, k))), Tensor(rng.standard_normal((k, m)))
        w = _weights(rng, T.matmul(a, b))
        return (lambda: _probe_fixed(T.matmul(a, b), w)), [a, b]
    if kind == "conv2d":
        n, c, o = (int(v) for v in rng.integers(1, 3, size=3))
        k = int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, wd = (int(v) for v in rng.integers(k, k + 4, size=2))
        x, wt = Tensor(rng.standard_normal((n, c, h, wd))), Tensor(rng.standard_normal((o, c, k, k)))
        w = _weights(rng, T.conv2d(x, wt, stride, pad))
        return (lambda: _probe_fixed(T.conv2d(x, wt, stride, pad), w)), [x, wt]
    if kind == "transpose_conv2d":
        n, c, o = (int(v) for v in rng.integers(1, 3, size=3))
        k = int(rng.integers(2, 5))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, (k + 1) // 2))
        h, wd = (int(v) for v in rng.integers(1, 4, size=2))
        x, wt = Tensor(rng.standard_normal((n, c, h, wd))), Tensor(rng.standard_normal((c, o, k, k)))
        w = _weights(rng, T.transpose_conv2d(x, wt, stride, pad))
        return (lambda: _probe_fixed(T.transpose_conv2d(x, wt, stride, pad), w)), [x, wt]
    if kind in ("relu", "leaky_relu", "sigmoid", "tanh", "neg", "softplus"):
        x = _away_from_zero(rng, _shape(rng))
        op = {"relu": T.relu, "leaky_relu": T.leaky_relu, "sigmoid": T.sigmoid, "tanh": T.tanh,
              "neg": T.neg, "softplus": T.softplus}[kind]
        w = _weights(rng, op(x))
        return (lambda: _probe_fixed(op(x), w)), [x]
    if kind == "exp":
        x = Tensor(rng.uniform(-2, 2, size=_shape(rng)))
        w = _weights(rng, T.exp(x))
        return (lambda: _probe_fixed(T.exp(x), w)), [x]
    if kind == "log":
        x = Tensor(rng.uniform(0.5, 3, size=_shape(rng)))
        w = _weights(rng, T.log(x))
        return (lambda: _probe_fixed(T.log(x), w)), [x]
    if kind == "clip":
        x = Tensor(rng.choice([-3.0, -0.5, 0.3, 0.7, 2.5], size=_shape(rng)) + rng.uniform(-0.05, 0.05))
        w = _weights(rng, T.clip(x, -1, 1))
        return (lambda: _probe_fixed(T.clip(x, -1, 1), w)), [x]
    if kind == "reshape":
        shape = _shape(rng)
        x = Tensor(rng.standard_normal(shape))
        new = (int(np.prod(shape)),) if rng.random() < 0.5 else tuple(reversed(shape))
        w = _weights(rng, T.reshape(x, new))
        return (lambda: _probe_fixed(T.reshape(x, new), w)), [x]
    if kind == "concat":
        shape = list(_shape(rng))
        axis = int(rng.integers(len(shape)))
        parts = []
        for _ in range(int(rng.integers(2, 4))):
            s = list(shape)
            s[axis] = int(rng.integers(1, 4))
            parts.append(Tensor(rng.standard_normal(s)))
        w = _weights(rng, T.concat(parts, axis))
        return (lambda: _probe_fixed(T.concat(parts, axis), w)), parts
    if kind in ("sum", "mean"):
        shape = _shape(rng)
        x = Tensor(rng.standard_normal(shape))
        axis = None if rng.random() < 0.3 else int(rng.integers(len(shape)))
        keep = bool(rng.random() < 0.5)
        op = T.sum_ if kind == "sum" else T.mean
        w = _weights(rng, op(x, axis, keep))
        return (lambda: _probe_fixed(op(x, axis, keep), w)), [x]
    if kind == "broadcast":
        shape = _shape(rng)
        src = tuple(1 if rng.random() < 0.5 else d for d in shape)
        x = Tensor(rng.standard_normal(src))
        target = (int(rng.integers(1, 3)),) + shape
        w = _weights(rng, T.broadcast(x, target))
        return (lambda: _probe_fixed(T.broadcast(x, target), w)), [x]
    raise KeyError(kind)


def _weights(rng, out):
    return rng.standard_normal(out.dims)


def _probe_fixed(out, w):
    """Fixed random projection so every output element reaches the scalar."""
    return T.sum_(out * Tensor(w))


OP_KINDS = ("add", "sub", "mul", "matmul", "conv2d", "transpose_conv2d", "relu", "leaky_relu",
            "sigmoid", "tanh", "exp", "log", "reshape", "concat", "sum", "mean", "broadcast",
            "softplus", "neg", "clip")
