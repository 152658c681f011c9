"""First-order optimizers over named parameter dicts."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import ShapeError, Tensor


class Optimizer:
    kind = "base"

    def __init__(self, params: Mapping[str, Tensor], lr: float):
        self.params = dict(params)
        self.lr = float(lr)
        self.step_count = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, grads: Mapping[str, np.ndarray] | None = None):
        """Apply one update. ``grads`` defaults to each parameter's ``.grad``.

        Parameters without a gradient are left untouched."""
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        for name, g in grads.items():
            p = self.params[name]
            if g.shape != p.dims:
                raise ShapeError(f"{self.kind} step: gradient dims {list(g.shape)} "
                                 f"do not match parameter {name} dims {list(p.dims)}")
        self.step_count += 1
        for name, g in grads.items():
            self._update(name, self.params[name], g)

    def _update(self, name, p, g):
        raise NotImplementedError

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray], step_count: int):
        self.step_count = step_count


class SGD(Optimizer):
    kind = "sgd"

    def _update(self, name, p, g):
        p.data = (p.data - self.lr * g).astype(p.data.dtype)


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def _update(self, name, p, g):
        b1, b2 = self.beta1, self.beta2
        m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
        v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** self.step_count)
        v_hat = v / (1 - b2 ** self.step_count)
        p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)).astype(p.data.dtype)

    def state_tensors(self):
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors, step_count):
        super().load_state_tensors(tensors, step_count)
        for k in self.params:
            self.m[k] = np.array(tensors[f"adam.m.{k}"], dtype=np.float32)
            self.v[k] = np.array(tensors[f"adam.v.{k}"], dtype=np.float32)


def optimizer_step(opt: Optimizer, grads: Mapping[str, np.ndarray] | None = None):
    opt.step(grads)
    return opt.params
