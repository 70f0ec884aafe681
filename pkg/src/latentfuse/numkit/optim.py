"""First-order optimizers operating in place on :class:`Tensor` parameters."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class Optimizer:
    kind = "base"

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def _grads(self, grads):
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        if self.weight_decay:
            grads = [g + self.weight_decay * p.data for g, p in zip(grads, self.params)]
        return grads

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "weight_decay": self.weight_decay, "t": self.t}


class SGD(Optimizer):
    """Plain gradient descent: ``p <- p - lr * g``."""

    kind = "sgd"

    def step(self, grads=None) -> None:
        for p, g in zip(self.params, self._grads(grads)):
            p.data -= self.lr * g
        self.t += 1


class Adam(Optimizer):
    """Adam with bias correction and optional L2 weight decay folded into the gradient."""

    kind = "adam"

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        super().__init__(params, lr, weight_decay)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, (p, g) in enumerate(zip(self.params, self._grads(grads))):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            p.data -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def state_dict(self) -> dict:
        state = super().state_dict()
        state.update(beta1=self.beta1, beta2=self.beta2, eps=self.eps, m=self.m, v=self.v)
        return state

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]


def make_optimizer(kind: str, params, lr: float, **kwargs) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr, weight_decay=kwargs.get("weight_decay", 0.0))
    if kind == "adam":
        return Adam(params, lr, **kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale grads so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(p.grad**2)) for p in params if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def opt_step(state: Optimizer, params: Sequence[Tensor] | None = None, grads=None) -> None:
    """Functional form of ``state.step``; ``params`` must match the optimizer's own."""
    if params is not None and [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("params do not match optimizer state")
    state.step(grads)
