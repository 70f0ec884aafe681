"""Tiny dense layers built on :mod:`latentfuse.numkit.tensor`."""

from __future__ import annotations

import numpy as np

from .rng import Rng
from .tensor import Tensor, as_tensor, matmul, tanh


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: Rng):
        self.W = Tensor(rng.normal((n_in, n_out), std=1.0 / np.sqrt(n_in)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 1:
            return (matmul(x.reshape(1, -1), self.W) + self.b).reshape(-1)
        return matmul(x, self.W) + self.b

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


class MLP:
    """``Linear -> tanh -> Linear``, optionally with a tanh on the output."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: Rng, out_activation: str = "linear"):
        if out_activation not in ("linear", "tanh"):
            raise ValueError(f"unknown output activation {out_activation!r}")
        self.hidden = Linear(n_in, n_hidden, rng.child(0))
        self.out = Linear(n_hidden, n_out, rng.child(1))
        self.out_activation = out_activation

    def features(self, x) -> Tensor:
        return tanh(self.hidden(x))

    def __call__(self, x) -> Tensor:
        h = self.out(self.features(x))
        return tanh(h) if self.out_activation == "tanh" else h

    def parameters(self) -> list[Tensor]:
        return self.hidden.parameters() + self.out.parameters()
