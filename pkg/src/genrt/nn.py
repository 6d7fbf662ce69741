"""Minimal layer containers shared by the network and the flow conditioners."""

from __future__ import annotations

import numpy as np

from .diffcore import Tensor, matmul, parameter, relu, tanh

ACTIVATIONS = {"relu": relu, "tanh": tanh}


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "linear", zero: bool = False):
        bound = 1.0 / np.sqrt(n_in)
        if zero:
            w = np.zeros((n_in, n_out))
            b = np.zeros(n_out)
        else:
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
        self.weight = parameter(w, name=f"{name}.weight")
        self.bias = parameter(b, name=f"{name}.bias")

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MLP:
    """Stack of linear layers with an activation between consecutive layers."""

    def __init__(self, sizes, rng: np.random.Generator, activation: str = "relu",
                 name: str = "mlp", zero_last: bool = False):
        self.sizes = list(sizes)
        self.activation = activation
        self.layers = [
            Linear(a, b, rng, name=f"{name}.{i}", zero=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]
