"""Minimal parameter containers on top of the tape."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, layer_norm, linear, mul, parameter


class Module:
    """Collects ``Tensor`` parameters from attributes, lists and sub-modules."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for k, v in enumerate(value):
            yield from _walk(v, f"{name}.{k}")
    elif isinstance(value, dict):
        for k in sorted(value):
            yield from _walk(value[k], f"{name}.{k}")


class Linear(Module):
    """x W + b. Weights are N(0, gain^2 / d_in); biases U(-1/sqrt(d_in), 1/sqrt(d_in)).

    Nonzero biases matter here: with zero bias, ReLU(w . s) over sign
    vectors s has no odd Fourier terms above degree one, so an odd
    product of signs gets no gradient at all from a fresh layer.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, gain: float = 1.0):
        self.weight = parameter(rng.normal(0.0, gain / np.sqrt(d_in), size=(d_in, d_out)))
        bound = 1.0 / np.sqrt(d_in)
        self.bias = parameter(rng.uniform(-bound, bound, size=d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    """Per-position normalization over the channel axis with a learned gain and shift."""

    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(d))
        self.shift = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return add(mul(layer_norm(x, self.eps), self.gain), self.shift)
