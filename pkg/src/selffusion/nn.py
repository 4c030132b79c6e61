"""Parameterized layers built on the tape primitives.

Modules own :class:`~selffusion.autodiff.Parameter` objects whose names are
full dotted paths fixed at construction. A forward call materializes each
parameter on the tape of its input tensor.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    layer_norm,
    matmul,
    permute,
    relu,
    reshape,
    scale,
    softmax_rows,
)
from .errors import ConfigError


class Module:
    """Container with recursive, insertion-ordered parameter discovery."""

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for value in vars(self).values():
            yield from _walk(value)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(value) -> Iterator[tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield value.name, value
    elif isinstance(value, Module):
        yield from value.named_parameters()
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _walk(item)
    elif isinstance(value, dict):
        for key in sorted(value):
            yield from _walk(value[key])


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, name: str, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(f"{name}.weight", uniform_fan_in(rng, in_features, (in_features, out_features)),
                                "uniform_fan_in")
        self.bias = (Parameter(f"{name}.bias", uniform_fan_in(rng, in_features, (out_features,)), "uniform_fan_in")
                     if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, x.tape.variable(self.weight))
        if self.bias is not None:
            out = add(out, x.tape.variable(self.bias))
        return out

    def zero_(self) -> "Linear":
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0
        return self


class LayerNorm(Module):
    def __init__(self, name: str, width: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(width), "ones")
        self.beta = Parameter(f"{name}.beta", np.zeros(width), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        tape = x.tape
        return layer_norm(x, tape.variable(self.gamma), tape.variable(self.beta), self.eps)


class MLP(Module):
    """Pointwise stack of linear maps with ReLU between them (none after the last)."""

    def __init__(self, name: str, widths, rng: np.random.Generator, final_relu: bool = False):
        widths = list(widths)
        if len(widths) < 2:
            raise ConfigError(f"an MLP needs at least input and output widths, got {widths}")
        self.final_relu = final_relu
        self.layers = [Linear(f"{name}.{i}", a, b, rng) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = relu(x)
        return x

    @property
    def last(self) -> Linear:
        return self.layers[-1]


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query and key/value inputs.

    Inputs are batched ``(B, M, C)``. An optional additive ``bias`` of shape
    ``(B, heads, Mq, Mk)`` is added to the logits before the softmax.
    """

    def __init__(self, name: str, width: int, heads: int, rng: np.random.Generator):
        if heads < 1 or width % heads:
            raise ConfigError(f"head count {heads} must divide width {width}")
        self.width = width
        self.heads = heads
        self.q = Linear(f"{name}.q", width, width, rng)
        self.k = Linear(f"{name}.k", width, width, rng)
        self.v = Linear(f"{name}.v", width, width, rng)
        self.out = Linear(f"{name}.out", width, width, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, m, _ = x.shape
        return permute(reshape(x, (b, m, self.heads, self.width // self.heads)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, context: Tensor, bias: Tensor | None = None) -> Tensor:
        if query.shape[-1] != self.width or context.shape[-1] != self.width:
            raise ConfigError(f"attention width {self.width} does not match inputs {query.shape}, {context.shape}")
        b, mq, _ = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        logits = scale(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.width // self.heads))
        if bias is not None:
            logits = add(logits, bias)
        weights = softmax_rows(logits)
        self.last_weights = weights.data
        mixed = permute(matmul(weights, v), (0, 2, 1, 3))
        return self.out(reshape(mixed, (b, mq, self.width)))


class AttentionLayer(Module):
    """Post-norm residual attention: ``layer_norm(x + attention(x, context))``."""

    def __init__(self, name: str, width: int, heads: int, rng: np.random.Generator):
        self.attention = MultiHeadAttention(f"{name}.attn", width, heads, rng)
        self.norm = LayerNorm(f"{name}.norm", width)

    def __call__(self, x: Tensor, context: Tensor, bias: Tensor | None = None) -> Tensor:
        return self.norm(add(x, self.attention(x, context, bias)))

    @property
    def last_weights(self) -> np.ndarray | None:
        return self.attention.last_weights
