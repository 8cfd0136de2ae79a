"""Parameterised building blocks shared by the heads and the conditioner.

Blocks hold structure only; parameters live in flat ``name -> array`` mappings
so the EMA copy, the optimizer moments and checkpoints all share one naming
scheme. ``init`` returns fresh arrays and ``__call__`` takes the mapping
(arrays or leaf tensors) plus activations.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from fastar_lab.diffcore import ops
from fastar_lab.diffcore.tensor import Tensor

Params = Mapping[str, "Tensor | np.ndarray"]


class Linear:
    """Affine map ``x @ W + b`` over the last axis."""

    def __init__(self, name: str, in_dim: int, out_dim: int, bias: bool = True, zero_init: bool = False):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.bias = bias
        self.zero_init = zero_init

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
        if self.zero_init:
            weight = np.zeros((self.in_dim, self.out_dim), dtype=dtype)
        else:
            limit = math.sqrt(6.0 / (self.in_dim + self.out_dim))
            weight = rng.uniform(-limit, limit, size=(self.in_dim, self.out_dim)).astype(dtype)
        params = {f"{self.name}.weight": weight}
        if self.bias:
            params[f"{self.name}.bias"] = np.zeros(self.out_dim, dtype=dtype)
        return params

    def __call__(self, params: Params, x) -> Tensor:
        y = ops.matmul(x, params[f"{self.name}.weight"])
        if self.bias:
            y = ops.add(y, params[f"{self.name}.bias"])
        return y


def modulate(x, shift, scale) -> Tensor:
    """Adaptive layer-norm modulation ``x * (1 + scale) + shift``."""
    return ops.add(ops.mul(x, ops.add(scale, 1.0)), shift)


def split_last(x, parts: int) -> list[Tensor]:
    width = x.shape[-1] // parts
    return [ops.slice_(x, (Ellipsis, slice(i * width, (i + 1) * width))) for i in range(parts)]


def sinusoidal_embedding(
    values, dim: int, scale: float = 1000.0, max_period: float = 10000.0, dtype=np.float64
) -> np.ndarray:
    """Fixed frequency features of scalars in [0, 1]; returns (B, dim)."""
    values = np.atleast_1d(np.asarray(values, dtype=np.float64)) * scale
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = values[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1).astype(dtype)


class ScalarEmbedder:
    """Sinusoidal features of a scalar followed by a two-layer SiLU MLP."""

    def __init__(self, name: str, freq_dim: int, width: int, zero_init_output: bool = False):
        self.name = name
        self.freq_dim = freq_dim
        self.fc1 = Linear(f"{name}.mlp.0", freq_dim, width)
        self.fc2 = Linear(f"{name}.mlp.2", width, width, zero_init=zero_init_output)

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
        return {**self.fc1.init(rng, dtype), **self.fc2.init(rng, dtype)}

    def __call__(self, params: Params, values) -> Tensor:
        dtype = _dtype_of(params, self.fc1.name)
        features = sinusoidal_embedding(values, self.freq_dim, dtype=dtype)
        return self.fc2(params, ops.silu(self.fc1(params, features)))


class AdaLNResBlock:
    """Residual MLP block whose layer norm is modulated by a conditioning vector.

    The modulation produces shift, scale and gate; with ``zero_init`` the gate
    starts at zero and the block is the identity.
    """

    def __init__(self, name: str, width: int, zero_init: bool = True):
        self.name = name
        self.width = width
        self.fc1 = Linear(f"{name}.mlp.0", width, width)
        self.fc2 = Linear(f"{name}.mlp.2", width, width)
        self.ada = Linear(f"{name}.ada", width, 3 * width, zero_init=zero_init)

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
        return {**self.fc1.init(rng, dtype), **self.fc2.init(rng, dtype), **self.ada.init(rng, dtype)}

    def __call__(self, params: Params, x, y) -> Tensor:
        shift, scale, gate = split_last(self.ada(params, ops.silu(y)), 3)
        h = modulate(ops.layernorm(x), shift, scale)
        h = self.fc2(params, ops.silu(self.fc1(params, h)))
        return ops.add(x, ops.mul(gate, h))


class AdaLNFinalLayer:
    """Modulated layer norm followed by the output projection."""

    def __init__(self, name: str, width: int, out_dim: int, zero_init: bool = True):
        self.name = name
        self.ada = Linear(f"{name}.ada", width, 2 * width, zero_init=zero_init)
        self.linear = Linear(f"{name}.linear", width, out_dim, zero_init=zero_init)

    def init(self, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
        return {**self.ada.init(rng, dtype), **self.linear.init(rng, dtype)}

    def __call__(self, params: Params, x, y) -> Tensor:
        shift, scale = split_last(self.ada(params, ops.silu(y)), 2)
        return self.linear(params, modulate(ops.layernorm(x), shift, scale))


def _dtype_of(params: Params, prefix: str):
    value = params[f"{prefix}.weight"]
    return value.dtype if isinstance(value, (np.ndarray, Tensor)) else np.float64


def param_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.asarray(p).size for p in params.values()))
