"""Parameters, modules and the layers used by the restoration model."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Minimal module container.

    Parameters and sub-modules are discovered from instance attributes
    (including lists of modules), in attribute definition order, so names are
    stable across runs.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.shape != np.shape(value):
                raise ValueError(f"{name}: expected shape {p.shape}, got {np.shape(value)}")
            p.data = np.array(value, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``x @ W + b`` over the last axis."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(_uniform(rng, bound, (n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv1d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
    ):
        # He-uniform: keeps activation variance through GELU stacks
        bound = math.sqrt(6.0 / (c_in * kernel))
        self.weight = Parameter(_uniform(rng, bound, (c_out, c_in, kernel)))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.eps) * self.gain + self.shift


class MultiHeadSelfAttention(Module):
    """Pre-norm self-attention block with a residual connection and MLP."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2):
        if dim % heads:
            raise ValueError(f"embedding dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        # a key bias only shifts each query's scores by a constant, which softmax ignores
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        a = ops.attention(self.q(h), self.k(h), self.v(h), self.heads)
        x = x + self.proj(a)
        return x + self.fc2(ops.gelu(self.fc1(self.norm2(x))))


class ResBlock1d(Module):
    """Two same-length convolutions with an identity shortcut."""

    def __init__(self, channels: int, rng: np.random.Generator, kernel: int = 3):
        self.conv1 = Conv1d(channels, channels, kernel, rng)
        self.conv2 = Conv1d(channels, channels, kernel, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2(ops.gelu(self.conv1(x)))
        return ops.gelu(x + h)


class MLP(Module):
    def __init__(self, n_in: int, hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))
