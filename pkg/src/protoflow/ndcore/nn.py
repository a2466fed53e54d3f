"""Small layer building blocks used by the flow and solver networks."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from ..exceptions import ShapeError
from . import functional as F
from .tensor import Parameter, Tensor


class Module:
    """Container that discovers :class:`Parameter` attributes and sub-modules.

    Parameter names are given at construction time and must be unique within
    the top-level model; they are the keys used by checkpoints.
    """

    def parameters(self) -> list[Parameter]:
        return list(self._iter_parameters())

    def _iter_parameters(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value
            elif isinstance(value, Module):
                yield from value._iter_parameters()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item._iter_parameters()
                    elif isinstance(item, Parameter):
                        yield item

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()
            p.grad = np.zeros_like(p.data)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    """Affine map ``x @ W + b`` applied over the last axis."""

    def __init__(self, in_features: int, out_features: int, name: str,
                 rng: Optional[np.random.Generator] = None, zero: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        if zero or rng is None:
            w = np.zeros((in_features, out_features))
        else:
            w = glorot(rng, in_features, out_features)
        self.weight = Parameter(w, name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_features), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"{self.weight.name}: expected last dim {self.in_features}, got {x.shape}")
        y = F.matmul(x, self.weight)
        return F.add(y, F.broadcast_to(self.bias, y.shape))


class MLP(Module):
    """Two affine layers with an ELU in between."""

    def __init__(self, in_features: int, hidden: int, out_features: int, name: str,
                 rng: Optional[np.random.Generator] = None, zero_output: bool = False):
        self.hidden = Linear(in_features, hidden, f"{name}.0", rng)
        self.output = Linear(hidden, out_features, f"{name}.1", rng, zero=zero_output)

    def __call__(self, x: Tensor) -> Tensor:
        return self.output(F.elu(self.hidden(x)))
