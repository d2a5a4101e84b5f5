"""Parameter containers and small layers built on the tensor engine."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from dbf.autodiff import Tensor, affine, gelu


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Independent RNG stream for one named component.

    Keying initialization by name keeps every other parameter's initial value
    unchanged when a component is added or removed from a model.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, dict):
        for k in sorted(value):
            yield from _walk(value[k], f"{name}.{k}")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Module:
    """Tree of named parameters, discovered from instance attributes."""

    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = np.ascontiguousarray(arr.copy())


class Linear(Module):
    """Affine map; weights default to N(0, 1/d_in), bias to zero (or no bias)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 std: float | None = None, bias: bool = True):
        if std is None:
            std = 1.0 / np.sqrt(d_in)
        self.weight = parameter(rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)


class MLP(Module):
    """Two linear maps with a GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 std: float | None = None):
        self.fc1 = Linear(d_in, d_hidden, rng, std)
        self.fc2 = Linear(d_hidden, d_out, rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))
