"""Parameter containers: a tiny Module base, Linear and MLP."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import ndtensor as nt
from .ndtensor import Tensor


class Module:
    """Walks attributes in definition order to find parameters and submodules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


def param(array: np.ndarray) -> Tensor:
    return Tensor(array, requires_grad=True)


class Linear(Module):
    """``y = x W + b`` applied to the last axis of a tensor of any rank.

    Weights are uniform with variance ``gain**2 / fan_in`` (``gain = sqrt(2)``
    in front of a relu keeps activation scale constant with depth); ``scale``
    overrides the bound directly.
    """

    def __init__(
        self,
        fan_in: int,
        fan_out: int,
        rng: np.random.Generator,
        scale: float | None = None,
        gain: float = 1.0,
    ):
        bound = gain * np.sqrt(3.0 / fan_in) if scale is None else scale
        self.weight = param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.bias = param(np.zeros((1, fan_out)))
        self.fan_in = fan_in
        self.fan_out = fan_out

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else nt.reshape(x, (-1, x.shape[-1]))
        y = nt.add(nt.matmul(flat, self.weight), self.bias)
        if x.ndim != 2:
            y = nt.reshape(y, lead + (self.fan_out,))
        return y


RELU_GAIN = float(np.sqrt(2.0))


class ConcatLinear(Module):
    """``[x_1, ..., x_k] W + b`` computed as ``sum_i x_i W_i + b``.

    Each block ``W_i`` is initialised with its own fan-in so a narrow input
    (e.g. 3 coordinates) is not drowned out by a wide one (a shape code).
    Inputs may differ in row count when one of them is a single broadcast row.
    """

    def __init__(self, fan_ins: Sequence[int], fan_out: int, rng: np.random.Generator, gain: float = 1.0):
        self.weights = [param(rng.uniform(-1, 1, size=(f, fan_out)) * gain * np.sqrt(3.0 / f)) for f in fan_ins]
        self.bias = param(np.zeros((1, fan_out)))
        self.fan_out = fan_out

    def __call__(self, parts: Sequence[Tensor]) -> Tensor:
        if len(parts) != len(self.weights):
            raise ValueError(f"expected {len(self.weights)} inputs, got {len(parts)}")
        out = self.bias
        for x, w in zip(parts, self.weights):
            out = nt.add(out, nt.matmul(x, w))
        return out


class MLP(Module):
    """Shared per-point MLP: Linear layers with relu between (not after the last)."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, last_gain: float = 1.0):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        n = len(widths) - 1
        self.layers = [
            Linear(widths[i], widths[i + 1], rng, gain=last_gain)
            if i == n - 1
            else Linear(widths[i], widths[i + 1], rng, gain=RELU_GAIN)
            for i in range(n)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nt.relu(x)
        return x

    @property
    def last(self) -> Linear:
        return self.layers[-1]
