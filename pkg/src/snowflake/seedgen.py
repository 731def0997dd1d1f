"""Seed generation: shape code -> coarse cloud P_c -> seed cloud P_0."""

from __future__ import annotations

import numpy as np

from . import geom
from . import ndtensor as nt
from .errors import ContractError
from .ndtensor import Tensor
from .nn import MLP, RELU_GAIN, ConcatLinear, Linear, Module, param
from .spd import pointwise_split


class SeedGenerator(Module):
    def __init__(self, code_width: int, width: int, n_coarse: int, rng: np.random.Generator):
        self.n_coarse = n_coarse
        self.width = width
        self.parent = Linear(code_width, width, rng)
        bound = 1.0 / np.sqrt(width)
        self.kernels = param(rng.uniform(-bound, bound, size=(width, n_coarse, width)))
        # three-layer MLP over [point feature, shape code] -> xyz
        self.coord_in = ConcatLinear([width, code_width], width, rng, gain=RELU_GAIN)
        self.coord_out = MLP([width, width, 3], rng)

    def generate_coarse(self, f: Tensor) -> tuple[Tensor, Tensor]:
        """Split one parent feature derived from ``f`` into ``n_coarse`` point features
        and decode each (together with ``f``) to a coordinate in [-1, 1]^3."""
        if f.ndim != 2 or f.shape[0] != 1:
            raise ContractError(f"shape code must be 1 x C, got {f.shape}")
        feats = pointwise_split(self.parent(f), self.kernels, self.n_coarse)
        coarse = nt.tanh(self.coord_out(nt.relu(self.coord_in([feats, f]))))
        return coarse, feats

    __call__ = generate_coarse


def merge_and_sample(p_c: Tensor, partial, n_seed: int) -> Tensor:
    """Concatenate coarse and input clouds, then fps (start 0) down to ``n_seed`` points.

    Rows come from the union by index; coarse rows stay differentiable.
    """
    partial = partial if isinstance(partial, Tensor) else Tensor(partial)
    total = p_c.shape[0] + partial.shape[0]
    if total < n_seed:
        raise ContractError(
            f"merged cloud has {total} points, fewer than the {n_seed} seeds requested"
        )
    merged = nt.concat([p_c, partial], axis=0)
    idx = geom.fps(merged.data, n_seed, start=0)
    return nt.gather(merged, idx)
