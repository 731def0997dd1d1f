"""Partial cloud -> global shape code.

Three set-abstraction levels (fps centres, k-NN grouping, shared MLP, max
pool) with a local vector-attention block after each non-global level, then a
linear projection of the pooled feature.
"""

from __future__ import annotations

import numpy as np

from . import geom
from . import ndtensor as nt
from .config import EncoderConfig
from .errors import ContractError
from .ndtensor import Tensor
from .nn import MLP, Linear, Module


class LocalAttention(Module):
    """Vector attention over k nearest neighbours with a residual connection.

    ``out_j = x_j + sum_l a_{j,l} * v(x_{n(j,l)})`` where the per-channel
    weights ``a`` are a softmax over neighbours of ``MLP(q(x_j) - key(x_{n(j,l)}))``.
    """

    def __init__(self, width: int, rng: np.random.Generator):
        self.query = Linear(width, width, rng)
        self.key = Linear(width, width, rng)
        self.value = Linear(width, width, rng)
        self.relation = MLP([width, width], rng)

    def __call__(self, cloud, feats: Tensor, k: int, return_attention: bool = False):
        n = feats.shape[0]
        if k > n:
            raise ContractError(f"attention needs k <= N, got k={k}, N={n}")
        nbr = geom.knn(cloud, cloud, k)
        q = self.query(feats)
        key = nt.gather(self.key(feats), nbr)  # N x k x D
        v = nt.gather(self.value(feats), nbr)
        rel = nt.sub(nt.reshape(q, (n, 1, q.shape[1])), key)
        attn = nt.softmax(self.relation(rel), axis=1)
        out = nt.add(feats, nt.sum(nt.mul(attn, v), axis=1))
        if return_attention:
            return out, attn.data
        return out


class SetAbstraction(Module):
    """Sample centres by fps, group neighbours by k-NN, shared MLP, max pool."""

    def __init__(self, in_features: int, out_features: int, n_centers: int, k: int | None, rng):
        self.mlp = MLP([3 + in_features, out_features], rng)
        self.n_centers = n_centers
        self.k = k

    def __call__(self, cloud: Tensor, feats: Tensor) -> tuple[Tensor, Tensor]:
        n = cloud.shape[0]
        k = n if self.k is None else self.k
        if self.n_centers > n:
            raise ContractError(f"set abstraction needs at least {self.n_centers} points, got {n}")
        if k > n:
            raise ContractError(f"grouping needs k <= N, got k={k}, N={n}")
        if self.n_centers == n:
            # fps over every point is only a reordering; keep input order
            centers_idx = np.arange(n)
        else:
            centers_idx = geom.fps(cloud, self.n_centers, start=0)
        centers = nt.gather(cloud, centers_idx)
        nbr = geom.knn(centers, cloud, k)
        rel = nt.sub(nt.gather(cloud, nbr), nt.reshape(centers, (self.n_centers, 1, 3)))
        grouped = nt.concat([rel, nt.gather(feats, nbr)], axis=2)
        pooled = nt.max(self.mlp(grouped), axis=1)
        return centers, pooled


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Lexicographic (x, y, z) order; makes sampling independent of input order."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, code_width: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        levels = []
        in_features = 3  # absolute coordinates seed the first level's features
        for n, k, width in zip(cfg.sa_point_counts, cfg.sa_neighbor_counts, cfg.sa_channels):
            levels.append(SetAbstraction(in_features, width, n, k, rng))
            in_features = width
        self.levels = levels
        self.attention = [LocalAttention(w, rng) for w in cfg.sa_channels[:-1]]
        self.project = Linear(cfg.sa_channels[-1], code_width, rng)

    def __call__(self, cloud) -> Tensor:
        return self.encode(cloud)

    def encode(self, cloud) -> Tensor:
        """Shape code (``1 x C``) of a partial cloud; invariant to point order."""
        pts = cloud.data if isinstance(cloud, Tensor) else np.asarray(cloud, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ContractError(f"encoder input must be N x 3, got {pts.shape}")
        if pts.shape[0] < self.cfg.min_points:
            raise ContractError(
                f"encoder needs at least {self.cfg.min_points} input points, got {pts.shape[0]}"
            )
        x = cloud if isinstance(cloud, Tensor) else Tensor(pts)
        x = nt.gather(x, canonical_order(pts))
        feats = x
        for i, level in enumerate(self.levels):
            x, feats = level(x, feats)
            if i < len(self.attention):
                k = min(self.cfg.attention_neighbors, feats.shape[0])
                feats = self.attention[i](x, feats, k)
        return self.project(feats)
