"""Snowflake point deconvolution (SPD) and the skip-transformer.

Row layout convention: the ``r`` children of parent ``j`` occupy rows
``j*r .. j*r + r - 1``, both for features and for coordinates, so parent and
child correspondence is positional at every level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom
from . import ndtensor as nt
from .config import SKIP_MODES
from .errors import ContractError, ShapeError
from .ndtensor import Tensor
from .nn import MLP, RELU_GAIN, ConcatLinear, Linear, Module, param


def pointwise_split(h: Tensor, kernels: Tensor, r: int) -> Tensor:
    """Expand each parent feature into ``r`` child features.

    ``kernels`` has shape ``(C_in, r, C_out)``; slice ``m`` is the kernel for
    logit ``m``.  Child ``k`` of parent ``j`` is ``sum_m h[j, m] * kernels[m, k]``.
    The sum runs in ascending ``m`` so results are reproducible to the bit.
    """
    if h.ndim != 2:
        raise ShapeError(f"pointwise_split expects N x C features, got {h.shape}")
    if kernels.ndim != 3 or kernels.shape[0] != h.shape[1] or kernels.shape[1] != r:
        raise ShapeError(
            f"kernels of shape {kernels.shape} do not match features {h.shape} with r={r}"
        )
    n, c_in = h.shape
    c_out = kernels.shape[2]
    hd = h.data
    kd = kernels.data.reshape(c_in, r * c_out)
    acc = np.zeros((n, r * c_out))
    for m in range(c_in):
        acc += hd[:, m : m + 1] * kd[m]

    def backward(g):
        g2 = g.reshape(n, r * c_out)
        gh = g2 @ kd.T if h.requires_grad else None
        gk = (hd.T @ g2).reshape(c_in, r, c_out) if kernels.requires_grad else None
        return gh, gk

    return Tensor.from_op(acc.reshape(n * r, c_out), (h, kernels), backward)


class SkipTransformer(Module):
    """Attention between per-point features (queries) and the previous layer's
    displacement features (keys), restricted to k-NN neighbourhoods.

    Modes: ``full``; ``self_att`` (keys are the queries, values still see the
    previous features); ``no_att`` (unweighted mean of neighbour values);
    ``no_connect`` (previous features ignored entirely).
    """

    def __init__(self, width: int, k: int, mode: str, rng: np.random.Generator):
        if mode not in SKIP_MODES:
            raise ContractError(f"unknown skip mode {mode!r}")
        self.k = k
        self.mode = mode
        self.value_mlp = MLP([2 * width, width, width], rng)
        if mode != "no_att":
            self.proj = Linear(width, width, rng)  # shared by query and key
            self.attn_mlp = MLP([width, width, width], rng)

    def __call__(self, q: Tensor, k_prev: Tensor | None, cloud, return_attention: bool = False):
        n = q.shape[0]
        pts = geom._coords(cloud)
        if pts.shape[0] != n:
            raise ContractError(f"cloud has {pts.shape[0]} points but q has {n} rows")
        if k_prev is not None and k_prev.shape != q.shape:
            raise ContractError(f"k_prev shape {k_prev.shape} does not match q {q.shape}")
        if self.k > n:
            raise ContractError(f"skip-transformer needs k <= N, got k={self.k}, N={n}")
        if self.mode == "no_connect":
            k_prev = None
        key = q if k_prev is None else k_prev

        v = self.value_mlp(nt.concat([q, key], axis=1))
        nbr = geom.knn(pts, pts, self.k)
        v_nbr = nt.gather(v, nbr)  # N x k x C

        if self.mode == "no_att":
            h = nt.add(v, nt.mean(v_nbr, axis=1))
            return (h, None) if return_attention else h

        attn_key = q if self.mode == "self_att" else key
        qp = self.proj(q)
        kp = nt.gather(qp if attn_key is q else self.proj(attn_key), nbr)
        rel = nt.sub(nt.reshape(qp, (n, 1, qp.shape[1])), kp)
        attn = nt.softmax(self.attn_mlp(rel), axis=1)
        h = nt.add(v, nt.sum(nt.mul(attn, v_nbr), axis=1))
        return (h, attn.data) if return_attention else h


@dataclass
class SpdOutput:
    cloud: Tensor
    disp_feat: Tensor
    displacement: Tensor
    attention: np.ndarray | None


class SPD(Module):
    """One snowflake point deconvolution layer with up-sampling factor ``r``."""

    def __init__(
        self,
        code_width: int,
        width: int,
        r: int,
        k: int,
        mode: str,
        rng: np.random.Generator,
        disp_init_scale: float = 1.0,
    ):
        self.r = r
        # two-layer point MLP over [coords, shape code]
        self.point_in = ConcatLinear([3, code_width], width, rng, gain=RELU_GAIN)
        self.point_out = Linear(width, width, rng)
        self.skip = SkipTransformer(width, k, mode, rng)
        bound = 1.0 / np.sqrt(width)
        self.kernels = param(rng.uniform(-bound, bound, size=(width, r, width)))
        self.disp_feat_mlp = MLP([2 * width, width, width], rng)
        self.disp_mlp = MLP([width, width, 3], rng, last_gain=disp_init_scale)

    def __call__(self, cloud: Tensor, k_prev: Tensor | None, f: Tensor) -> SpdOutput:
        q = self.point_out(nt.relu(self.point_in([cloud, f])))
        h, attn = self.skip(q, k_prev, cloud, return_attention=True)
        variations = pointwise_split(h, self.kernels, self.r)
        context = nt.repeat(h, self.r, axis=0)
        disp_feat = self.disp_feat_mlp(nt.concat([variations, context], axis=1))
        delta = nt.tanh(self.disp_mlp(disp_feat))
        child = nt.add(nt.repeat(cloud, self.r, axis=0), delta)
        return SpdOutput(child, disp_feat, delta, attn)


class Generator(Module):
    """Chain of SPD layers; each layer's displacement features feed the next."""

    def __init__(self, code_width, width, factors, k, mode, rng, disp_init_scale=1.0):
        self.layers = [
            SPD(code_width, width, r, k, mode, rng, disp_init_scale=disp_init_scale)
            for r in factors
        ]

    def __call__(self, p0: Tensor, f: Tensor) -> list[SpdOutput]:
        outputs = []
        cloud, k_prev = p0, None
        for layer in self.layers:
            out = layer(cloud, k_prev, f)
            outputs.append(out)
            cloud, k_prev = out.cloud, out.disp_feat
        return outputs
