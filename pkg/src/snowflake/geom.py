"""Point-set kernels: distances, k-NN, farthest point sampling, Chamfer losses.

Clouds are ``N x 3`` arrays or :class:`~snowflake.ndtensor.Tensor` objects.
Index-producing kernels (``knn``, ``fps``) are non-differentiable and work on
raw coordinates; the losses are differentiable ops whose gradients flow
through the nearest pairs.  All nearest-neighbour ties go to the lowest index.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .ndtensor import Tensor


def _coords(cloud, name: str = "cloud") -> np.ndarray:
    arr = cloud.data if isinstance(cloud, Tensor) else np.asarray(cloud, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ContractError(f"{name} must be N x 3, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ContractError(f"{name} is empty")
    return arr


def _as_cloud_tensor(cloud, name: str) -> Tensor:
    _coords(cloud, name)
    return cloud if isinstance(cloud, Tensor) else Tensor(cloud)


def sqdist_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances from explicit differences (exact zeros on coincident points)."""
    out = np.subtract.outer(a[:, 0], b[:, 0]) ** 2
    out += np.subtract.outer(a[:, 1], b[:, 1]) ** 2
    out += np.subtract.outer(a[:, 2], b[:, 2]) ** 2
    return out


def pairwise_sqdist(a, b) -> Tensor:
    """``N x M`` squared Euclidean distances, differentiable in both clouds."""
    ta, tb = _as_cloud_tensor(a, "a"), _as_cloud_tensor(b, "b")
    ad, bd = ta.data, tb.data
    out = sqdist_matrix(ad, bd)

    def backward(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * ad - g @ bd)
        gb = 2.0 * (g.sum(axis=0)[:, None] * bd - g.T @ ad)
        return ga, gb

    return Tensor.from_op(out, (ta, tb), backward)


def knn(query, reference, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest reference points per query row, ascending.

    Ties go to the lower reference index (stable sort on distance).
    """
    q = _coords(query, "query")
    ref = _coords(reference, "reference")
    if k < 1 or k > ref.shape[0]:
        raise ContractError(f"knn needs 1 <= k <= {ref.shape[0]}, got k={k}")
    d = sqdist_matrix(q, ref)
    m = ref.shape[0]
    if k == m or m <= 32:
        return np.argsort(d, axis=1, kind="stable")[:, :k]
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(d, part, axis=1)
    # rows where more than k entries tie at or below the k-th distance need the
    # exact lowest-index tie-break; partition alone does not guarantee it
    kth = vals.max(axis=1, keepdims=True)
    tied = np.flatnonzero((d <= kth).sum(axis=1) > k)
    order = np.lexsort((part, vals), axis=1)
    out = np.take_along_axis(part, order, axis=1)
    if tied.size:
        out[tied] = np.argsort(d[tied], axis=1, kind="stable")[:, :k]
    return out


def fps(cloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; returns ``m`` distinct indices starting at ``start``."""
    pts = _coords(cloud)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ContractError(f"fps needs 1 <= m <= {n}, got m={m}")
    if not 0 <= start < n:
        raise ContractError(f"fps start index {start} out of range for {n} points")
    out = np.empty(m, dtype=np.int64)
    out[0] = start
    diff = pts - pts[start]
    mind = np.einsum("ij,ij->i", diff, diff)
    mind[start] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        out[i] = nxt
        diff = pts - pts[nxt]
        np.minimum(mind, np.einsum("ij,ij->i", diff, diff), out=mind)
        mind[nxt] = -1.0
    return out


def _nearest(d: np.ndarray, axis: int) -> np.ndarray:
    return np.argmin(d, axis=axis)


def _chamfer_op(a, b, squared: bool, both: bool, half: bool) -> Tensor:
    ta, tb = _as_cloud_tensor(a, "a"), _as_cloud_tensor(b, "b")
    ad, bd = ta.data, tb.data
    n, m = ad.shape[0], bd.shape[0]
    d2 = sqdist_matrix(ad, bd)
    nn_ab = _nearest(d2, 1)
    diff_ab = ad - bd[nn_ab]
    d2_ab = d2[np.arange(n), nn_ab]
    if both:
        nn_ba = _nearest(d2, 0)
        diff_ba = ad[nn_ba] - bd
        d2_ba = d2[nn_ba, np.arange(m)]
    scale = 0.5 if half else 1.0

    if squared:
        value = d2_ab.mean() + (d2_ba.mean() if both else 0.0)
        w_ab = np.full(n, 2.0 / n)
        w_ba = np.full(m, 2.0 / m) if both else None
    else:
        dist_ab = np.sqrt(d2_ab)
        value = dist_ab.mean()
        with np.errstate(divide="ignore", invalid="ignore"):
            w_ab = np.where(dist_ab > 0, 1.0 / (n * dist_ab), 0.0)
        if both:
            dist_ba = np.sqrt(d2_ba)
            value = value + dist_ba.mean()
            with np.errstate(divide="ignore", invalid="ignore"):
                w_ba = np.where(dist_ba > 0, 1.0 / (m * dist_ba), 0.0)
    value = scale * value

    def backward(g):
        g = float(g) * scale
        ga = np.zeros_like(ad) if ta.requires_grad else None
        gb = np.zeros_like(bd) if tb.requires_grad else None
        c_ab = g * w_ab[:, None] * diff_ab
        if ga is not None:
            ga += c_ab
        if gb is not None:
            np.add.at(gb, nn_ab, -c_ab)
        if both:
            c_ba = g * w_ba[:, None] * diff_ba
            if ga is not None:
                np.add.at(ga, nn_ba, c_ba)
            if gb is not None:
                gb -= c_ba
        return ga, gb

    return Tensor.from_op(np.asarray(value), (ta, tb), backward)


def chamfer_l1(a, b) -> Tensor:
    """Half the sum of mean nearest-neighbour Euclidean distances in both directions."""
    return _chamfer_op(a, b, squared=False, both=True, half=True)


def chamfer_l2(a, b) -> Tensor:
    """Sum of mean nearest-neighbour squared distances in both directions."""
    return _chamfer_op(a, b, squared=True, both=True, half=False)


def partial_matching(partial, full) -> Tensor:
    """One-directional loss: mean distance from each partial point to its nearest full point."""
    return _chamfer_op(partial, full, squared=False, both=False, half=False)


def chamfer(a, b, metric: str = "l2") -> Tensor:
    if metric == "l1":
        return chamfer_l1(a, b)
    if metric == "l2":
        return chamfer_l2(a, b)
    raise ValueError(f"unknown Chamfer metric {metric!r}; expected 'l1' or 'l2'")
