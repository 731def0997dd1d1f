"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ndtensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-6, entries=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. selected flat entries of ``t``."""
    return _probe(fn, t, h, entries)[0]


def _probe(fn, t, h, entries):
    """Central differences plus a mask of entries whose one-sided differences agree."""
    flat = t.data.reshape(-1)
    entries = range(flat.size) if entries is None else entries
    f0 = fn().item()
    central = np.empty(len(entries))
    smooth = np.ones(len(entries), dtype=bool)
    for i, j in enumerate(entries):
        orig = flat[j]
        flat[j] = orig + h
        fp = fn().item()
        flat[j] = orig - h
        fm = fn().item()
        flat[j] = orig
        central[i] = (fp - fm) / (2 * h)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        # a kink (relu, neighbour swap) inside [x - h, x + h] makes the two sides disagree
        smooth[i] = abs(fwd - bwd) <= KINK_TOL * max(abs(fwd), abs(bwd)) + 1e-9 * max(abs(f0), 1.0)
    return central, smooth


KINK_TOL = 1e-3


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """``|a - b| / max(|a|, |b|)`` in the 2-norm, with a floor for all-zero gradients."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(num / den)


@dataclass
class GradCheckResult:
    rel_error: float
    probed: int
    skipped: int

    @property
    def skipped_fraction(self) -> float:
        return self.skipped / max(self.probed, 1)


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare backprop against central differences over the probed entries of ``tensors``.

    The error is the norm-wise relative error of the concatenated gradient
    vector.  Entries that straddle a non-differentiable point (one-sided
    differences disagree) are excluded and counted in ``skipped``.
    ``max_entries`` limits the entries probed per tensor, chosen by ``rng``.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic, numeric = [], []
    probed = skipped = 0
    for t in tensors:
        ga = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        n = t.size
        if max_entries is not None and n > max_entries:
            entries = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            entries = np.arange(n)
        num, smooth = _probe(fn, t, h, entries)
        probed += len(entries)
        skipped += int((~smooth).sum())
        analytic.append(ga.reshape(-1)[entries][smooth])
        numeric.append(num[smooth])
    err = relative_error(np.concatenate(analytic), np.concatenate(numeric))
    return GradCheckResult(err, probed, skipped)


def micro_model_gradcheck(
    seed: int = 0, n_params: int = 6, entries: int = 4, skip_mode: str = "full"
) -> GradCheckResult:
    """End-to-end check on a tiny model: d CD_L2(P_n, gt) / d(weights).

    Probes ``entries`` coordinates of ``n_params`` randomly chosen weight tensors.
    """
    from . import geom
    from .config import micro_model_config
    from .model import SnowflakeNet

    rng = np.random.default_rng(seed)
    model = SnowflakeNet(micro_model_config(skip_mode=skip_mode), seed=seed)
    partial = rng.uniform(-0.5, 0.5, size=(32, 3))
    gt = rng.uniform(-0.5, 0.5, size=(model.cfg.output_points, 3))

    def loss():
        return geom.chamfer_l2(model(partial).final, gt)

    named = list(model.named_parameters())
    pick = rng.choice(len(named), size=min(n_params, len(named)), replace=False)
    return check_gradients(loss, [named[i][1] for i in pick], max_entries=entries, rng=rng)
