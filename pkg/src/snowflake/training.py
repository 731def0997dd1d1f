"""Losses, Adam, checkpoints, the training loop and evaluation tables."""

from __future__ import annotations

import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import geom
from . import ndtensor as nt
from .config import LossWeights, RunConfig, from_dict, to_dict
from .errors import CheckpointError, ContractError
from .model import Prediction, SnowflakeNet
from .ndtensor import Tensor
from .pointio import DatasetEntry

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "snowflake-checkpoint"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "step,total,cd_c,cd_1,cd_2,cd_3,preservation"


# -- losses ---------------------------------------------------------------------------


def downsample_targets(gt: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """fps-downsample the ground truth to each prediction's point count."""
    gt = geom._coords(gt, "gt")
    if max(sizes) > len(gt):
        raise ContractError(f"ground truth has {len(gt)} points; predictions need up to {max(sizes)}")
    return [gt[geom.fps(gt, n, start=0)] for n in sizes]


def _clouds(preds) -> list[Tensor]:
    return preds.clouds if isinstance(preds, Prediction) else list(preds)


def completion_terms(preds, gt, metric: str = "l2", targets=None) -> list[Tensor]:
    clouds = _clouds(preds)
    if targets is None:
        targets = downsample_targets(gt, [c.shape[0] for c in clouds])
    return [geom.chamfer(c, t, metric) for c, t in zip(clouds, targets)]


def completion_loss(preds, gt, metric: str = "l2", targets=None) -> Tensor:
    """Sum of Chamfer distances of P_c, P_1, ..., P_n to density-matched ground truth."""
    terms = completion_terms(preds, gt, metric, targets)
    total = terms[0]
    for t in terms[1:]:
        total = nt.add(total, t)
    return total


def total_loss(preds, gt, partial, weights: LossWeights = LossWeights(), targets=None) -> Tensor:
    """completion + lambda * partial_matching(partial, final prediction)."""
    loss = completion_loss(preds, gt, weights.metric, targets)
    if weights.lambda_preservation == 0:
        return loss
    final = _clouds(preds)[-1]
    return nt.add(loss, nt.mul(geom.partial_matching(partial, final), weights.lambda_preservation))


# -- optimizer --------------------------------------------------------------------------


class Adam:
    """Adaptive moments with bias correction; state is keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params) -> None:
        named_params = list(named_params)
        for name, p in named_params:
            if p.grad is None:
                raise ContractError(f"missing gradient for weight {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in named_params:
            g = p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- checkpoints ------------------------------------------------------------------------------


@dataclass
class TrainState:
    config: RunConfig
    model: SnowflakeNet
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: RunConfig) -> "TrainState":
        cfg.validate()
        t = cfg.train
        return cls(
            cfg,
            SnowflakeNet(cfg.model, seed=t.seed),
            Adam(t.lr, t.beta1, t.beta2, t.eps),
            np.random.default_rng(t.seed),
        )


def save_checkpoint(state: TrainState, path) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "config": to_dict(state.config),
        "step": state.step,
        "adam_t": state.optimizer.t,
        "rng_state": state.rng.bit_generator.state,
    }
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    for name, p in state.model.named_parameters():
        arrays[f"param/{name}"] = p.data
        if name in state.optimizer.m:
            arrays[f"adam_m/{name}"] = state.optimizer.m[name]
            arrays[f"adam_v/{name}"] = state.optimizer.v[name]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expect: RunConfig | None = None) -> TrainState:
    """Restore a :class:`TrainState`; ``expect`` must match the stored model config."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = np.load(io.BytesIO(fh.read()), allow_pickle=False)
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    except ValueError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None
    if "__meta__" not in data:
        raise CheckpointError(f"{path}: missing metadata")
    meta = json.loads(str(data["__meta__"]))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown format {meta.get('format')!r}")
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {meta.get('format_version')} "
            f"is not supported (expected {CHECKPOINT_VERSION})"
        )
    cfg = from_dict(meta["config"])
    if expect is not None and expect.model != cfg.model:
        raise CheckpointError(
            f"{path}: model config mismatch (checkpoint format version {CHECKPOINT_VERSION}); "
            f"stored {cfg.model} vs requested {expect.model}"
        )
    state = TrainState.fresh(cfg)
    params = {k[len("param/") :]: data[k] for k in data.files if k.startswith("param/")}
    try:
        state.model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    opt = state.optimizer
    opt.t = int(meta["adam_t"])
    for k in data.files:
        if k.startswith("adam_m/"):
            opt.m[k[7:]] = data[k].copy()
        elif k.startswith("adam_v/"):
            opt.v[k[7:]] = data[k].copy()
    state.rng.bit_generator.state = meta["rng_state"]
    state.step = int(meta["step"])
    return state


# -- training ---------------------------------------------------------------------------------


class TargetCache:
    def __init__(self):
        self._cache: dict[tuple, list[np.ndarray]] = {}

    def get(self, entry: DatasetEntry, sizes: Sequence[int]) -> list[np.ndarray]:
        key = (entry.category, entry.id, tuple(sizes))
        if key not in self._cache:
            self._cache[key] = downsample_targets(entry.gt, sizes)
        return self._cache[key]


def train_step(state: TrainState, batch: Sequence[DatasetEntry], cache: TargetCache | None = None) -> dict:
    """One optimizer step on the mean loss of ``batch``; returns averaged loss terms."""
    cache = cache or TargetCache()
    model, weights = state.model, state.config.loss
    model.zero_grad()
    sums = None
    for entry in batch:
        pred = model(entry.partial)
        clouds = pred.clouds
        targets = cache.get(entry, [c.shape[0] for c in clouds])
        terms = [geom.chamfer(c, t, weights.metric) for c, t in zip(clouds, targets)]
        pres = geom.partial_matching(entry.partial, clouds[-1])
        loss = terms[0]
        for t in terms[1:]:
            loss = nt.add(loss, t)
        if weights.lambda_preservation:
            loss = nt.add(loss, nt.mul(pres, weights.lambda_preservation))
        nt.mul(loss, 1.0 / len(batch)).backward()
        vals = np.array([loss.item()] + [t.item() for t in terms] + [pres.item()])
        sums = vals if sums is None else sums + vals
    state.optimizer.lr = state.config.train.lr_at(state.step)
    state.optimizer.step(model.named_parameters())
    state.step += 1
    avg = sums / len(batch)
    record = {"step": state.step, "total": avg[0], "cd": list(avg[1:-1]), "preservation": avg[-1]}
    state.history.append(record)
    return record


def format_metrics(record: dict) -> str:
    vals = [record["total"]] + list(record["cd"]) + [record["preservation"]]
    return ",".join([str(record["step"])] + [repr(float(v)) for v in vals])


def train(
    state: TrainState,
    entries: Sequence[DatasetEntry],
    steps: int | None = None,
    out_dir=None,
    callback: Callable[[TrainState, dict], None] | None = None,
) -> TrainState:
    """Run ``steps`` optimizer steps (default: up to ``config.train.steps`` total).

    With ``out_dir`` the metrics log is appended to ``out_dir/metrics.csv``,
    checkpoints ``ckpt_<step>`` are written every ``checkpoint_every`` steps and
    ``ckpt_final`` at the end.
    """
    if not entries:
        raise ContractError("training needs a non-empty dataset")
    tcfg = state.config.train
    if steps is None:
        steps = max(tcfg.steps - state.step, 0)
    cache = TargetCache()
    log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "metrics.csv"
        new = not log_path.exists()
        try:
            log = open(log_path, "a", encoding="ascii", newline="\n")
        except OSError as exc:
            raise OSError(f"cannot open metrics log {log_path}: {exc}") from exc
        if new:
            log.write(METRICS_HEADER + "\n")
    try:
        batch_size = min(tcfg.batch_size, len(entries))
        for _ in range(steps):
            pick = state.rng.choice(len(entries), size=batch_size, replace=False)
            record = train_step(state, [entries[i] for i in pick], cache)
            if log is not None and state.step % tcfg.log_every == 0:
                log.write(format_metrics(record) + "\n")
                log.flush()
            if out_dir is not None and tcfg.checkpoint_every and state.step % tcfg.checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"ckpt_{state.step}")
            if callback is not None:
                callback(state, record)
        if out_dir is not None:
            save_checkpoint(state, out_dir / "ckpt_final")
    finally:
        if log is not None:
            log.close()
    return state


# -- evaluation -------------------------------------------------------------------------------

SCALE = {"l1": 1e3, "l2": 1e4}


@dataclass
class EvalRow:
    category: str
    cd: float  # scaled: x1e3 for L1, x1e4 for L2
    count: int
    raw: float


def evaluate(
    model: SnowflakeNet | None,
    entries: Sequence[DatasetEntry],
    metric: str = "l1",
    sanity: bool = False,
) -> list[EvalRow]:
    """Per-category mean Chamfer distance of P_n to the full ground truth, plus an average row.

    The average is the uniform mean over shapes.  ``sanity`` scores the ground
    truth against itself instead of running the model.
    """
    if not entries:
        raise ContractError("evaluation needs a non-empty dataset")
    if metric not in SCALE:
        raise ValueError(f"unknown metric {metric!r}")
    per_cat: dict[str, list[float]] = {}
    with nt.no_grad():
        for e in entries:
            pred = e.gt if sanity else model(e.partial).final.data
            per_cat.setdefault(e.category, []).append(geom.chamfer(pred, e.gt, metric).item())
    rows = []
    every = []
    for cat, vals in per_cat.items():
        raw = float(np.mean(vals))
        rows.append(EvalRow(cat, raw * SCALE[metric], len(vals), raw))
        every.extend(vals)
    raw = float(np.mean(every))
    rows.append(EvalRow("average", raw * SCALE[metric], len(every), raw))
    return rows


def format_table(rows: Sequence[EvalRow], metric: str) -> str:
    unit = "x1e3" if metric == "l1" else "x1e4"
    lines = [f"{'category':<18}{'CD-' + metric.upper() + ' ' + unit:>16}{'count':>8}"]
    for r in rows:
        lines.append(f"{r.category:<18}{r.cd:>16.4f}{r.count:>8d}")
    return "\n".join(lines)


def write_table_csv(rows: Sequence[EvalRow], path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("category,cd,count\n")
        for r in rows:
            fh.write(f"{r.category},{r.cd!r},{r.count}\n")
