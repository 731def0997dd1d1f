"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import geom
from .config import SKIP_MODES, DataConfig, LossWeights, ModelConfig, RunConfig, TrainConfig
from .pointio import DatasetEntry, generate_dataset, load_dataset, make_entry, split_dataset
from .training import TrainState, evaluate, load_checkpoint, save_checkpoint, train

# -- single-shape overfit -----------------------------------------------------------


@dataclass(frozen=True)
class OverfitSetup:
    category: str = "sphere"
    shape_seed: int = 123
    steps: int = 2000
    lr: float = 2e-3
    lr_decay: str = "linear"
    metric: str = "l1"
    lambda_preservation: float = 1.0
    model_seed: int = 0

    def run_config(self) -> RunConfig:
        return RunConfig(
            model=ModelConfig(),
            loss=LossWeights(lambda_preservation=self.lambda_preservation, metric=self.metric),
            train=TrainConfig(
                steps=self.steps, batch_size=1, lr=self.lr, lr_decay=self.lr_decay, seed=self.model_seed
            ),
        )


@dataclass
class OverfitResult:
    final_cd_l2: float
    best_cd_l2: float
    seconds: float
    curve: list[tuple[int, float]] = field(default_factory=list)


def overfit_single_shape(setup: OverfitSetup = OverfitSetup(), report_every: int = 100, log=None) -> OverfitResult:
    """Train the desk model on one synthetic shape; track CD_L2(P_n, gt)."""
    cfg = setup.run_config()
    entry = make_entry(setup.category, "0000", setup.shape_seed, cfg.data)
    state = TrainState.fresh(cfg)
    curve = []

    def score() -> float:
        return geom.chamfer_l2(state.model.complete(entry.partial).final.data, entry.gt).item()

    def cb(st, _record):
        if st.step % report_every == 0 or st.step == setup.steps:
            curve.append((st.step, score()))
            if log:
                log(f"step {st.step:5d}  cd_l2 {curve[-1][1]:.6f}  {time.perf_counter() - t0:.0f}s")

    t0 = time.perf_counter()
    train(state, [entry], callback=cb)
    seconds = time.perf_counter() - t0
    final = curve[-1][1] if curve else score()
    return OverfitResult(final, min(v for _, v in curve) if curve else final, seconds, curve)


# -- corpus and ablations -----------------------------------------------------------


@dataclass(frozen=True)
class CorpusSetup:
    steps: int = 20000
    seeds: tuple[int, ...] = (0, 1, 2)
    modes: tuple[str, ...] = SKIP_MODES
    data_seed: int = 2024
    shapes_per_category: int = 50
    batch_size: int = 4
    checkpoint_every: int = 1000

    def run_config(self, mode: str, seed: int) -> RunConfig:
        return RunConfig(
            model=ModelConfig(skip_mode=mode),
            train=TrainConfig(
                steps=self.steps, batch_size=self.batch_size, seed=seed, checkpoint_every=self.checkpoint_every
            ),
            data=DataConfig(shapes_per_category=self.shapes_per_category),
        )


def held_out_cd(model, test: list[DatasetEntry]) -> float:
    return evaluate(model, test, metric="l2")[-1].raw


def corpus_experiment(setup: CorpusSetup, workdir, log=print) -> dict:
    """Train every (mode, seed) pair; resumable through ``workdir``.

    Returns (and writes to ``workdir/results.json``) the untrained and trained
    held-out CD_L2 per run plus the two verdicts.
    """
    workdir = Path(workdir)
    data_dir = workdir / "data"
    base = setup.run_config("full", 0)
    if (data_dir / "manifest.txt").is_file():
        entries = load_dataset(data_dir)
    else:
        entries = generate_dataset(data_dir, base.data, setup.data_seed)
    train_set, test_set = split_dataset(entries, base.train.train_fraction)
    results_path = workdir / "results.json"
    results = json.loads(results_path.read_text()) if results_path.is_file() else {"runs": {}}
    results["setup"] = dataclasses.asdict(setup)

    for seed in setup.seeds:
        for mode in setup.modes:
            key = f"{mode}/seed{seed}"
            run = results["runs"].get(key, {})
            if run.get("steps") == setup.steps:
                continue
            cfg = setup.run_config(mode, seed)
            out = workdir / "runs" / mode / f"seed{seed}"
            latest = _latest_checkpoint(out)
            if latest is None:
                state = TrainState.fresh(cfg)
                run = {"untrained_cd_l2": held_out_cd(state.model, test_set)}
            else:
                state = load_checkpoint(latest, expect=cfg)
            t0 = time.perf_counter()
            log(f"{key}: training from step {state.step} to {setup.steps}")
            train(state, train_set, out_dir=out)
            run.setdefault("untrained_cd_l2", held_out_cd(TrainState.fresh(cfg).model, test_set))
            run.update(
                steps=state.step,
                trained_cd_l2=held_out_cd(state.model, test_set),
                seconds=run.get("seconds", 0.0) + time.perf_counter() - t0,
            )
            results["runs"][key] = run
            log(f"{key}: held-out CD_L2 {run['untrained_cd_l2']:.5f} -> {run['trained_cd_l2']:.5f}")
            results_path.write_text(json.dumps(results, indent=2, sort_keys=True))

    results["verdict"] = corpus_verdict(results, setup)
    results_path.write_text(json.dumps(results, indent=2, sort_keys=True))
    return results


def _latest_checkpoint(out: Path):
    if not out.is_dir():
        return None
    final = out / "ckpt_final"
    if final.is_file():
        return final
    steps = [int(p.name.split("_")[1]) for p in out.glob("ckpt_*") if p.name.split("_")[1].isdigit()]
    return out / f"ckpt_{max(steps)}" if steps else None


def corpus_verdict(results: dict, setup: CorpusSetup) -> dict:
    """Improvement: trained < 50% of untrained for the full model on every seed.
    Ordering: per seed, full <= ablation for at least 2 of the 3 ablations."""
    runs = results["runs"]
    improvement, ordering = {}, {}
    for seed in setup.seeds:
        full = runs.get(f"full/seed{seed}")
        if not full or "trained_cd_l2" not in full:
            continue
        improvement[seed] = full["trained_cd_l2"] < 0.5 * full["untrained_cd_l2"]
        wins = [
            full["trained_cd_l2"] <= runs[f"{m}/seed{seed}"]["trained_cd_l2"]
            for m in setup.modes
            if m != "full" and "trained_cd_l2" in runs.get(f"{m}/seed{seed}", {})
        ]
        ordering[seed] = sum(wins) >= 2 and len(wins) == len(setup.modes) - 1
    complete = len(improvement) == len(setup.seeds) and all(
        "trained_cd_l2" in runs.get(f"{m}/seed{s}", {}) for m in setup.modes for s in setup.seeds
    )
    return {
        "complete": complete,
        "improvement": improvement,
        "ordering": ordering,
        "passed": complete and all(improvement.values()) and all(ordering.values()),
    }


def checkpoint_eval_round_trip(state: TrainState, entries, path) -> tuple[list[float], list[float]]:
    before = [r.raw for r in evaluate(state.model, entries, metric="l2")]
    save_checkpoint(state, path)
    after = [r.raw for r in evaluate(load_checkpoint(path).model, entries, metric="l2")]
    return before, after


__all__ = [
    "OverfitSetup",
    "OverfitResult",
    "overfit_single_shape",
    "CorpusSetup",
    "corpus_experiment",
    "corpus_verdict",
    "held_out_cd",
    "checkpoint_eval_round_trip",
]
