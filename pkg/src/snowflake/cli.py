"""Command-line entry point: ``snowflake {synth,train,complete,eval}``.

Exit codes: 0 success, 1 runtime error, 2 usage error.  ``SNOWFLAKE_SEED``
supplies the default seed wherever a ``--seed`` flag exists.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import pointio
from .config import RunConfig, load_run_config
from .errors import CheckpointError, ContractError, ParseError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOL = 1e-4
GRADCHECK_TRIALS = 3
LEVEL_SUFFIXES = ("pc", "p0")  # followed by p1 .. pn


class UsageError(Exception):
    pass


def _env_seed() -> int | None:
    raw = os.environ.get("SNOWFLAKE_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SNOWFLAKE_SEED must be an integer, got {raw!r}") from None


def _resolve_seed(flag: int | None, fallback: int) -> int:
    if flag is not None:
        return flag
    env = _env_seed()
    return fallback if env is None else env


def _load_config(path) -> RunConfig:
    cfg = load_run_config(path) if path else RunConfig()
    cfg.validate()
    return cfg


def _dataset(root) -> list[pointio.DatasetEntry]:
    root = Path(root)
    if not (root / "manifest.txt").is_file():
        raise UsageError(f"{root}: no manifest.txt; not a dataset directory")
    entries = pointio.load_dataset(root)
    if not entries:
        raise UsageError(f"{root}: dataset is empty")
    return entries


# -- commands -------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    cfg = _load_config(args.config)
    data_cfg = dataclasses.replace(cfg.data, shapes_per_category=args.count)
    seed = _resolve_seed(args.seed, 0)
    entries = pointio.generate_dataset(args.out, data_cfg, seed)
    print(f"wrote {len(entries)} entries ({args.count} per category, seed {seed}) to {args.out}")
    return EXIT_OK


def run_gradcheck(skip_mode: str, trials: int = GRADCHECK_TRIALS) -> tuple[bool, str]:
    from .gradcheck import micro_model_gradcheck

    worst = 0.0
    for seed in range(trials):
        worst = max(worst, micro_model_gradcheck(seed, skip_mode=skip_mode).rel_error)
    ok = worst < GRADCHECK_TOL
    return ok, f"micro-model gradient check: worst relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})"


def cmd_train(args) -> int:
    from .training import TrainState, load_checkpoint, train

    cfg = _load_config(args.config)
    if args.seed is not None or _env_seed() is not None:
        seed = _resolve_seed(args.seed, cfg.train.seed)
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))
    if args.steps is not None:
        if args.steps < 0:
            raise UsageError("--steps must be >= 0")
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=args.steps))
    entries = _dataset(args.data)
    train_set, _ = pointio.split_dataset(entries, cfg.train.train_fraction)
    if not train_set:
        raise UsageError("training split is empty")

    if args.skip_gradcheck:
        print("gradient check skipped", file=sys.stderr)
    else:
        ok, msg = run_gradcheck(cfg.model.skip_mode)
        print(msg, file=sys.stderr)
        if not ok:
            print("refusing to train; pass --skip-gradcheck to override", file=sys.stderr)
            return EXIT_RUNTIME

    if args.resume:
        state = load_checkpoint(args.resume, expect=cfg)
        state.config = cfg
        print(f"resuming from step {state.step}", file=sys.stderr)
    else:
        state = TrainState.fresh(cfg)
    train(state, train_set, out_dir=args.out)
    last = state.history[-1]["total"] if state.history else float("nan")
    print(f"trained to step {state.step}; final loss {last:.6g}; checkpoint {Path(args.out) / 'ckpt_final'}")
    return EXIT_OK


def level_paths(output, n_levels: int) -> list[tuple[str, Path]]:
    out = Path(output)
    names = list(LEVEL_SUFFIXES) + [f"p{i}" for i in range(1, n_levels + 1)]
    return [(name, out.with_name(f"{out.stem}_{name}{out.suffix}")) for name in names]


def cmd_complete(args) -> int:
    from .training import load_checkpoint

    if Path(args.output).suffix.lower() not in (".xyz", ".ply"):
        raise UsageError(f"--output must end in .xyz or .ply, got {args.output}")
    state = load_checkpoint(args.ckpt)
    partial = pointio.read_cloud(args.input)
    pred = state.model.complete(partial)
    if args.levels:
        clouds = pred.named_clouds()
        for name, path in level_paths(args.output, len(pred.levels)):
            pointio.write_cloud(path, clouds[name])
            print(f"{name}: {clouds[name].shape[0]} points -> {path}")
    else:
        pointio.write_cloud(args.output, pred.final.data)
        print(f"{pred.final.shape[0]} points -> {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import evaluate, format_table, load_checkpoint, write_table_csv

    if args.ckpt is None and not args.sanity:
        raise UsageError("--ckpt is required unless --sanity is given")
    entries = _dataset(args.data)
    if args.split != "all":
        fraction = 0.8
        model = None
        if args.ckpt is not None:
            state = load_checkpoint(args.ckpt)
            fraction, model = state.config.train.train_fraction, state.model
        train_set, test_set = pointio.split_dataset(entries, fraction)
        entries = train_set if args.split == "train" else test_set
        if not entries:
            raise UsageError(f"{args.split} split is empty")
    else:
        model = None if args.ckpt is None else load_checkpoint(args.ckpt).model
    rows = evaluate(model, entries, metric=args.metric, sanity=args.sanity)
    print(format_table(rows, args.metric))
    csv_path = Path(args.csv) if args.csv else Path(f"eval_{args.metric}.csv")
    write_table_csv(rows, csv_path)
    print(f"wrote {csv_path}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snowflake", description="Point-cloud completion toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic partial/complete corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="master seed (default: $SNOWFLAKE_SEED or 0)")
    s.add_argument("--count", type=int, default=50, help="shapes per category")
    s.add_argument("--config", default=None, help="read point counts and categories from [data]")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a synthetic corpus")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--skip-gradcheck", action="store_true")
    t.add_argument("--seed", type=int, default=None, help="overrides [train] seed")
    t.add_argument("--steps", type=int, default=None, help="overrides [train] steps (total)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("complete", help="complete a single partial cloud")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--input", required=True)
    c.add_argument("--output", required=True)
    c.add_argument("--levels", action="store_true", help="write every level with _pc/_p0/_p1.. suffixes")
    c.set_defaults(func=cmd_complete)

    e = sub.add_parser("eval", help="Chamfer distance table for a checkpoint")
    e.add_argument("--ckpt", default=None)
    e.add_argument("--data", required=True)
    e.add_argument("--metric", choices=("l1", "l2"), default="l1")
    e.add_argument("--split", choices=("all", "train", "test"), default="all")
    e.add_argument("--csv", default=None, help="CSV output path (default eval_<metric>.csv)")
    e.add_argument("--sanity", action="store_true", help="score ground truth against itself")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, ParseError, CheckpointError, OSError, ValueError) as exc:
        print(f"{parser.prog} {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
