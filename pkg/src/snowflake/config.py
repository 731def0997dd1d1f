"""Dataclass configs and the ``key = value`` run-config file format.

The file format is INI-like: ``[section]`` headers followed by
``key = value`` lines.  Tuples are comma separated; ``all`` inside
``sa_neighbor_counts`` means "group every point".  Unknown sections or keys
are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ContractError, ParseError

SKIP_MODES = ("full", "self_att", "no_att", "no_connect")


@dataclass(frozen=True)
class EncoderConfig:
    sa_point_counts: tuple[int, ...] = (256, 64, 1)
    # None groups every point of the level (global pooling)
    sa_neighbor_counts: tuple[int | None, ...] = (16, 16, None)
    sa_channels: tuple[int, ...] = (64, 128, 512)
    attention_neighbors: int = 8

    def validate(self) -> None:
        counts = self.sa_point_counts
        if not (len(counts) == len(self.sa_neighbor_counts) == len(self.sa_channels)):
            raise ContractError("encoder per-level tuples must have equal length")
        if any(c < 1 for c in counts):
            raise ContractError(f"sa_point_counts must be positive, got {counts}")
        if any(b >= a for a, b in zip(counts, counts[1:])):
            raise ContractError(f"sa_point_counts must be strictly decreasing, got {counts}")
        if counts[-1] != 1:
            raise ContractError("the last set-abstraction level must pool to a single feature")
        if any(k is not None and k < 1 for k in self.sa_neighbor_counts):
            raise ContractError("sa_neighbor_counts must be positive or 'all'")
        if self.attention_neighbors < 1:
            raise ContractError("attention_neighbors must be positive")

    @property
    def min_points(self) -> int:
        return self.sa_point_counts[0]


@dataclass(frozen=True)
class SeedConfig:
    n_coarse: int = 64
    n_seed: int = 64

    def validate(self) -> None:
        if self.n_coarse < 1 or self.n_seed < 1:
            raise ContractError("seed counts must be positive")


@dataclass(frozen=True)
class ModelConfig:
    shape_code_width: int = 512
    feature_width: int = 32
    up_factors: tuple[int, ...] = (1, 2, 4)
    skip_neighbors: int = 8
    skip_mode: str = "full"
    disp_init_scale: float = 1e-2  # init gain of the last displacement layer
    allow_first_factor: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    seed: SeedConfig = field(default_factory=SeedConfig)

    def validate(self) -> None:
        self.encoder.validate()
        self.seed.validate()
        if self.skip_mode not in SKIP_MODES:
            raise ContractError(f"skip_mode must be one of {SKIP_MODES}, got {self.skip_mode!r}")
        if not self.up_factors or any(r < 1 for r in self.up_factors):
            raise ContractError(f"up-sampling factors must be >= 1, got {self.up_factors}")
        if self.up_factors[0] != 1 and not self.allow_first_factor:
            raise ContractError(
                f"first up-sampling factor must be 1 (got {self.up_factors[0]}); "
                "set allow_first_factor to override"
            )
        if self.feature_width < 1 or self.shape_code_width < 1:
            raise ContractError("feature widths must be positive")
        if self.skip_neighbors < 1 or self.skip_neighbors > self.seed.n_seed:
            raise ContractError(
                f"skip_neighbors must lie in [1, n_seed={self.seed.n_seed}], got {self.skip_neighbors}"
            )

    def level_counts(self) -> tuple[int, ...]:
        counts = []
        n = self.seed.n_seed
        for r in self.up_factors:
            n *= r
            counts.append(n)
        return tuple(counts)

    @property
    def output_points(self) -> int:
        return self.level_counts()[-1]


def full_size_model_config(**overrides) -> ModelConfig:
    """Full-size settings: N_c=256, N_0=512, C'=128, factors (1, 4, 8)."""
    base = dict(
        shape_code_width=512,
        feature_width=128,
        up_factors=(1, 4, 8),
        skip_neighbors=16,
        encoder=EncoderConfig(sa_point_counts=(512, 128, 1)),
        seed=SeedConfig(n_coarse=256, n_seed=512),
    )
    base.update(overrides)
    return ModelConfig(**base)


def micro_model_config(**overrides) -> ModelConfig:
    """Tiny model used by the gradient check (N_0=8, factors (1,2,2), C'=8)."""
    base = dict(
        shape_code_width=16,
        feature_width=8,
        up_factors=(1, 2, 2),
        skip_neighbors=4,
        disp_init_scale=1.0,
        encoder=EncoderConfig(
            sa_point_counts=(16, 8, 1),
            sa_neighbor_counts=(4, 4, None),
            sa_channels=(8, 8, 16),
            attention_neighbors=4,
        ),
        seed=SeedConfig(n_coarse=8, n_seed=8),
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True)
class LossWeights:
    lambda_preservation: float = 1.0
    metric: str = "l2"

    def validate(self) -> None:
        if not self.lambda_preservation >= 0:
            raise ContractError(f"lambda_preservation must be >= 0, got {self.lambda_preservation}")
        if self.metric not in ("l1", "l2"):
            raise ContractError(f"loss metric must be 'l1' or 'l2', got {self.metric!r}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 4
    lr: float = 1e-3
    lr_decay: str = "constant"  # or "linear": lr falls linearly to lr_final_fraction * lr at `steps`
    lr_final_fraction: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 1000
    log_every: int = 1
    seed: int = 0
    train_fraction: float = 0.8

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ContractError("steps >= 0, batch_size >= 1 and lr > 0 are required")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ContractError("train_fraction must lie in (0, 1]")
        if self.lr_decay not in ("constant", "linear"):
            raise ContractError(f"lr_decay must be 'constant' or 'linear', got {self.lr_decay!r}")
        if not 0.0 <= self.lr_final_fraction <= 1.0:
            raise ContractError("lr_final_fraction must lie in [0, 1]")

    def lr_at(self, step: int) -> float:
        """Step size for the update that produces ``step + 1``."""
        if self.lr_decay == "constant" or self.steps == 0:
            return self.lr
        frac = min(step / self.steps, 1.0)
        return self.lr * (1.0 - (1.0 - self.lr_final_fraction) * frac)


@dataclass(frozen=True)
class DataConfig:
    categories: tuple[str, ...] = ("box", "sphere", "cylinder", "plane-composite")
    shapes_per_category: int = 50
    gt_points: int = 512
    partial_points: int = 256

    def validate(self) -> None:
        if self.shapes_per_category < 1 or self.gt_points < 1 or self.partial_points < 1:
            raise ContractError("dataset counts must be positive")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.data.validate()


# -- (de)serialization ---------------------------------------------------------

_SECTIONS = {
    "model": ("model", ModelConfig),
    "encoder": ("encoder", EncoderConfig),
    "seed": ("seed", SeedConfig),
    "loss": ("loss", LossWeights),
    "train": ("train", TrainConfig),
    "data": ("data", DataConfig),
}


def to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


_NESTED = {
    (ModelConfig, "encoder"): EncoderConfig,
    (ModelConfig, "seed"): SeedConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "loss"): LossWeights,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "data"): DataConfig,
}


def _rebuild(cls, raw: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ContractError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        nested = _NESTED.get((cls, name))
        if nested is not None:
            value = _rebuild(nested, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def from_dict(raw: dict[str, Any], cls=RunConfig):
    return _rebuild(cls, raw)


def _parse_value(text: str, default: Any, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, str):
            return text
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and all(isinstance(d, str) for d in default):
                return tuple(items)
            return tuple(None if t.lower() == "all" else int(t) for t in items)
    except ValueError:
        raise ParseError(f"bad value {text!r} for {where}") from None
    raise ParseError(f"unsupported key {where}")


def load_run_config(path: str | Path) -> RunConfig:
    """Parse a sectioned ``key = value`` file into a validated :class:`RunConfig`."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ParseError(str(exc), path=path) from None

    defaults = RunConfig()
    sections: dict[str, dict[str, Any]] = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ParseError(f"unknown section [{name}]", path=path)
        _, cls = _SECTIONS[name]
        if name in ("encoder", "seed"):
            base = getattr(defaults.model, name)
        elif name == "model":
            base = defaults.model
        else:
            base = getattr(defaults, name)
        known = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
        values = {}
        for key, text in parser.items(name):
            if key not in known or (name == "model" and key in ("encoder", "seed")):
                raise ParseError(f"unknown key {key!r} in section [{name}]", path=path)
            values[key] = _parse_value(text, known[key], f"[{name}] {key}")
        sections[name] = values

    encoder = dataclasses.replace(defaults.model.encoder, **sections.get("encoder", {}))
    seed = dataclasses.replace(defaults.model.seed, **sections.get("seed", {}))
    model = dataclasses.replace(defaults.model, encoder=encoder, seed=seed, **sections.get("model", {}))
    cfg = RunConfig(
        model=model,
        loss=dataclasses.replace(defaults.loss, **sections.get("loss", {})),
        train=dataclasses.replace(defaults.train, **sections.get("train", {})),
        data=dataclasses.replace(defaults.data, **sections.get("data", {})),
    )
    cfg.validate()
    return cfg


def dump_run_config(cfg: RunConfig) -> str:
    """Inverse of :func:`load_run_config`."""

    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join("all" if x is None else str(x) for x in v)
        return str(v)

    lines = []
    for name, obj in (
        ("model", cfg.model),
        ("encoder", cfg.model.encoder),
        ("seed", cfg.model.seed),
        ("loss", cfg.loss),
        ("train", cfg.train),
        ("data", cfg.data),
    ):
        lines.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            if obj is cfg.model and f.name in ("encoder", "seed"):
                continue
            lines.append(f"{f.name} = {fmt(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
