"""The full completion network: encoder, seed generator, SPD generator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .encoder import Encoder
from .ndtensor import Tensor
from .nn import Module
from .seedgen import SeedGenerator, merge_and_sample
from .spd import Generator, SpdOutput


@dataclass
class Prediction:
    code: Tensor
    coarse: Tensor  # P_c
    seed: Tensor  # P_0
    levels: list[SpdOutput] = field(default_factory=list)  # P_1 .. P_n

    @property
    def clouds(self) -> list[Tensor]:
        """P_c, P_1, ..., P_n: the clouds supervised by the completion loss."""
        return [self.coarse] + [lvl.cloud for lvl in self.levels]

    @property
    def final(self) -> Tensor:
        return self.levels[-1].cloud

    def named_clouds(self) -> dict[str, np.ndarray]:
        out = {"pc": self.coarse.data, "p0": self.seed.data}
        for i, lvl in enumerate(self.levels, start=1):
            out[f"p{i}"] = lvl.cloud.data
        return out


class SnowflakeNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg.encoder, cfg.shape_code_width, rng)
        self.seedgen = SeedGenerator(cfg.shape_code_width, cfg.feature_width, cfg.seed.n_coarse, rng)
        self.generator = Generator(
            cfg.shape_code_width,
            cfg.feature_width,
            cfg.up_factors,
            cfg.skip_neighbors,
            cfg.skip_mode,
            rng,
            disp_init_scale=cfg.disp_init_scale,
        )

    def __call__(self, partial) -> Prediction:
        f = self.encoder.encode(partial)
        coarse, _ = self.seedgen.generate_coarse(f)
        p0 = merge_and_sample(coarse, partial, self.cfg.seed.n_seed)
        return Prediction(f, coarse, p0, self.generator(p0, f))

    def complete(self, partial) -> Prediction:
        """Inference without graph recording; all levels are returned."""
        from .ndtensor import no_grad

        with no_grad():
            return self(np.asarray(partial, dtype=np.float64))
