#!/usr/bin/env python3
"""Train the full model and the three skip-transformer ablations on the synthetic corpus.

Resumable: rerun with the same --workdir to continue.  Results land in
<workdir>/results.json; point SNOWFLAKE_CORPUS_RESULTS at it to let the
acceptance suite check them.
"""

import argparse
import json

from snowflake.config import SKIP_MODES
from snowflake.experiments import CorpusSetup, corpus_experiment


def main():
    d = CorpusSetup()
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--workdir", required=True)
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--seeds", type=int, nargs="+", default=list(d.seeds))
    p.add_argument("--modes", nargs="+", choices=SKIP_MODES, default=list(d.modes))
    p.add_argument("--data-seed", type=int, default=d.data_seed)
    p.add_argument("--shapes-per-category", type=int, default=d.shapes_per_category)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--checkpoint-every", type=int, default=d.checkpoint_every)
    a = p.parse_args()
    setup = CorpusSetup(
        steps=a.steps,
        seeds=tuple(a.seeds),
        modes=tuple(a.modes),
        data_seed=a.data_seed,
        shapes_per_category=a.shapes_per_category,
        batch_size=a.batch_size,
        checkpoint_every=a.checkpoint_every,
    )
    results = corpus_experiment(setup, a.workdir, log=lambda m: print(m, flush=True))
    print(json.dumps(results["verdict"], indent=2))


if __name__ == "__main__":
    main()
