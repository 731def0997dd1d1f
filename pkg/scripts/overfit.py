#!/usr/bin/env python3
"""Overfit the desk model on one synthetic shape and report CD_L2 over time."""

import argparse
import dataclasses

from snowflake.experiments import OverfitSetup, overfit_single_shape


def main():
    defaults = OverfitSetup()
    p = argparse.ArgumentParser(description=__doc__)
    for f in dataclasses.fields(OverfitSetup):
        p.add_argument(f"--{f.name.replace('_', '-')}", type=type(getattr(defaults, f.name)), default=getattr(defaults, f.name))
    p.add_argument("--report-every", type=int, default=100)
    args = vars(p.parse_args())
    report_every = args.pop("report_every")
    result = overfit_single_shape(OverfitSetup(**args), report_every=report_every, log=print)
    print(f"final CD_L2 {result.final_cd_l2:.4e} (best {result.best_cd_l2:.4e}) in {result.seconds:.0f}s")


if __name__ == "__main__":
    main()
