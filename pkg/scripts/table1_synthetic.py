"""Desk-scale Table 1: context vs. downsampling on a synthetic cohort.

    python scripts/table1_synthetic.py                      # A/B/C configs, seed 42
    python scripts/table1_synthetic.py --contrast 0         # null-signal control
    python scripts/table1_synthetic.py --grid --input 456   # full tile x intermediate grid
"""

import argparse
import json
import sys
import time

from multiscale_wsi.config import ExperimentConfig, RunSpec, grid_runs
from multiscale_wsi.crops import AugmentParams
from multiscale_wsi.pipeline import run_experiment
from multiscale_wsi.synth import SynthParams

A = RunSpec(4000, 2000, 456)
B = RunSpec(2000, 456, 456)
C = RunSpec(8000, 224, 224)


def acceptance_config(contrast: float = 25.0, seed: int = 42, n_cmb: int = 60, n_dn: int = 40,
                      epochs: int = 30, k: int = 5, **synth) -> ExperimentConfig:
    return ExperimentConfig(
        runs=(A, B, C),
        comparisons=((A.name, B.name), (A.name, C.name)),
        seed=seed, k=k, epochs=epochs, crops_per_tile=1, batch_size=15, learning_rate=0.05,
        augment=AugmentParams(), n_cmb=n_cmb, n_dn=n_dn,
        synth=SynthParams(nodule_contrast=contrast, **synth),
    )


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--contrast", type=float, default=25.0)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--cmb", type=int, default=60)
    ap.add_argument("--dn", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--grid", action="store_true", help="all tile x intermediate pairs")
    ap.add_argument("--input", type=int, default=456)
    ap.add_argument("--json", help="write the report here")
    ap.add_argument("--synth", action="append", default=[], metavar="KEY=VALUE",
                    help="override a SynthParams field (numeric)")
    args = ap.parse_args(argv)
    synth = {k: float(v) for k, v in (s.split("=", 1) for s in args.synth)}
    cfg = acceptance_config(args.contrast, args.seed, args.cmb, args.dn, args.epochs,
                            args.folds, **synth)
    if args.grid:
        runs = grid_runs((2000, 4000, 8000), (args.input, 1000, 2000), args.input)
        cfg = cfg.with_overrides(runs=runs, comparisons=())
    t0 = time.time()

    def progress(i, n):
        if i % 10 == 0 or i == n:
            print(f"  regions {i}/{n}  {time.time() - t0:6.1f}s", file=sys.stderr)

    report, _ = run_experiment(cfg, jobs=args.jobs, progress=progress)
    print(report.table())
    print(f"elapsed {time.time() - t0:.1f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report.to_dict(), fh, indent=1)


if __name__ == "__main__":
    main()
