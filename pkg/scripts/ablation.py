#!/usr/bin/env python3
"""Guidance ablation grid on the toy model, written as CSV."""

import argparse

from oceanrecon.evaluate import AblationGrid, run_ablation
from oceanrecon.experiment import ToyExperiment, trained_denoiser


def floats(text):
    return tuple(float(v) for v in text.split(","))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--s", type=floats, default=(0.0, 1.0, 2.0, 4.0))
    ap.add_argument("--kernels", type=lambda t: tuple(int(v) for v in t.split(",")), default=(0, 5))
    ap.add_argument("--sigma-modes", type=lambda t: tuple(t.split(",")), default=("zero", "ddpm"))
    ap.add_argument("--rates", type=floats, default=(0.075,))
    ap.add_argument("--trials", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="ablation.csv")
    ap.add_argument("--cache-dir", default=".cache")
    args = ap.parse_args()

    exp = ToyExperiment()
    params, _ = trained_denoiser(exp, args.cache_dir)
    _, stats = exp.corpus()
    grid = AblationGrid(args.s, args.kernels, args.sigma_modes, args.rates, n_trials=args.trials)
    result = run_ablation(
        params, exp.truth(), grid, exp.schedule(), stats, args.seed,
        on_cell=lambda rep: print(rep.config, f"total {rep.mse_total:.4f}", flush=True),
    )
    result.to_csv(args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
