#!/usr/bin/env python3
"""Train (or reuse) the toy denoiser and regression baseline and report held-out noise MSE."""

import argparse
import logging
import time

from oceanrecon.experiment import ToyExperiment, trained_baseline, trained_denoiser
from oceanrecon.synth import normalize
from oceanrecon.trainer import eps_mse


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache-dir", default=".cache")
    ap.add_argument("--skip-baseline", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    exp = ToyExperiment()
    t0 = time.time()

    def progress(step, loss):
        if step % 250 == 0:
            print(f"step {step:5d}  loss {loss:.4f}  {time.time() - t0:7.1f}s", flush=True)

    params, _ = trained_denoiser(exp, args.cache_dir, on_step=progress)
    _, stats = exp.corpus()
    held = [normalize(f, stats) for f in exp.held_out(32)]
    print(f"held-out eps MSE {eps_mse(params, held, exp.schedule(), 128):.4f} (zero predictor: 1.0)")
    if not args.skip_baseline:
        t0 = time.time()
        trained_baseline(exp, args.cache_dir, on_step=progress)
        print("baseline ready")


if __name__ == "__main__":
    main()
