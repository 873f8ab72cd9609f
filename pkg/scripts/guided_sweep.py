#!/usr/bin/env python3
"""Evaluate guided reconstructions of one held-out truth for a list of settings.

Each setting is ``rate,s,kernel,sigma_mode,distance``, e.g. ``0.075,4,5,zero,euclidean``.
"""

import argparse
import time

from oceanrecon.evaluate import run_trials
from oceanrecon.experiment import ToyExperiment, trained_denoiser
from oceanrecon.sampler import GuidanceConfig
from oceanrecon.synth import FAMILY_A, FAMILY_B


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("settings", nargs="+")
    ap.add_argument("--family", choices=["A", "B"], default="A")
    ap.add_argument("--trials", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cache-dir", default=".cache")
    args = ap.parse_args()

    exp = ToyExperiment()
    params, _ = trained_denoiser(exp, args.cache_dir)
    _, stats = exp.corpus()
    truth = exp.truth({"A": FAMILY_A, "B": FAMILY_B}[args.family])
    print("rate,s,kernel,sigma_mode,distance,mse_g,mse_r,mse_total,g_over_r,seconds")
    for setting in args.settings:
        rate, s, k, mode, dist = setting.split(",")
        cfg = GuidanceConfig(s=float(s), kernel_size=int(k), sigma_mode=mode, distance=dist)
        t0 = time.time()
        rep = run_trials(params, truth, cfg, float(rate), exp.schedule(), stats, args.trials, args.seed)
        print(
            f"{rate},{s},{k},{mode},{dist},{rep.mse_g:.4f},{rep.mse_r:.4f},{rep.mse_total:.4f},"
            f"{rep.mse_g / rep.mse_r:.3f},{time.time() - t0:.0f}",
            flush=True,
        )


if __name__ == "__main__":
    main()
