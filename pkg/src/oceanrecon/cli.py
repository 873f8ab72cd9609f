"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure
(non-finite loss or sampler state).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .denoiser import PRESETS, DenoiserConfig, DenoiserParams
from .evaluate import (
    AblationGrid,
    difference_field,
    emit_heatmap,
    evaluate,
    grid_from_config,
    report_dict,
    run_ablation,
    run_trials,
)
from .sampler import GuidanceConfig, reconstruct, sample_unconditional
from .schedule import schedule_from_config
from .synth import (
    FAMILY_A,
    FAMILY_B,
    FieldStats,
    GridField,
    GridFileError,
    ObservationSet,
    compute_stats,
    generate_corpus,
    normalize,
    read_field,
    write_field,
)
from .trainer import TrainConfig, baseline_reconstruct, train_baseline, train_ddpm

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
FAMILIES = {"A": FAMILY_A, "B": FAMILY_B}
STATS_NAME = "stats.csv"

logger = logging.getLogger("oceanrecon")


def _section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name, {}))


def _build(cls, values: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what} settings: {exc}") from exc


def denoiser_from_config(cfg: dict) -> DenoiserConfig:
    section = _section(cfg, "denoiser")
    preset = section.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown denoiser preset {preset!r}; choose from {sorted(PRESETS)}")
        try:
            return replace(PRESETS[preset], **section)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    return _build(DenoiserConfig, section, "denoiser")


def spec_from_config(cfg: dict, family: str | None):
    section = _section(cfg, "data")
    fam = family or section.pop("family", "A")
    section.pop("family", None)
    section.pop("n_fields", None)
    if fam not in FAMILIES:
        raise ConfigError(f"unknown family {fam!r}; choose A or B")
    try:
        return replace(FAMILIES[fam], **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid data settings: {exc}") from exc


def guidance_from_args(cfg: dict, args) -> GuidanceConfig:
    section = _section(cfg, "guidance")
    for key, attr in (("s", "s"), ("sigma_mode", "sigma_mode"), ("kernel_size", "kernel"), ("distance", "distance")):
        value = getattr(args, attr, None)
        if value is not None:
            section[key] = value
    return _build(GuidanceConfig, section, "guidance")


def train_from_config(cfg: dict, seed: int | None) -> TrainConfig:
    section = _section(cfg, "train")
    if seed is not None:
        section["seed"] = seed
    return _build(TrainConfig, section, "train")


def _load_dataset(data_dir: Path) -> tuple[list[GridField], FieldStats]:
    files = sorted(data_dir.glob("*.sfgf"))
    if not files:
        raise ConfigError(f"no .sfgf fields in {data_dir}")
    raw = [read_field(p) for p in files]
    stats_path = data_dir / STATS_NAME
    stats = FieldStats.from_csv(stats_path) if stats_path.exists() else compute_stats(raw)
    return [normalize(f, stats) for f in raw], stats


def _stats_for(checkpoint: Path, override: str | None) -> FieldStats:
    path = Path(override) if override else checkpoint.with_name(checkpoint.name + ".stats.csv")
    if not path.exists():
        raise ConfigError(f"normalisation stats not found at {path}; pass --stats")
    return FieldStats.from_csv(path)


def _observations(obs_path: str, mask_path: str, stats: FieldStats, rate: float) -> tuple[ObservationSet, np.ndarray]:
    obs_field = read_field(obs_path)
    mask_field = read_field(mask_path)
    if obs_field.shape != mask_field.shape:
        raise ConfigError("observation and mask files differ in shape")
    mask = (mask_field.data != 0) & obs_field.ocean[None]
    if obs_field.normalized:
        values = obs_field.data
    else:
        values = (obs_field.data.astype(np.float64) - stats.mean[:, None, None]) / stats.std[:, None, None]
    return ObservationSet(mask, np.where(mask, values, 0.0), rate, 0), obs_field.land_mask


# ---------------------------------------------------------------- commands


def cmd_generate_data(args, cfg) -> int:
    spec = spec_from_config(cfg, args.family)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    n = args.months or int(cfg.get("data", {}).get("n_fields", 512))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(spec, n, start=args.start)
    for i, f in enumerate(corpus):
        write_field(f, out / f"field_{args.start + i:06d}.sfgf")
    stats = FieldStats.from_csv(args.stats) if args.stats else compute_stats(corpus)
    stats.to_csv(out / STATS_NAME)
    print(f"wrote {n} fields to {out}")
    return EXIT_OK


def _train_common(args, cfg, trainer):
    tcfg = train_from_config(cfg, args.seed)
    dcfg = denoiser_from_config(cfg)
    data, stats = _load_dataset(Path(args.data_dir))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def progress(step, loss):
        if step % max(1, tcfg.total_steps // 20) == 0:
            logger.info("step %d loss %.5f", step, loss)

    params, log = trainer(data, tcfg, dcfg, out, progress)
    log.to_csv(args.log or out.with_name(out.name + ".loss.csv"))
    stats.to_csv(out.with_name(out.name + ".stats.csv"))
    print(f"final loss {log.losses[-1]:.6f}; checkpoint {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    sched = schedule_from_config(cfg)
    return _train_common(args, cfg, lambda d, t, c, o, p: train_ddpm(d, t, sched, c, out=o, on_step=p))


def cmd_train_baseline(args, cfg) -> int:
    rate = args.pretrain_rate
    if rate is None:
        rate = float(cfg.get("baseline", {}).get("pretrain_guided_rate", 0.075))
    return _train_common(args, cfg, lambda d, t, c, o, p: train_baseline(d, t, c, rate, out=o, on_step=p))


def cmd_reconstruct(args, cfg) -> int:
    ckpt = Path(args.checkpoint)
    params = DenoiserParams.load(ckpt)
    stats = _stats_for(ckpt, args.stats)
    obs, land = _observations(args.obs, args.mask, stats, rate=0.0)
    if args.baseline:
        field = baseline_reconstruct(params, obs, land, stats)
    else:
        gcfg = guidance_from_args(cfg, args)
        sched = schedule_from_config(cfg)
        field = reconstruct(params, obs, gcfg, sched, np.random.default_rng(args.seed or 0), land, stats)
    write_field(field, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    truth = read_field(args.truth)
    if truth.normalized:
        raise ConfigError("truth field must be in physical units")
    if args.recon:
        recon = read_field(args.recon)
        if args.mask is None:
            raise ConfigError("--mask is required with --recon")
        mask = read_field(args.mask).data != 0
        obs = ObservationSet(mask & truth.ocean[None], np.zeros(mask.shape), 0.0, 0)
        rep = evaluate(recon, truth, obs, args.upper_levels)
    else:
        if args.checkpoint is None:
            raise ConfigError("pass either --recon or --checkpoint")
        ckpt = Path(args.checkpoint)
        params = DenoiserParams.load(ckpt)
        stats = _stats_for(ckpt, args.stats)
        gcfg = guidance_from_args(cfg, args)
        ev = _section(cfg, "eval")
        rate = args.rate if args.rate is not None else float(ev.get("rate", 0.075))
        trials = args.trials if args.trials is not None else int(ev.get("trials", 4))
        rep = run_trials(params, truth, gcfg, rate, schedule_from_config(cfg), stats, trials, args.seed or 0, args.upper_levels)
    text = json.dumps(report_dict(rep), indent=2)
    if args.json:
        Path(args.json).write_text(text + "\n")
    print(text)
    if args.heatmap:
        emit_heatmap(truth, 0, f"{args.heatmap}_truth.pgm")
        if args.recon:
            emit_heatmap(recon, 0, f"{args.heatmap}_recon.pgm")
            emit_heatmap(difference_field(truth, recon), 0, f"{args.heatmap}_diff.pgm", symmetric=True)
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    ckpt = Path(args.checkpoint)
    params = DenoiserParams.load(ckpt)
    stats = _stats_for(ckpt, args.stats)
    truth = read_field(args.truth)
    section = _section(cfg, "ablate")
    try:
        grid = grid_from_config(section) if section else AblationGrid()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    def show(rep):
        c = rep.config
        print(f"s={c['s']} sigma={c['sigma_mode']} kernel={c['kernel']} rate={c['rate']} total={rep.mse_total:.5f}")

    result = run_ablation(params, truth, grid, schedule_from_config(cfg), stats, args.seed or 0, on_cell=show)
    result.to_csv(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_sample(args, cfg) -> int:
    ckpt = Path(args.checkpoint)
    params = DenoiserParams.load(ckpt)
    stats = _stats_for(ckpt, args.stats)
    land = read_field(args.land_from).land_mask
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = sample_unconditional(params, schedule_from_config(cfg), args.seed or 0, land, stats, n=args.n)
    for i, f in enumerate(samples):
        write_field(f, out / f"sample_{i:03d}.sfgf")
        if args.heatmaps:
            emit_heatmap(f, 0, out / f"sample_{i:03d}_layer0.pgm")
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand without
    # the subparser default overwriting a value given at the top level
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--config", default=argparse.SUPPRESS, help="section.key = value config file")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="oceanrecon", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", parents=[common], help="write a synthetic corpus")
    g.add_argument("--spec", default=None, help="config file with data.* keys (alias of --config)")
    g.add_argument("--months", type=int, default=None, help="number of monthly fields")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--family", choices=sorted(FAMILIES), default=None)
    g.add_argument("--start", type=int, default=0, help="first sample index")
    g.add_argument("--stats", default=None, help="reuse these normalisation stats instead of fitting new ones")
    g.set_defaults(func=cmd_generate_data)

    for name, func, helptext in (
        ("train", cmd_train, "pre-train the unconditional denoiser"),
        ("train-baseline", cmd_train_baseline, "train the direct-regression U-Net"),
    ):
        t = sub.add_parser(name, parents=[common], help=helptext)
        t.add_argument("--data-dir", required=True)
        t.add_argument("--out", required=True, help="checkpoint path")
        t.add_argument("--log", default=None, help="loss CSV (default <out>.loss.csv)")
        if name == "train-baseline":
            t.add_argument("--pretrain-rate", type=float, default=None)
        t.set_defaults(func=func)

    def guidance_flags(q):
        q.add_argument("--s", type=float, default=None)
        q.add_argument("--sigma-mode", choices=("zero", "ddpm"), default=None)
        q.add_argument("--kernel", type=int, default=None)
        q.add_argument("--distance", choices=("euclidean", "squared"), default=None)

    r = sub.add_parser("reconstruct", parents=[common], help="guided reconstruction from observations")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--obs", required=True, help="field file holding observed values")
    r.add_argument("--mask", required=True, help="field file, non-zero where observed")
    r.add_argument("--out", required=True)
    r.add_argument("--stats", default=None)
    r.add_argument("--baseline", action="store_true", help="checkpoint is a regression baseline")
    guidance_flags(r)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", parents=[common], help="score a reconstruction or run trials")
    e.add_argument("--truth", required=True)
    e.add_argument("--recon", default=None)
    e.add_argument("--mask", default=None)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--stats", default=None)
    e.add_argument("--rate", type=float, default=None)
    e.add_argument("--trials", type=int, default=None)
    e.add_argument("--upper-levels", type=int, default=10)
    e.add_argument("--json", default=None)
    e.add_argument("--heatmap", default=None, help="prefix for surface-layer PGM maps (truth, recon, difference)")
    guidance_flags(e)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", parents=[common], help="Cartesian sweep to CSV")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--truth", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--stats", default=None)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sample", parents=[common], help="unconditional samples")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--land-from", required=True, help="any field file with the target land mask")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--stats", default=None)
    s.add_argument("--heatmaps", action="store_true")
    s.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", None), ("config", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config_path = args.config or getattr(args, "spec", None)
        cfg = load_config(config_path) if config_path else {}
        return args.func(args, cfg)
    except (ConfigError, GridFileError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
