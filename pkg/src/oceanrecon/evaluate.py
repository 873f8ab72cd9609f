"""Reconstruction metrics, multi-trial averaging, ablation sweeps and heatmaps.

All errors are in physical units (degC^2) over ocean cells of the upper
``min(upper_levels, L)`` layers. MSE-g pools observed cells, MSE-r pools the
remaining ocean cells, and the total pools both, so the total is the
count-weighted mean of the other two.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .denoiser import DenoiserParams
from .sampler import GuidanceConfig, reconstruct_batch
from .schedule import DiffusionSchedule
from .synth import FieldStats, GridField, ObservationSet, normalize, sample_observations
from .trainer import baseline_reconstruct

UPPER_LEVELS = 10
IDENTITY_RTOL = 1e-9


class MetricIdentityError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ReconstructionReport:
    mse_g: float
    mse_r: float
    mse_total: float
    per_layer: tuple[float, ...]
    n_g: int
    n_r: int
    trials: int = 1
    config: dict = field(default_factory=dict)
    trial_totals: tuple[float, ...] = ()

    def __post_init__(self):
        check_identity(self)

    def row(self) -> dict:
        return {**self.config, "trials": self.trials, "mse_g": self.mse_g, "mse_r": self.mse_r, "mse_total": self.mse_total}


def check_identity(rep: ReconstructionReport, rtol: float = IDENTITY_RTOL) -> None:
    n = rep.n_g + rep.n_r
    if n == 0:
        raise MetricIdentityError("report covers no ocean cells")
    weighted = (rep.n_g * rep.mse_g + rep.n_r * rep.mse_r) / n
    if abs(weighted - rep.mse_total) > rtol * max(abs(rep.mse_total), 1e-300):
        raise MetricIdentityError(f"mse_total {rep.mse_total!r} != weighted mean {weighted!r}")


def evaluate(
    recon: GridField, truth: GridField, obs: ObservationSet, upper_levels: int = UPPER_LEVELS, config: dict | None = None
) -> ReconstructionReport:
    if recon.shape != truth.shape or obs.mask.shape != truth.shape:
        raise ValueError(f"shape mismatch: recon {recon.shape}, truth {truth.shape}, mask {obs.mask.shape}")
    if recon.normalized or truth.normalized:
        raise ValueError("evaluate expects physical-unit fields")
    k = min(upper_levels, truth.layers)
    ocean = np.broadcast_to(truth.ocean, (k,) + truth.land_mask.shape)
    sq = (recon.data[:k].astype(np.float64) - truth.data[:k].astype(np.float64)) ** 2
    on_mask = obs.mask[:k] & ocean
    off_mask = ocean & ~obs.mask[:k]
    n_g, n_r = int(on_mask.sum()), int(off_mask.sum())
    sum_g, sum_r = float(sq[on_mask].sum()), float(sq[off_mask].sum())
    per_layer = tuple(float(sq[i][truth.ocean].mean()) for i in range(k))
    return ReconstructionReport(
        mse_g=sum_g / n_g if n_g else 0.0,
        mse_r=sum_r / n_r if n_r else 0.0,
        mse_total=(sum_g + sum_r) / (n_g + n_r),
        per_layer=per_layer,
        n_g=n_g,
        n_r=n_r,
        config=dict(config or {}),
        trial_totals=((sum_g + sum_r) / (n_g + n_r),),
    )


def mean_report(reports: Sequence[ReconstructionReport], config: dict | None = None) -> ReconstructionReport:
    """Pool trials cell-wise; ``n_g``/``n_r`` become totals over all trials.

    Every trial of a run sees the same cell counts, so the pooled MSEs equal
    the plain means of the per-trial MSEs.
    """
    if not reports:
        raise ValueError("no reports to average")
    n_g = sum(r.n_g for r in reports)
    n_r = sum(r.n_r for r in reports)
    sum_g = sum(r.mse_g * r.n_g for r in reports)
    sum_r = sum(r.mse_r * r.n_r for r in reports)
    return ReconstructionReport(
        mse_g=sum_g / n_g if n_g else 0.0,
        mse_r=sum_r / n_r if n_r else 0.0,
        mse_total=(sum_g + sum_r) / (n_g + n_r),
        per_layer=tuple(np.mean([r.per_layer for r in reports], axis=0).tolist()),
        n_g=n_g,
        n_r=n_r,
        trials=sum(r.trials for r in reports),
        config=dict(config if config is not None else reports[0].config),
        trial_totals=tuple(t for r in reports for t in r.trial_totals),
    )


def trial_seeds(master_seed: int, n_trials: int) -> list[tuple[int, np.random.SeedSequence]]:
    """(observation seed, sampler seed sequence) for each trial."""
    children = np.random.SeedSequence([int(master_seed), 7]).spawn(n_trials)
    return [(int(c.generate_state(1)[0]), c) for c in children]


def config_echo(cfg: GuidanceConfig, rate: float) -> dict:
    return {"s": cfg.s, "sigma_mode": cfg.sigma_mode, "kernel": cfg.kernel_size, "rate": rate, "distance": cfg.distance}


def run_trials(
    params: DenoiserParams,
    truth: GridField,
    cfg: GuidanceConfig,
    rate: float,
    sched: DiffusionSchedule,
    stats: FieldStats,
    n_trials: int = 4,
    master_seed: int = 0,
    upper_levels: int = UPPER_LEVELS,
    batch_size: int = 8,
) -> ReconstructionReport:
    """Reconstruct ``truth`` (physical units) ``n_trials`` times with fresh observation locations."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    normed = normalize(truth, stats)
    seeds = trial_seeds(master_seed, n_trials)
    observations = [sample_observations(normed, rate, obs_seed) for obs_seed, _ in seeds]
    echo = config_echo(cfg, rate)
    reports = []
    for lo in range(0, n_trials, batch_size):
        chunk = slice(lo, lo + batch_size)
        gens = [np.random.default_rng(ss) for _, ss in seeds[chunk]]
        recons = reconstruct_batch(params, observations[chunk], cfg, sched, gens, truth.land_mask, stats)
        reports += [evaluate(r, truth, o, upper_levels, echo) for r, o in zip(recons, observations[chunk])]
    return mean_report(reports, echo)


def run_baseline_trials(
    params: DenoiserParams,
    truth: GridField,
    rate: float,
    stats: FieldStats,
    n_trials: int = 4,
    master_seed: int = 0,
    upper_levels: int = UPPER_LEVELS,
) -> ReconstructionReport:
    """Regression-baseline counterpart of :func:`run_trials` on the same observation draws."""
    normed = normalize(truth, stats)
    echo = {"model": "baseline", "rate": rate}
    reports = []
    for obs_seed, _ in trial_seeds(master_seed, n_trials):
        obs = sample_observations(normed, rate, obs_seed)
        reports.append(evaluate(baseline_reconstruct(params, obs, truth.land_mask, stats), truth, obs, upper_levels, echo))
    return mean_report(reports, echo)


# ---------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationGrid:
    s: tuple[float, ...] = (4.0,)
    kernel_sizes: tuple[int, ...] = (5,)
    sigma_modes: tuple[str, ...] = ("zero",)
    rates: tuple[float, ...] = (0.075,)
    distances: tuple[str, ...] = ("euclidean",)
    n_trials: int = 4

    def __post_init__(self):
        for name in ("s", "kernel_sizes", "sigma_modes", "rates", "distances"):
            if not getattr(self, name):
                raise ValueError(f"ablation axis {name} is empty")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")

    def cells(self):
        for s, k, mode, rate, dist in itertools.product(self.s, self.kernel_sizes, self.sigma_modes, self.rates, self.distances):
            yield GuidanceConfig(s=s, sigma_mode=mode, kernel_size=k, distance=dist), rate


CSV_COLUMNS = ("s", "sigma_mode", "kernel", "rate", "distance", "trials", "mse_g", "mse_r", "mse_total")


@dataclass
class AblationResult:
    grid: AblationGrid
    reports: list[ReconstructionReport]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            for rep in self.reports:
                row = rep.row()
                w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in CSV_COLUMNS})

    def lookup(self, **echo) -> ReconstructionReport:
        for rep in self.reports:
            if all(rep.config.get(k) == v for k, v in echo.items()):
                return rep
        raise KeyError(echo)


def run_ablation(
    params: DenoiserParams,
    truth: GridField,
    grid: AblationGrid,
    sched: DiffusionSchedule,
    stats: FieldStats,
    master_seed: int = 0,
    upper_levels: int = UPPER_LEVELS,
    on_cell=None,
) -> AblationResult:
    """Cartesian sweep; every cell reuses the same trial seeds."""
    reports = []
    for cfg, rate in grid.cells():
        rep = run_trials(params, truth, cfg, rate, sched, stats, grid.n_trials, master_seed, upper_levels)
        reports.append(rep)
        if on_cell is not None:
            on_cell(rep)
    return AblationResult(grid, reports)


def grid_from_config(section: dict) -> AblationGrid:
    def tup(key, cast):
        v = section.get(key)
        if v is None:
            return None
        return tuple(cast(x) for x in (v if isinstance(v, (list, tuple)) else [v]))

    kwargs = {}
    for key, cast in (("s", float), ("kernel_sizes", int), ("sigma_modes", str), ("rates", float), ("distances", str)):
        v = tup(key, cast)
        if v is not None:
            kwargs[key] = v
    if "n_trials" in section:
        kwargs["n_trials"] = int(section["n_trials"])
    return AblationGrid(**kwargs)


def report_dict(rep: ReconstructionReport) -> dict:
    return asdict(rep)


# ---------------------------------------------------------------- heatmaps


def emit_heatmap(f: GridField, layer: int, path: str | Path, symmetric: bool = False) -> None:
    """Binary PGM of one layer plus ``<path>.csv`` with the raw values.

    Ocean cells map linearly onto grey levels 1..255 over the layer's ocean
    min/max (or over [-m, m] with ``symmetric``, so zero is mid-grey); land is 0.
    A constant layer is uniform mid-grey.
    """
    if not 0 <= layer < f.layers:
        raise ValueError(f"layer {layer} outside [0, {f.layers})")
    path = Path(path)
    vals = f.data[layer].astype(np.float64)
    ocean = f.ocean
    grey = np.zeros(vals.shape, dtype=np.uint8)
    if ocean.any():
        ov = vals[ocean]
        if symmetric:
            m = float(np.abs(ov).max())
            lo, hi = -m, m
        else:
            lo, hi = float(ov.min()), float(ov.max())
        if hi > lo:
            scaled = 1.0 + 254.0 * (ov - lo) / (hi - lo)
        else:
            scaled = np.full(ov.shape, 128.0)
        grey[ocean] = np.clip(np.rint(scaled), 1, 255).astype(np.uint8)
    h, w = grey.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + grey.tobytes())
    out = np.where(ocean, vals, f.fill_value)
    np.savetxt(path.with_name(path.name + ".csv"), out, delimiter=",", fmt="%.6g")


def difference_field(a: GridField, b: GridField) -> GridField:
    if a.shape != b.shape or not np.array_equal(a.land_mask, b.land_mask):
        raise ValueError("fields differ in shape or land mask")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    diff[:, a.land_mask] = 0.0
    return GridField(diff, a.land_mask, normalized=a.normalized)
