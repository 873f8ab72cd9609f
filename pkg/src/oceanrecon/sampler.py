"""Observation-guided reverse diffusion.

Each reverse step predicts the noise, recovers an x0 estimate, pulls it toward
the observations with the gradient of a distance on observed cells, spreads
that gradient horizontally with a Gaussian kernel and shifts the posterior
mean by variance * gradient. The gradient is taken with respect to the x0
estimate directly, so sampling never differentiates through the denoiser.

Land cells are known (zero in normalised units), so the x0 estimate and the
guidance are both zeroed there every step.

Trials are run as a batch but every trial draws from its own generator, so a
trial's result does not depend on which other trials share its batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate

from . import tensor as T
from .denoiser import DenoiserParams, denoise
from .schedule import DiffusionSchedule, posterior_mean, predict_x0
from .synth import FieldStats, GridField, ObservationSet, denormalize

SIGMA_MODES = ("zero", "ddpm")
DISTANCES = ("squared", "euclidean")
SHIFT_VARIANCES = ("posterior", "beta")


class SamplingError(FloatingPointError):
    def __init__(self, step: int, msg: str = "non-finite state"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


@dataclass(frozen=True)
class GuidanceConfig:
    s: float = 4.0
    sigma_mode: str = "zero"
    kernel_size: int = 5
    kernel_sigma: float | None = None  # defaults to kernel_size / 4
    distance: str = "euclidean"
    shift_variance: str = "posterior"

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("guidance strength s must be >= 0")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")
        if self.kernel_size < 0 or (self.kernel_size and self.kernel_size % 2 == 0):
            raise ValueError(f"kernel_size must be 0 or odd, got {self.kernel_size}")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")
        if self.shift_variance not in SHIFT_VARIANCES:
            raise ValueError(f"shift_variance must be one of {SHIFT_VARIANCES}")
        if self.kernel_sigma is not None and self.kernel_sigma <= 0:
            raise ValueError("kernel_sigma must be positive")

    @property
    def sigma(self) -> float:
        return self.kernel_sigma if self.kernel_sigma is not None else self.kernel_size / 4.0


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Unnormalised kernel with peak 1 at the centre."""
    if size <= 0 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    r = size // 2
    d = np.arange(-r, r + 1)
    return np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma**2))


@dataclass(frozen=True)
class ObservationBatch:
    """Observation masks/values stacked over trials: [N, L, H, W]."""

    mask: np.ndarray
    values: np.ndarray

    @classmethod
    def stack(cls, observations: Sequence[ObservationSet]) -> "ObservationBatch":
        return cls(np.stack([o.mask for o in observations]), np.stack([o.values for o in observations]))


def guidance_gradient(x0_hat: np.ndarray, obs, cfg: GuidanceConfig) -> np.ndarray:
    """g = -s * dL/dx0 on observed cells.

    ``obs`` needs ``mask`` and ``values``; axes in front of [L, H, W] index
    independent samples, each with its own distance.
    """
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    mask = np.broadcast_to(obs.mask, x0_hat.shape)
    obs_values = obs.values
    if cfg.s == 0:
        return np.zeros(x0_hat.shape, dtype=np.float32)
    sample_axes = tuple(range(x0_hat.ndim - 3, x0_hat.ndim))
    counts = mask.sum(axis=sample_axes)
    if np.any(counts == 0):
        raise ValueError("empty observation mask with s > 0: nothing to guide toward")
    resid = np.where(mask, x0_hat - obs_values, 0.0)
    if cfg.distance == "squared":
        grad = 2.0 * resid
    else:
        norm = np.sqrt((resid * resid).sum(axis=sample_axes, keepdims=True))
        grad = resid / np.maximum(norm, 1e-8)
    return (-cfg.s * grad).astype(np.float32)


def soft_extension(g: np.ndarray, cfg: GuidanceConfig) -> np.ndarray:
    """Spread g within each layer by a peak-1 Gaussian; never across layers."""
    if cfg.kernel_size == 0:
        return np.asarray(g, dtype=np.float32)
    if cfg.kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd, got {cfg.kernel_size}")
    g = np.asarray(g, dtype=np.float64)
    kern = gaussian_kernel(cfg.kernel_size, cfg.sigma).reshape((1,) * (g.ndim - 2) + (cfg.kernel_size,) * 2)
    return correlate(g, kern, mode="constant", cval=0.0).astype(np.float32)


def guided_step(
    params: DenoiserParams,
    xt: np.ndarray,
    t: int,
    obs,
    cfg: GuidanceConfig,
    sched: DiffusionSchedule,
    rngs: Sequence[np.random.Generator] | np.random.Generator | None = None,
    land_mask: np.ndarray | None = None,
) -> np.ndarray:
    """One reverse step x_t -> x_{t-1} for a batch xt [N, L, H, W].

    ``obs`` is an ObservationSet, an ObservationBatch or None (only allowed
    when s == 0).
    """
    t = sched.check_step(t)
    with np.errstate(over="ignore", invalid="ignore"):
        return _guided_step(params, xt, t, obs, cfg, sched, rngs, land_mask)


def _guided_step(params, xt, t, obs, cfg, sched, rngs, land_mask) -> np.ndarray:
    try:
        with T.no_grad():
            eps = denoise(params, xt, t).data
    except T.NonFiniteError as exc:
        raise SamplingError(t, f"denoiser overflow ({exc})") from exc
    x0 = predict_x0(xt, eps, t, sched)
    if land_mask is not None:
        x0[..., land_mask] = 0.0
    mu = posterior_mean(x0, xt, t, sched)
    if cfg.s > 0:
        g = soft_extension(guidance_gradient(x0, obs, cfg), cfg)
        if land_mask is not None:
            g[..., land_mask] = 0.0
        shift_var = sched.posterior_var[t - 1] if cfg.shift_variance == "posterior" else sched.beta[t - 1]
        mu = mu + np.float32(shift_var) * g
    if cfg.sigma_mode == "ddpm" and t > 1:
        if rngs is None:
            raise ValueError("ddpm sampling needs a random generator")
        if isinstance(rngs, np.random.Generator):
            rngs = [rngs]
        z = np.stack([r.standard_normal(xt.shape[1:], dtype=np.float32) for r in rngs])
        mu = mu + np.float32(np.sqrt(sched.posterior_var[t - 1])) * z
    out = mu.astype(np.float32)
    if not np.isfinite(out).all():
        raise SamplingError(t)
    return out


def _as_generators(seeds) -> list[np.random.Generator]:
    return [s if isinstance(s, np.random.Generator) else np.random.default_rng(int(s)) for s in seeds]


def run_reverse(
    params: DenoiserParams,
    obs,
    cfg: GuidanceConfig,
    sched: DiffusionSchedule,
    seeds: Sequence,
    shape: tuple[int, int, int],
    land_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Full reverse chain from x_T ~ N(0, I) for one trial per seed; returns normalised x0 [N, L, H, W]."""
    rngs = _as_generators(seeds)
    x = np.stack([r.standard_normal(shape, dtype=np.float32) for r in rngs])
    for t in range(sched.T, 0, -1):
        x = guided_step(params, x, t, obs, cfg, sched, rngs, land_mask)
    return x


def reconstruct_batch(
    params: DenoiserParams,
    observations: Sequence[ObservationSet],
    cfg: GuidanceConfig,
    sched: DiffusionSchedule,
    seeds: Sequence,
    land_mask: np.ndarray,
    stats: FieldStats | None = None,
) -> list[GridField]:
    if len(observations) != len(seeds):
        raise ValueError("need one seed per observation set")
    shape = observations[0].mask.shape
    x = run_reverse(params, ObservationBatch.stack(observations), cfg, sched, seeds, shape, land_mask)
    out = []
    for xi in x:
        f = GridField(xi, land_mask, normalized=True, stats=stats).with_fill()
        out.append(denormalize(f, stats) if stats is not None else f)
    return out


def reconstruct(
    params: DenoiserParams,
    obs: ObservationSet,
    cfg: GuidanceConfig,
    sched: DiffusionSchedule,
    rng,
    land_mask: np.ndarray,
    stats: FieldStats | None = None,
) -> GridField:
    """Guided reconstruction; physical units when ``stats`` is given, else normalised."""
    return reconstruct_batch(params, [obs], cfg, sched, [rng], land_mask, stats)[0]


def sample_unconditional(
    params: DenoiserParams,
    sched: DiffusionSchedule,
    rng,
    land_mask: np.ndarray,
    stats: FieldStats | None = None,
    n: int = 1,
) -> list[GridField]:
    cfg = GuidanceConfig(s=0.0, sigma_mode="ddpm", kernel_size=0)
    if isinstance(rng, np.random.Generator):
        seeds = [rng] if n == 1 else list(rng.spawn(n))
    else:
        seeds = [int(rng) + i for i in range(n)]
    shape = (params.config.in_channels,) + land_mask.shape
    x = run_reverse(params, None, cfg, sched, seeds, shape, land_mask)
    out = []
    for xi in x:
        f = GridField(xi, land_mask, normalized=True, stats=stats).with_fill()
        out.append(denormalize(f, stats) if stats is not None else f)
    return out
