"""DDPM pre-training and the direct-regression U-Net baseline."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .denoiser import DenoiserConfig, DenoiserParams, denoise, init_params
from .optim import Adam
from .schedule import DiffusionSchedule, q_sample_batch
from .synth import FieldStats, GridField, ObservationSet, denormalize, sample_observations
from .tensor import Tensor

logger = logging.getLogger(__name__)

BASELINE_STEP = 1  # the baseline reuses the timestep-conditioned backbone at a fixed step


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float, dump: Path | None):
        where = f"; state dumped to {dump}" if dump else ""
        super().__init__(f"non-finite loss {loss} at step {step}{where}")
        self.step = step
        self.loss = loss
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    total_steps: int = 5000
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if min(self.batch_size, self.total_steps, self.checkpoint_every) < 1:
            raise ValueError("batch_size, total_steps and checkpoint_every must be positive")
        if self.checkpoint_every > self.total_steps:
            raise ValueError("checkpoint_every must not exceed total_steps")


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float, wall_ms: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("log steps must increase")
        self.steps.append(step)
        self.losses.append(loss)
        self.wall_ms.append(wall_ms)

    def to_csv(self, path: str | Path) -> None:
        rows = ["step,loss,wall_ms"] + [f"{s},{l!r},{w:.3f}" for s, l, w in zip(self.steps, self.losses, self.wall_ms)]
        Path(path).write_text("\n".join(rows) + "\n")


def stack_fields(data: Sequence[GridField]) -> tuple[np.ndarray, np.ndarray]:
    """Normalised data [N, L, H, W] with land forced to zero, plus the shared land mask."""
    if not data:
        raise ValueError("empty dataset")
    land = data[0].land_mask
    for f in data:
        if not f.normalized:
            raise ValueError("training fields must be normalised")
        if not np.array_equal(f.land_mask, land):
            raise ValueError("all fields must share one land mask")
    x = np.stack([f.data for f in data]).astype(np.float32)
    x[:, :, land] = 0.0
    return x, land


def masked_mse(pred: Tensor, target: np.ndarray, weight: np.ndarray) -> Tensor:
    """Mean of (pred - target)^2 over cells with weight 1."""
    diff = T.sub(pred, Tensor(target))
    return T.mul(T.sum(T.mul(T.mul(diff, diff), Tensor(weight))), 1.0 / float(weight.sum()))


def _loop(
    params: DenoiserParams,
    cfg: TrainConfig,
    batch_fn: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray | int, np.ndarray, np.ndarray]],
    rng: np.random.Generator,
    out: Path | None,
    on_step: Callable[[int, float], None] | None,
) -> TrainLog:
    opt = Adam(params.values(), lr=cfg.learning_rate)
    log = TrainLog()
    t0 = time.perf_counter()
    for step in range(1, cfg.total_steps + 1):
        inp, tsteps, target, weight = batch_fn(rng)
        try:
            pred = denoise(params, inp, tsteps)
            loss = masked_mse(pred, target, weight)
        except T.NonFiniteError:
            T.clear_tape()
            loss = None
        lval = float("nan") if loss is None else loss.item()
        if not np.isfinite(lval):
            T.clear_tape()
            dump = None
            if out is not None:
                dump = out.with_name(out.name + ".diverged")
                params.save(dump)
            raise TrainingDiverged(step, lval, dump)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        log.append(step, lval, (time.perf_counter() - t0) * 1e3)
        if on_step is not None:
            on_step(step, lval)
        if out is not None and step % cfg.checkpoint_every == 0:
            params.save(out)
    if out is not None:
        params.save(out)
    return log


def train_ddpm(
    data: Sequence[GridField],
    cfg: TrainConfig,
    sched: DiffusionSchedule,
    denoiser_cfg: DenoiserConfig,
    out: str | Path | None = None,
    on_step: Callable[[int, float], None] | None = None,
    init: DenoiserParams | None = None,
) -> tuple[DenoiserParams, TrainLog]:
    """Minimise the ocean-masked epsilon-prediction MSE with Adam."""
    x, land = stack_fields(data)
    if denoiser_cfg.in_channels != x.shape[1]:
        raise ValueError(f"denoiser expects {denoiser_cfg.in_channels} layers, data has {x.shape[1]}")
    params = init.copy() if init is not None else init_params(denoiser_cfg, seed=cfg.seed)
    weight = np.broadcast_to(~land, (cfg.batch_size,) + x.shape[1:]).astype(np.float32)

    def batch(rng):
        idx = rng.integers(0, len(x), cfg.batch_size)
        t = rng.integers(1, sched.T + 1, cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size,) + x.shape[1:], dtype=np.float32)
        return q_sample_batch(x[idx], t, eps, sched), t, eps, weight

    rng = np.random.default_rng([cfg.seed, 1])
    log = _loop(params, cfg, batch, rng, Path(out) if out else None, on_step)
    return params, log


def eps_mse(
    params: DenoiserParams, data: Sequence[GridField], sched: DiffusionSchedule, n_pairs: int = 64, seed: int = 123
) -> float:
    """Held-out noise-prediction MSE over ocean cells at uniformly drawn steps."""
    x, land = stack_fields(data)
    rng = np.random.default_rng(seed)
    ocean = ~land
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(n_pairs):
            x0 = x[i % len(x)][None]
            t = int(rng.integers(1, sched.T + 1))
            eps = rng.standard_normal(x0.shape, dtype=np.float32)
            pred = denoise(params, q_sample_batch(x0, np.array([t]), eps, sched), t).data
            err = (pred - eps)[:, :, ocean]
            total += float((err.astype(np.float64) ** 2).sum())
            count += err.size
    return total / count


# ---------------------------------------------------------------- baseline


def baseline_config(denoiser_cfg: DenoiserConfig) -> DenoiserConfig:
    layers = denoiser_cfg.output_channels
    return DenoiserConfig(
        in_channels=2 * layers,
        base_channels=denoiser_cfg.base_channels,
        channel_mult=denoiser_cfg.channel_mult,
        res_blocks_per_level=denoiser_cfg.res_blocks_per_level,
        time_embed_dim=denoiser_cfg.time_embed_dim,
        norm_groups=denoiser_cfg.norm_groups,
        out_channels=layers,
    )


def baseline_input(mask: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Observed values (zero elsewhere) stacked with the binary mask along channels."""
    mask = mask.astype(np.float32)
    return np.concatenate([values * mask, mask], axis=-3).astype(np.float32)


def train_baseline(
    data: Sequence[GridField],
    cfg: TrainConfig,
    denoiser_cfg: DenoiserConfig,
    pretrain_guided_rate: float,
    out: str | Path | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[DenoiserParams, TrainLog]:
    """Regress the full field from sparse observations; masks are redrawn every batch.

    ``denoiser_cfg`` describes the backbone for L layers; the input width is
    doubled to take the observation mask.
    """
    x, land = stack_fields(data)
    bcfg = baseline_config(denoiser_cfg) if denoiser_cfg.in_channels == x.shape[1] else denoiser_cfg
    params = init_params(bcfg, seed=cfg.seed)
    weight = np.broadcast_to(~land, (cfg.batch_size,) + x.shape[1:]).astype(np.float32)
    fields = [GridField(xi, land, normalized=True) for xi in x]

    def batch(rng):
        idx = rng.integers(0, len(x), cfg.batch_size)
        seeds = rng.integers(0, 2**31, cfg.batch_size)
        obs = [sample_observations(fields[i], pretrain_guided_rate, int(s)) for i, s in zip(idx, seeds)]
        inp = np.stack([baseline_input(o.mask, o.values) for o in obs])
        return inp, BASELINE_STEP, x[idx], weight

    rng = np.random.default_rng([cfg.seed, 2])
    log = _loop(params, cfg, batch, rng, Path(out) if out else None, on_step)
    return params, log


def baseline_reconstruct(
    params: DenoiserParams, obs: ObservationSet, land_mask: np.ndarray, stats: FieldStats | None = None
) -> GridField:
    with T.no_grad():
        pred = denoise(params, baseline_input(obs.mask, obs.values)[None], BASELINE_STEP).data[0]
    f = GridField(pred, land_mask, normalized=True, stats=stats).with_fill()
    return denormalize(f, stats) if stats is not None else f
