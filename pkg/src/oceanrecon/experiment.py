"""The desk-scale toy experiment shared by the scripts and the acceptance suite.

A corpus of family-A fields is generated, normalised with its own per-layer
statistics and used to pre-train the denoiser and the regression baseline.
Checkpoints are cached under a directory keyed by a hash of every setting that
influences them, so repeated runs reuse finished training.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .denoiser import DenoiserConfig, DenoiserParams
from .schedule import DiffusionSchedule, build_linear_schedule
from .synth import FAMILY_A, FieldStats, GridField, SyntheticFieldSpec, compute_stats, generate_corpus, generate_field, normalize
from .trainer import TrainConfig, TrainLog, train_baseline, train_ddpm

logger = logging.getLogger(__name__)

HELD_OUT_START = 100_000  # sample indices of held-out fields, far from the training range
TRUTH_SAMPLE = 200_000


@dataclass(frozen=True)
class ToyExperiment:
    spec: SyntheticFieldSpec = FAMILY_A
    n_fields: int = 512
    denoiser: DenoiserConfig = DenoiserConfig(base_channels=16)
    train: TrainConfig = TrainConfig(learning_rate=1e-3, total_steps=5000, checkpoint_every=1000)
    baseline_train: TrainConfig = TrainConfig(learning_rate=1e-3, total_steps=5000, checkpoint_every=1000)
    baseline_rate: float = 0.075
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    extra: dict = field(default_factory=dict)

    def key(self, what: str) -> str:
        blob = json.dumps({"what": what, **asdict(self)}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def schedule(self) -> DiffusionSchedule:
        return build_linear_schedule(self.diffusion_steps, self.beta_start, self.beta_end)

    def corpus(self) -> tuple[list[GridField], FieldStats]:
        fields = generate_corpus(self.spec, self.n_fields)
        return fields, compute_stats(fields)

    def normalized_corpus(self) -> tuple[list[GridField], FieldStats]:
        fields, stats = self.corpus()
        return [normalize(f, stats) for f in fields], stats

    def held_out(self, n: int, spec: SyntheticFieldSpec | None = None) -> list[GridField]:
        return generate_corpus(spec or self.spec, n, start=HELD_OUT_START)

    def truth(self, spec: SyntheticFieldSpec | None = None, month: int = 7) -> GridField:
        return generate_field(spec or self.spec, month, sample=TRUTH_SAMPLE)


def _cached(path: Path, build) -> tuple[DenoiserParams, TrainLog | None]:
    if path.exists():
        logger.info("reusing cached checkpoint %s", path)
        return DenoiserParams.load(path), None
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    params, log = build(tmp)
    tmp.replace(path)
    tmp.with_name(tmp.name + ".cfg").replace(path.with_name(path.name + ".cfg"))
    log.to_csv(path.with_name(path.name + ".loss.csv"))
    return params, log


def trained_denoiser(exp: ToyExperiment, cache_dir: str | Path, on_step=None) -> tuple[DenoiserParams, TrainLog | None]:
    data, _ = exp.normalized_corpus()
    path = Path(cache_dir) / f"ddpm-{exp.key('ddpm')}.sfdt"
    return _cached(path, lambda out: train_ddpm(data, exp.train, exp.schedule(), exp.denoiser, out=out, on_step=on_step))


def trained_baseline(exp: ToyExperiment, cache_dir: str | Path, on_step=None) -> tuple[DenoiserParams, TrainLog | None]:
    data, _ = exp.normalized_corpus()
    path = Path(cache_dir) / f"baseline-{exp.key('baseline')}.sfdt"
    return _cached(
        path, lambda out: train_baseline(data, exp.baseline_train, exp.denoiser, exp.baseline_rate, out=out, on_step=on_step)
    )
