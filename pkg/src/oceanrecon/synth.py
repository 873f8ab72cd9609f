"""Synthetic multi-layer temperature fields, observation sampling, normalisation
and the ``SFGF`` grid file format.

Surface temperature falls off as sin^2(latitude) from an equatorial peak,
shifted by a per-basin offset (longitude sectors with linear blends between
them), a uniform seasonal cycle and spatially smooth noise. Deeper layers relax
the surface anomaly toward an abyssal temperature with an e-folding depth
measured in layer indices; basin offsets persist at every depth.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

PHYSICAL_FILL = -9999.0
NORMALIZED_FILL = 0.0
ABYSSAL_TEMP = 2.0


@dataclass(frozen=True)
class FieldStats:
    mean: np.ndarray
    std: np.ndarray

    def to_csv(self, path: str | Path) -> None:
        lines = ["layer,mean,std"]
        lines += [f"{k},{m!r},{s!r}" for k, (m, s) in enumerate(zip(self.mean.tolist(), self.std.tolist()))]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "FieldStats":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        order = np.argsort(rows[:, 0])
        return cls(rows[order, 1].astype(np.float64), rows[order, 2].astype(np.float64))


@dataclass
class GridField:
    """L x H x W field with a land mask shared by every layer (1 = land)."""

    data: np.ndarray
    land_mask: np.ndarray
    normalized: bool = False
    stats: FieldStats | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.land_mask = np.ascontiguousarray(self.land_mask, dtype=bool)
        if self.data.ndim != 3 or self.data.shape[1:] != self.land_mask.shape:
            raise ValueError(f"data {self.data.shape} incompatible with land mask {self.land_mask.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def layers(self) -> int:
        return self.data.shape[0]

    @property
    def ocean(self) -> np.ndarray:
        return ~self.land_mask

    @property
    def fill_value(self) -> float:
        return NORMALIZED_FILL if self.normalized else PHYSICAL_FILL

    def with_fill(self) -> "GridField":
        data = self.data.copy()
        data[:, self.land_mask] = self.fill_value
        return replace(self, data=data)


@dataclass(frozen=True)
class SyntheticFieldSpec:
    layers: int = 8
    height: int = 32
    width: int = 64
    peak_temp: float = 28.0
    contrast: float = 26.0
    basin_offsets: tuple[float, ...] = (0.0, 1.5, -1.0)
    basin_blend: int = 6
    depth_decay: float = 3.0
    seasonal_amplitude: float = 1.5
    seasonal_phase: float = 2.0
    noise_amplitude: float = 1.0
    noise_length: float = 3.0
    layer_noise_amplitude: float = 0.5
    land_fraction: float = 0.3
    land_length: float = 4.0
    geometry_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.contrast <= 0:
            raise ValueError("contrast must be positive")
        if self.depth_decay <= 0:
            raise ValueError("depth_decay must be positive")
        if not self.basin_offsets:
            raise ValueError("need at least one basin")
        if not 0.25 <= self.land_fraction <= 0.35:
            raise ValueError("land_fraction must lie in [0.25, 0.35]")


FAMILY_A = SyntheticFieldSpec()
FAMILY_B = SyntheticFieldSpec(basin_offsets=(2.5, 4.0, 1.5), seasonal_phase=5.0, seed=10_000)


def latitudes(height: int) -> np.ndarray:
    """Row latitudes in degrees, pole to pole inclusive."""
    if height == 1:
        return np.zeros(1)
    return np.linspace(-90.0, 90.0, height)


def basin_offset_map(spec: SyntheticFieldSpec) -> np.ndarray:
    """Offset per longitude column; sector centres carry their exact offset."""
    offsets = np.asarray(spec.basin_offsets, dtype=np.float64)
    nb, w = len(offsets), spec.width
    if nb == 1:
        return np.full(w, offsets[0])
    sector = w / nb
    col = np.arange(w) + 0.5
    idx = np.floor(col / sector).astype(int) % nb
    out = offsets[idx].copy()
    half = spec.basin_blend / 2.0
    if half > 0:
        for b in range(nb):
            edge = (b + 1) * sector  # boundary between sector b and b+1 (periodic)
            d = (col - edge + w / 2) % w - w / 2
            near = np.abs(d) < half
            frac = (d[near] + half) / (2 * half)
            out[near] = (1 - frac) * offsets[b] + frac * offsets[(b + 1) % nb]
    return out


def land_mask(spec: SyntheticFieldSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.geometry_seed, 7919])
    raw = rng.standard_normal((spec.height, spec.width))
    smooth = gaussian_filter(raw, spec.land_length, mode=("nearest", "wrap"))
    thresh = np.quantile(smooth, 1.0 - spec.land_fraction)
    return smooth > thresh


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, int], length: float) -> np.ndarray:
    raw = rng.standard_normal(shape)
    if length > 0:
        raw = gaussian_filter(raw, length, mode=("nearest", "wrap"))
    std = raw.std()
    return raw / std if std > 0 else raw


def generate_field(spec: SyntheticFieldSpec, month: int, sample: int = 0) -> GridField:
    """Physical-units field for ``month`` (1-12); ``sample`` picks the noise draw."""
    if not 1 <= int(month) <= 12:
        raise ValueError(f"month must be in 1..12, got {month}")
    L, H, W = spec.layers, spec.height, spec.width
    land = land_mask(spec)
    ocean = ~land
    lat = np.deg2rad(latitudes(H))[:, None]
    seasonal = spec.seasonal_amplitude * np.cos(2 * np.pi * (month - spec.seasonal_phase) / 12.0)
    rng = np.random.default_rng([spec.seed, month, sample])
    noise0 = spec.noise_amplitude * _smooth_noise(rng, (H, W), spec.noise_length) if spec.noise_amplitude else 0.0
    anomaly = spec.peak_temp - spec.contrast * np.sin(lat) ** 2 + seasonal + noise0 - ABYSSAL_TEMP
    anomaly = np.broadcast_to(anomaly, (H, W))
    offset = basin_offset_map(spec)[None, :]

    data = np.empty((L, H, W))
    for k in range(L):
        decay = np.exp(-k / spec.depth_decay)
        layer = ABYSSAL_TEMP + offset + anomaly * decay
        if k > 0 and spec.layer_noise_amplitude:
            extra = spec.layer_noise_amplitude * _smooth_noise(rng, (H, W), spec.noise_length)
            extra -= extra[ocean].mean()
            layer = layer + extra * decay
        data[k] = layer
    data[:, land] = PHYSICAL_FILL
    means = data[:, ocean].mean(axis=1)
    if np.any(np.diff(means) > 1e-9):
        raise ValueError(f"layer means not non-increasing with depth: {means}")
    return GridField(data, land, normalized=False)


def generate_corpus(spec: SyntheticFieldSpec, n: int, start: int = 0) -> list[GridField]:
    """``n`` fields cycling through the months; sample index ``start + i``."""
    return [generate_field(spec, (i % 12) + 1, sample=i) for i in range(start, start + n)]


def check_family_separation(a: list[GridField], b: list[GridField], min_gap: float = 1.0) -> np.ndarray:
    """Per-layer |mean_a - mean_b| over ocean cells; raises if any layer is closer than ``min_gap``."""
    ma = np.mean([f.data[:, f.ocean].mean(axis=1) for f in a], axis=0)
    mb = np.mean([f.data[:, f.ocean].mean(axis=1) for f in b], axis=0)
    gap = np.abs(ma - mb)
    if np.any(gap < min_gap):
        raise ValueError(f"families not separated by {min_gap}: per-layer gaps {gap}")
    return gap


# ---------------------------------------------------------------- normalisation


def compute_stats(corpus: list[GridField]) -> FieldStats:
    if not corpus:
        raise ValueError("empty corpus")
    vals = np.stack([f.data[:, f.ocean] for f in corpus], axis=1).astype(np.float64)  # L x N x cells
    mean = vals.mean(axis=(1, 2))
    std = vals.std(axis=(1, 2))
    if np.any(std <= 0):
        raise ValueError(f"zero standard deviation in layers {np.flatnonzero(std <= 0).tolist()}")
    return FieldStats(mean, std)


def normalize(f: GridField, stats: FieldStats) -> GridField:
    if f.normalized:
        raise ValueError("field is already normalised")
    if np.any(stats.std <= 0):
        raise ValueError("zero standard deviation in stats")
    data = (f.data.astype(np.float64) - stats.mean[:, None, None]) / stats.std[:, None, None]
    data[:, f.land_mask] = NORMALIZED_FILL
    return GridField(data, f.land_mask, normalized=True, stats=stats)


def denormalize(f: GridField, stats: FieldStats | None = None) -> GridField:
    stats = stats or f.stats
    if not f.normalized:
        raise ValueError("field is not normalised")
    if stats is None:
        raise ValueError("no stats to denormalise with")
    data = f.data.astype(np.float64) * stats.std[:, None, None] + stats.mean[:, None, None]
    data[:, f.land_mask] = PHYSICAL_FILL
    return GridField(data, f.land_mask, normalized=False, stats=stats)


# ---------------------------------------------------------------- observations


@dataclass
class ObservationSet:
    mask: np.ndarray  # L x H x W bool, True where observed
    values: np.ndarray  # L x H x W float32, normalised units, zero off-mask
    guided_rate: float
    trial_seed: int
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.values = np.where(self.mask, self.values, 0.0).astype(np.float32)
        self.counts = self.mask.reshape(self.mask.shape[0], -1).sum(axis=1)


def observation_count(rate: float, ocean_cells: int) -> int:
    return int(np.floor(rate * ocean_cells + 0.5))


def sample_observations(f: GridField, guided_rate: float, trial_seed: int) -> ObservationSet:
    if not f.normalized:
        raise ValueError("sample observations from a normalised field")
    if not 0 < guided_rate <= 1:
        raise ValueError(f"guided_rate must be in (0, 1], got {guided_rate}")
    ocean_idx = np.flatnonzero(f.ocean.ravel())
    k = observation_count(guided_rate, ocean_idx.size)
    if k == 0:
        raise ValueError(f"guided_rate {guided_rate} selects no cells from {ocean_idx.size} ocean cells")
    rng = np.random.default_rng([int(trial_seed), 104729])
    L, H, W = f.shape
    mask = np.zeros((L, H * W), dtype=bool)
    for layer in range(L):
        mask[layer, rng.choice(ocean_idx, size=k, replace=False)] = True
    mask = mask.reshape(L, H, W)
    return ObservationSet(mask, np.where(mask, f.data, 0.0), guided_rate, int(trial_seed))


# ---------------------------------------------------------------- SFGF files

GRID_MAGIC = b"SFGF"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sIIIIf")


class GridFileError(ValueError):
    pass


class GridFormatError(GridFileError):
    pass


class GridVersionError(GridFileError):
    pass


class GridTruncatedError(GridFileError):
    pass


def encode_field(f: GridField) -> bytes:
    L, H, W = f.shape
    data = f.data.copy()
    data[:, f.land_mask] = f.fill_value
    bits = np.packbits(f.land_mask.ravel(), bitorder="big")
    return b"".join(
        [
            _HEADER.pack(GRID_MAGIC, GRID_VERSION, L, H, W, f.fill_value),
            bits.tobytes(),
            np.ascontiguousarray(data, dtype="<f4").tobytes(),
        ]
    )


def decode_field(buf: bytes) -> GridField:
    """Inverse of :func:`encode_field`. A zero fill value marks a normalised field."""
    if len(buf) < 4:
        raise GridTruncatedError("file shorter than magic")
    if buf[:4] != GRID_MAGIC:
        raise GridFormatError("bad magic: not an SFGF grid file")
    if len(buf) < _HEADER.size:
        raise GridTruncatedError("truncated header")
    _, version, L, H, W, fill = _HEADER.unpack_from(buf)
    if version != GRID_VERSION:
        raise GridVersionError(f"unsupported SFGF version {version}")
    nbits = (H * W + 7) // 8
    ndata = 4 * L * H * W
    expected = _HEADER.size + nbits + ndata
    if len(buf) < expected:
        raise GridTruncatedError(f"expected {expected} bytes, found {len(buf)}")
    if len(buf) > expected:
        raise GridFormatError(f"{len(buf) - expected} trailing bytes")
    pos = _HEADER.size
    land = np.unpackbits(np.frombuffer(buf, np.uint8, nbits, pos), count=H * W, bitorder="big").astype(bool)
    data = np.frombuffer(buf, "<f4", L * H * W, pos + nbits).astype(np.float32).reshape(L, H, W)
    return GridField(data, land.reshape(H, W), normalized=(fill == NORMALIZED_FILL))


def write_field(f: GridField, path: str | Path) -> None:
    Path(path).write_bytes(encode_field(f))


def read_field(path: str | Path) -> GridField:
    return decode_field(Path(path).read_bytes())
