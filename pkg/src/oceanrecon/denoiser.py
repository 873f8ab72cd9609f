"""U-Net-lite noise predictor over stacked field layers.

Topology follows the usual DDPM layout: a sinusoidal timestep embedding fed
through a two-layer MLP, residual blocks (GroupNorm -> SiLU -> conv, timestep
bias, GroupNorm -> SiLU -> conv), stride-2 conv downsampling, nearest-neighbour
+ conv upsampling and channel-concatenated skip connections. There is no
attention. The output convolution starts at zero so a fresh network predicts
zero noise everywhere.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .config import dump_config, load_config
from .serialize import read_tensors, write_tensors
from .tensor import Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 8
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2)
    res_blocks_per_level: int = 2
    time_embed_dim: int = 128
    norm_groups: int = 8
    out_channels: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if not self.channel_mult or self.channel_mult[0] != 1:
            raise ValueError("channel_mult must be non-empty and start with 1")
        if self.res_blocks_per_level < 1 or self.base_channels < 1:
            raise ValueError("res_blocks_per_level and base_channels must be positive")
        if self.base_channels % 2:
            raise ValueError("base_channels must be even (it sizes the sinusoidal embedding)")
        for m in self.channel_mult:
            if (self.base_channels * m) % self.norm_groups:
                raise ValueError(f"{self.base_channels * m} channels not divisible into {self.norm_groups} groups")

    @property
    def output_channels(self) -> int:
        return self.out_channels or self.in_channels

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_mult) - 1)


PRESETS = {
    "desk": DenoiserConfig(),
    "paper": DenoiserConfig(
        in_channels=42, base_channels=128, channel_mult=(1, 2, 2, 2, 4, 4), res_blocks_per_level=3, time_embed_dim=512
    ),
}


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding; ``t`` scalar gives shape [dim], an array gives [N, dim]."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(1e4) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(T.DTYPE)


# ---------------------------------------------------------------- layout


@dataclass(frozen=True)
class _Step:
    kind: str  # "res" | "down" | "up" | "push" | "pop_res"
    name: str
    cin: int = 0
    cout: int = 0


def _plan(cfg: DenoiserConfig) -> list[_Step]:
    ch = cfg.base_channels
    steps: list[_Step] = []
    skip_channels = [ch]
    cur = ch
    for lvl, mult in enumerate(cfg.channel_mult):
        for r in range(cfg.res_blocks_per_level):
            steps.append(_Step("res", f"down{lvl}.res{r}", cur, ch * mult))
            cur = ch * mult
            steps.append(_Step("push", ""))
            skip_channels.append(cur)
        if lvl != len(cfg.channel_mult) - 1:
            steps.append(_Step("down", f"down{lvl}.down", cur, cur))
            steps.append(_Step("push", ""))
            skip_channels.append(cur)
    steps.append(_Step("res", "mid.res0", cur, cur))
    steps.append(_Step("res", "mid.res1", cur, cur))
    for lvl in reversed(range(len(cfg.channel_mult))):
        mult = cfg.channel_mult[lvl]
        for r in range(cfg.res_blocks_per_level + 1):
            skip = skip_channels.pop()
            steps.append(_Step("pop_res", f"up{lvl}.res{r}", cur + skip, ch * mult))
            cur = ch * mult
        if lvl != 0:
            steps.append(_Step("up", f"up{lvl}.up", cur, cur))
    assert not skip_channels
    return steps


def _param_shapes(cfg: DenoiserConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    ch, ted = cfg.base_channels, cfg.time_embed_dim
    yield "time.lin1.w", (ted, ch)
    yield "time.lin1.b", (ted,)
    yield "time.lin2.w", (ted, ted)
    yield "time.lin2.b", (ted,)
    yield "conv_in.w", (ch, cfg.in_channels, 3, 3)
    yield "conv_in.b", (ch,)
    for st in _plan(cfg):
        if st.kind in ("res", "pop_res"):
            p = st.name
            yield f"{p}.norm1.g", (st.cin,)
            yield f"{p}.norm1.b", (st.cin,)
            yield f"{p}.conv1.w", (st.cout, st.cin, 3, 3)
            yield f"{p}.conv1.b", (st.cout,)
            yield f"{p}.temb.w", (st.cout, ted)
            yield f"{p}.temb.b", (st.cout,)
            yield f"{p}.norm2.g", (st.cout,)
            yield f"{p}.norm2.b", (st.cout,)
            yield f"{p}.conv2.w", (st.cout, st.cout, 3, 3)
            yield f"{p}.conv2.b", (st.cout,)
            if st.cin != st.cout:
                yield f"{p}.skip.w", (st.cout, st.cin, 1, 1)
                yield f"{p}.skip.b", (st.cout,)
        elif st.kind in ("down", "up"):
            yield f"{st.name}.w", (st.cout, st.cin, 3, 3)
            yield f"{st.name}.b", (st.cout,)
    yield "norm_out.g", (ch,)
    yield "norm_out.b", (ch,)
    yield "conv_out.w", (cfg.output_channels, ch, 3, 3)
    yield "conv_out.b", (cfg.output_channels,)


def parameter_count(cfg: DenoiserConfig) -> int:
    return int(sum(np.prod(s) for _, s in _param_shapes(cfg)))


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def values(self):
        return self.tensors.values()

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: Tensor(v.data.copy(), v.requires_grad) for k, v in self.tensors.items()})

    def save(self, path: str | Path) -> None:
        path = Path(path)
        write_tensors(path, self.arrays())
        dump_config({"denoiser": asdict(self.config)}, config_sidecar(path))

    @classmethod
    def load(cls, path: str | Path) -> "DenoiserParams":
        path = Path(path)
        raw = load_config(config_sidecar(path))["denoiser"]
        cfg = DenoiserConfig(**raw)
        arrays = read_tensors(path)
        expected = dict(_param_shapes(cfg))
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"checkpoint does not match config (missing={missing[:3]}, extra={extra[:3]})")
        for k, a in arrays.items():
            if a.shape != expected[k]:
                raise ValueError(f"{k}: shape {a.shape} != expected {expected[k]}")
        return cls(cfg, {k: Tensor(arrays[k], requires_grad=True) for k in expected})


def config_sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".cfg")


def init_params(cfg: DenoiserConfig, seed: int = 0) -> DenoiserParams:
    """Uniform(+-1/sqrt(fan_in)) weights, unit norm gains, zero output head."""
    rng = np.random.default_rng(seed)
    shapes = dict(_param_shapes(cfg))
    tensors: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if name.startswith("conv_out"):
            arr = np.zeros(shape)
        elif ".norm" in name or name.startswith("norm_out"):
            arr = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        else:
            wshape = shape if name.endswith(".w") else shapes[name[:-2] + ".w"]
            fan_in = int(np.prod(wshape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return DenoiserParams(cfg, tensors)


# ---------------------------------------------------------------- forward


def _res_block(p: dict[str, Tensor], name: str, x: Tensor, temb: Tensor, groups: int) -> Tensor:
    h = T.silu(T.group_norm(x, groups, p[f"{name}.norm1.g"], p[f"{name}.norm1.b"]))
    h = T.conv2d(h, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], padding=1)
    h = T.add_channel_bias(h, T.linear(temb, p[f"{name}.temb.w"], p[f"{name}.temb.b"]))
    h = T.silu(T.group_norm(h, groups, p[f"{name}.norm2.g"], p[f"{name}.norm2.b"]))
    h = T.conv2d(h, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], padding=1)
    if f"{name}.skip.w" in p:
        x = T.conv2d(x, p[f"{name}.skip.w"], p[f"{name}.skip.b"])
    return x + h


def denoise(params: DenoiserParams, xt, t) -> Tensor:
    """Predict the noise in ``xt`` [N, C, H, W] at step(s) ``t`` (int or length-N array)."""
    cfg = params.config
    p = params.tensors
    xt = T.as_tensor(xt)
    if xt.data.ndim != 4 or xt.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"expected input [N, {cfg.in_channels}, H, W], got {xt.shape}")
    n, _, h, w = xt.shape
    f = cfg.downsample_factor
    if h % f or w % f:
        raise T.ShapeError(f"spatial dims {h}x{w} not divisible by {f}")
    steps = np.broadcast_to(np.asarray(t), (n,))
    emb = Tensor(time_embedding(steps, cfg.base_channels))
    temb = T.linear(emb, p["time.lin1.w"], p["time.lin1.b"])
    temb = T.linear(T.silu(temb), p["time.lin2.w"], p["time.lin2.b"])
    temb_act = T.silu(temb)

    g = cfg.norm_groups
    hcur = T.conv2d(xt, p["conv_in.w"], p["conv_in.b"], padding=1)
    skips = [hcur]
    for st in _plan(cfg):
        if st.kind == "res":
            hcur = _res_block(p, st.name, hcur, temb_act, g)
        elif st.kind == "push":
            skips.append(hcur)
        elif st.kind == "down":
            hcur = T.conv2d(hcur, p[f"{st.name}.w"], p[f"{st.name}.b"], padding=1, stride=2)
        elif st.kind == "pop_res":
            hcur = _res_block(p, st.name, T.concat_channels(hcur, skips.pop()), temb_act, g)
        elif st.kind == "up":
            hcur = T.conv2d(T.upsample_nearest2x(hcur), p[f"{st.name}.w"], p[f"{st.name}.b"], padding=1)
    hcur = T.silu(T.group_norm(hcur, g, p["norm_out.g"], p["norm_out.b"]))
    return T.conv2d(hcur, p["conv_out.w"], p["conv_out.b"], padding=1)
