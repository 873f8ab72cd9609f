import math

import numpy as np
import pytest

from oceanrecon import tensor as T
from oceanrecon.denoiser import (
    PRESETS,
    DenoiserConfig,
    DenoiserParams,
    denoise,
    init_params,
    parameter_count,
    time_embedding,
)
from oceanrecon.tensor import Tensor

TINY = DenoiserConfig(in_channels=2, base_channels=8, channel_mult=(1, 2), res_blocks_per_level=1, time_embed_dim=16, norm_groups=4)


def _res(ci, co, temb):
    # two group norms, two 3x3 convs, a time projection and an optional 1x1 skip
    n = 2 * ci + 9 * ci * co + co + temb * co + co + 2 * co + 9 * co * co + co
    return n + (ci * co + co if ci != co else 0)


def test_default_parameter_count_closed_form():
    # in=8, base=32, mult=(1,2,2), 2 res blocks per level, temb=128, channels traced by hand
    temb = 128
    n = 32 * temb + temb + temb * temb + temb  # time MLP
    n += 9 * 8 * 32 + 32  # conv_in
    n += 2 * _res(32, 32, temb) + (9 * 32 * 32 + 32)  # level 0 + downsample
    n += _res(32, 64, temb) + _res(64, 64, temb) + (9 * 64 * 64 + 64)  # level 1 + downsample
    n += 2 * _res(64, 64, temb)  # level 2
    n += 2 * _res(64, 64, temb)  # middle
    n += 3 * _res(128, 64, temb) + (9 * 64 * 64 + 64)  # up level 2 + upsample
    n += 2 * _res(128, 64, temb) + _res(96, 64, temb) + (9 * 64 * 64 + 64)  # up level 1 + upsample
    n += _res(96, 32, temb) + 2 * _res(64, 32, temb)  # up level 0
    n += 2 * 32 + 9 * 32 * 8 + 8  # output norm + conv
    assert parameter_count(DenoiserConfig()) == n == 1_526_600
    assert init_params(DenoiserConfig()).count() == n


def test_full_scale_preset_is_kept():
    cfg = PRESETS["paper"]
    assert (cfg.in_channels, cfg.base_channels, cfg.channel_mult, cfg.res_blocks_per_level) == (42, 128, (1, 2, 2, 2, 4, 4), 3)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"in_channels": 0},
        {"channel_mult": ()},
        {"channel_mult": (2, 2)},
        {"base_channels": 12, "norm_groups": 8},
        {"res_blocks_per_level": 0},
    ],
)
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        DenoiserConfig(**kwargs)


def test_time_embedding_zero_step():
    e = time_embedding(0, 8)
    np.testing.assert_array_equal(e[:4], 0.0)
    np.testing.assert_array_equal(e[4:], 1.0)


def test_time_embedding_scalar_recomputation():
    # dim=4: frequencies 1 and 1e-4 (geometric span [1, 10^4] in periods)
    e = time_embedding(1, 4)
    np.testing.assert_allclose(e, [math.sin(1.0), math.sin(1e-4), math.cos(1.0), math.cos(1e-4)], rtol=1e-6)


def test_time_embedding_injective_over_all_steps():
    emb = time_embedding(np.arange(1, 1001), 32).astype(np.float64)
    d2 = ((emb[:, None, :] - emb[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    assert d2.min() > 1e-6


def test_time_embedding_odd_dim():
    with pytest.raises(ValueError):
        time_embedding(3, 5)


def test_fresh_denoiser_outputs_zero():
    p = init_params(TINY, seed=0)
    x = np.random.default_rng(0).standard_normal((2, 2, 8, 8))
    out = denoise(p, x, 10).data
    assert out.shape == x.shape
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("shape", [(1, 8, 32, 64), (3, 8, 16, 16)])
def test_shape_preserved(shape):
    p = init_params(DenoiserConfig(base_channels=16), seed=1)
    p.tensors["conv_out.w"].data[:] = 0.01
    with T.no_grad():
        assert denoise(p, np.zeros(shape, np.float32), 5).shape == shape


def test_indivisible_spatial_dims():
    p = init_params(TINY)
    with pytest.raises(T.ShapeError):
        denoise(p, np.zeros((1, 2, 7, 8)), 1)
    with pytest.raises(T.ShapeError):
        denoise(p, np.zeros((1, 3, 8, 8)), 1)


def test_denoise_deterministic_and_timestep_sensitive():
    p = init_params(TINY, seed=2)
    p.tensors["conv_out.w"].data[:] = np.random.default_rng(3).standard_normal(p["conv_out.w"].shape) * 0.1
    x = np.random.default_rng(4).standard_normal((1, 2, 8, 8)).astype(np.float32)
    with T.no_grad():
        a, b, c = denoise(p, x, 7).data, denoise(p, x, 7).data, denoise(p, x, 700).data
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_batched_steps_match_individual():
    p = init_params(TINY, seed=5)
    p.tensors["conv_out.w"].data[:] = 0.05
    x = np.random.default_rng(6).standard_normal((2, 2, 8, 8)).astype(np.float32)
    with T.no_grad():
        both = denoise(p, x, np.array([3, 900])).data
        one = denoise(p, x[1:], 900).data
    np.testing.assert_allclose(both[1:], one, rtol=1e-5, atol=1e-6)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(TINY, seed=7)
    path = tmp_path / "m.sfdt"
    p.save(path)
    q = DenoiserParams.load(path)
    assert q.config == p.config
    for k in p.tensors:
        assert q[k].data.tobytes() == p[k].data.tobytes()
    assert (tmp_path / "m.sfdt.cfg").read_text().startswith("denoiser.")


def test_checkpoint_config_mismatch(tmp_path):
    path = tmp_path / "m.sfdt"
    init_params(TINY).save(path)
    other = DenoiserParams(DenoiserConfig(in_channels=3, base_channels=8, channel_mult=(1, 2), res_blocks_per_level=1, time_embed_dim=16, norm_groups=4))
    other.save(tmp_path / "o.sfdt")
    (tmp_path / "m.sfdt.cfg").write_text((tmp_path / "o.sfdt.cfg").read_text())
    with pytest.raises(ValueError):
        DenoiserParams.load(path)


def test_end_to_end_finite_difference_spot_check():
    """d loss / d theta for four scattered parameters, analytic vs central differences."""
    p = init_params(TINY, seed=8)
    rng = np.random.default_rng(9)
    p.tensors["conv_out.w"].data[:] = rng.standard_normal(p["conv_out.w"].shape).astype(np.float32) * 0.2
    x = rng.standard_normal((2, 2, 8, 8)).astype(np.float32)
    target = rng.standard_normal(x.shape).astype(np.float32)

    def loss():
        d = T.sub(denoise(p, x, np.array([4, 400])), Tensor(target))
        return T.mean(T.mul(d, d))

    for t in p.values():
        t.grad = None
    T.backward(loss())
    probes = [("conv_in.w", 5), ("down0.res0.conv1.w", 17), ("time.lin2.w", 40), ("up1.up.w", 3)]
    h = 1e-2
    for name, idx in probes:
        flat = p[name].data.reshape(-1)
        analytic = float(p[name].grad.reshape(-1)[idx])
        orig = flat[idx]
        with T.no_grad():
            flat[idx] = orig + h
            fp = float(loss().data)
            flat[idx] = orig - h
            fm = float(loss().data)
        flat[idx] = orig
        numeric = (fp - fm) / (2 * h)
        assert abs(analytic - numeric) <= 1e-2 * max(abs(numeric), 1e-3), (name, analytic, numeric)
