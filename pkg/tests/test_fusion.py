import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridbev import tensor as T
from hybridbev.fusion import (
    FusionConfig, add_pos, cbr_block, hybrid_fuse, hybrid_fuse_backward, hybrid_fuse_forward, init_fusion,
    sinusoidal_encoding,
)
from hybridbev.layers import init_cbr

from gradcases import COMPOSITES, run_case
from oracles import averaging_cbr

C, NY, NX = 4, 6, 6


@pytest.fixture
def maps(rng):
    return rng.uniform(0.5, 2.0, size=(C, NY, NX)), rng.uniform(0.5, 2.0, size=(C, NY, NX))


def _perturb_attention(rng, p):
    for k in p:
        if k.split(".")[0] in ("dsa_cam", "dsa_rad", "dca_c2r", "dca_r2c") and k.endswith(("w_out", "w_att")):
            p[k] = rng.normal(0, 0.3, size=p[k].shape)
    return p


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(mode="sum"), dict(num_layers=2), dict(cbr_kernels=(3, 3))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            FusionConfig(**kw)

    def test_concat_widths(self):
        assert FusionConfig().concat_channels(8) == 32
        assert FusionConfig(use_self=False).concat_channels(8) == 16
        assert FusionConfig(mode="concat").concat_channels(8) == 16


class TestPositionalEncoding:
    def test_amplitude_bound(self):
        enc = sinusoidal_encoding(8, 5, 7, amplitude=0.1)
        assert enc.shape == (8, 5, 7)
        assert np.abs(enc).max() <= 0.1 + 1e-15

    def test_axes_split(self):
        enc = sinusoidal_encoding(4, 3, 5)
        # first half varies along x only, second half along y only
        assert np.all(enc[:2] == enc[:2, :1, :])
        assert np.all(enc[2:] == enc[2:, :, :1])

    def test_shape_checked(self, rng):
        p = init_fusion(rng, C, NY, NX, FusionConfig(heads=2, points=2))
        with pytest.raises(T.DimensionError):
            add_pos(np.zeros((C, NY, NX + 1)), "cam", p)


class TestDegenerateWiring:
    def test_zero_init_averages_modalities(self, rng, maps):
        Fc, Fr = maps
        cfg = FusionConfig(heads=2, points=2, cbr_kernels=(1, 1, 1))
        p = averaging_cbr(init_fusion(rng, C, NY, NX, cfg), C)
        expected = ((Fc + p["pos_cam"]) + (Fr + p["pos_rad"])) / 2
        np.testing.assert_allclose(hybrid_fuse(Fc, Fr, p, cfg), expected, atol=1e-12)

    def test_zero_init_concat_layout(self, rng, maps):
        Fc, Fr = maps
        cfg = FusionConfig(heads=2, points=2)
        p = init_fusion(rng, C, NY, NX, cfg)
        _, cache = hybrid_fuse_forward(Fc, Fr, p, cfg)
        x = cache["cbr"][0][0]
        a, b = Fc + p["pos_cam"], Fr + p["pos_rad"]
        np.testing.assert_array_equal(x, np.concatenate([a, b, a, b]))

    def test_null_radar_depends_on_camera_only(self, rng, maps):
        Fc, _ = maps
        cfg = FusionConfig(heads=2, points=2)
        p = init_fusion(rng, C, NY, NX, cfg)
        zero = np.zeros_like(Fc)
        base = hybrid_fuse(Fc, zero, p, cfg)
        np.testing.assert_array_equal(hybrid_fuse(Fc.copy(), zero.copy(), p, cfg), base)
        assert not np.allclose(hybrid_fuse(Fc * 1.5, zero, p, cfg), base)

    def test_null_modality_swap_invariant(self, rng, maps):
        Fc, _ = maps
        cfg = FusionConfig(heads=2, points=2, cbr_kernels=(1, 1, 1))
        p = averaging_cbr(init_fusion(rng, C, NY, NX, cfg), C)
        np.testing.assert_array_equal(p["pos_cam"], p["pos_rad"])
        zero = np.zeros_like(Fc)
        np.testing.assert_allclose(hybrid_fuse(Fc, zero, p, cfg), hybrid_fuse(zero, Fc, p, cfg), atol=1e-12)

    def test_concat_mode(self, rng, maps):
        Fc, Fr = maps
        cfg = FusionConfig(mode="concat")
        p = init_fusion(rng, C, NY, NX, cfg)
        assert not any(k.startswith(("pos_", "dsa", "dca")) for k in p)
        assert hybrid_fuse(Fc, Fr, p, cfg).shape == (C, NY, NX)

    def test_use_self_toggle_changes_output(self, rng, maps):
        Fc, Fr = maps
        on, off = FusionConfig(heads=2, points=2), FusionConfig(heads=2, points=2, use_self=False)
        a = hybrid_fuse(Fc, Fr, init_fusion(np.random.default_rng(1), C, NY, NX, on), on)
        b = hybrid_fuse(Fc, Fr, init_fusion(np.random.default_rng(1), C, NY, NX, off), off)
        assert a.shape == b.shape == (C, NY, NX)
        assert not np.allclose(a, b)


class TestHybridFuse:
    def test_shape_mismatch(self, rng):
        p = init_fusion(rng, C, NY, NX, FusionConfig(heads=2, points=2))
        with pytest.raises(T.DimensionError):
            hybrid_fuse(np.zeros((C, NY, NX)), np.zeros((C, NY, NX - 1)), p, FusionConfig(heads=2, points=2))

    def test_offset_gradient_nonzero_at_init(self, rng, maps):
        Fc, Fr = maps
        cfg = FusionConfig(heads=2, points=2)
        p = init_fusion(rng, C, NY, NX, cfg)
        # offsets only receive signal once the output projection moves off zero
        for k in p:
            if k.endswith("w_out"):
                p[k] = rng.normal(0, 0.1, size=p[k].shape)
        out, cache = hybrid_fuse_forward(Fc, Fr, p, cfg)
        _, _, grads = hybrid_fuse_backward(rng.normal(size=out.shape), cache, cfg)
        for name in ("dsa_cam", "dsa_rad", "dca_c2r", "dca_r2c"):
            assert np.abs(grads[f"{name}.b_off"]).max() > 0
            assert np.abs(grads[f"{name}.w_off"]).max() > 0

    def test_zero_init_output_projection_gets_gradient(self, rng, maps):
        Fc, Fr = maps
        cfg = FusionConfig(heads=2, points=2)
        p = init_fusion(rng, C, NY, NX, cfg)
        out, cache = hybrid_fuse_forward(Fc, Fr, p, cfg)
        _, _, grads = hybrid_fuse_backward(np.ones_like(out), cache, cfg)
        assert all(np.abs(grads[f"{n}.w_out"]).max() > 0 for n in ("dsa_cam", "dca_c2r"))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=10, deadline=None)
    def test_output_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        cfg = FusionConfig(heads=2, points=2)
        p = _perturb_attention(rng, init_fusion(rng, C, NY, NX, cfg))
        out = hybrid_fuse(rng.normal(size=(C, NY, NX)), rng.normal(size=(C, NY, NX)), p, cfg)
        assert out.shape == (C, NY, NX)
        assert np.all(out >= 0)

    def test_gradient(self, rng):
        assert run_case(COMPOSITES["hybrid_fuse"], rng, per_tensor=2) <= 1e-4


class TestCbr:
    def test_negative_preactivation_zero(self, rng):
        p = init_cbr(rng, 2, 3)
        p["b"] = np.full(3, -100.0)
        assert not cbr_block(rng.uniform(0, 1, size=(2, 4, 4)), p).any()

    def test_identity_block(self, rng):
        p = init_cbr(rng, 2, 2)
        p["w"] = np.zeros((2, 2, 3, 3))
        p["w"][0, 0, 1, 1] = p["w"][1, 1, 1, 1] = 1.0
        p["gamma"] = np.full(2, np.sqrt(1.0 + 1e-5))
        x = rng.uniform(0.1, 1, size=(2, 5, 5))
        np.testing.assert_allclose(cbr_block(x, p), x, atol=1e-14)

    def test_gradient(self, rng):
        assert run_case(COMPOSITES["cbr"], rng) <= 1e-6
