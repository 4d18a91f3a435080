import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecnr.volume import (
    Volume4D,
    ValueRange,
    combine,
    denormalize,
    downsample,
    load_raw,
    normalize,
    residual,
    save_raw,
    upsample,
)

from conftest import random_volume


class TestRawIO:
    def test_load_constant(self, tmp_path):
        p = tmp_path / "v.raw"
        np.full(8, 1.0, dtype="<f4").tofile(p)
        vol = load_raw(p, (2, 2, 2, 1))
        assert vol.dims == (2, 2, 2, 1)
        assert np.all(vol.data == 1.0)

    def test_size_mismatch(self, tmp_path):
        p = tmp_path / "v.raw"
        np.zeros(7, dtype="<f4").tofile(p)
        with pytest.raises(ValueError, match="32"):
            load_raw(p, (2, 2, 2, 1))

    def test_nan_rejected_with_index(self, tmp_path):
        p = tmp_path / "v.raw"
        data = np.zeros(8, dtype="<f4")
        data[5] = np.nan
        data.tofile(p)
        with pytest.raises(ValueError, match="index 5"):
            load_raw(p, (2, 2, 2, 1))

    def test_layout_roundtrip_byte_identical(self, tmp_path):
        p1 = tmp_path / "a.raw"
        p2 = tmp_path / "b.raw"
        rng = np.random.default_rng(0)
        rng.standard_normal(2 * 3 * 4 * 5).astype("<f4").tofile(p1)
        vol = load_raw(p1, (5, 4, 3, 2))
        save_raw(vol, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_flat_layout_x_fastest(self, tmp_path):
        p = tmp_path / "v.raw"
        flat = np.arange(24, dtype="<f4")
        flat.tofile(p)
        vol = load_raw(p, (2, 3, 2, 2))  # x=2, y=3, z=2, t=2
        # index = ((t*z + zi)*y + yi)*x + xi
        assert vol.data[1, 0, 2, 1] == ((1 * 2 + 0) * 3 + 2) * 2 + 1


class TestNormalize:
    def test_endpoints(self):
        vol = Volume4D(np.array([0.0, 10.0]).reshape(1, 1, 1, 2))
        out, vr = normalize(vol)
        assert (vr.lo, vr.hi) == (0.0, 10.0)
        assert np.array_equal(out.data.ravel(), [-1.0, 1.0])

    def test_midpoint(self):
        vol = Volume4D(np.array([0.0, 5.0, 10.0, 10.0]).reshape(1, 1, 1, 4))
        out, _ = normalize(vol)
        assert out.data.ravel()[1] == 0.0

    def test_roundtrip_within_1e6(self):
        vol = random_volume((6, 5, 4, 3), seed=3, lo=-7.5, hi=12.25)
        out, vr = normalize(vol)
        back = denormalize(out, vr)
        assert np.abs(back.data - vol.data).max() <= 1e-6

    def test_constant_volume_flagged(self):
        vol = Volume4D(np.full((2, 2, 2, 2), 3.25))
        out, vr = normalize(vol)
        assert np.all(out.data == 0.0)
        assert vr.degenerate
        assert (vr.lo, vr.hi) == (3.25, 4.25)
        back = denormalize(out, vr)
        assert np.all(back.data == 3.25)

    def test_range_invariant(self):
        with pytest.raises(ValueError):
            ValueRange(2.0, 2.0)


class TestResampling:
    def test_downsample_shape(self):
        vol = random_volume((4, 4, 4, 4))
        assert downsample(vol).dims == (2, 2, 2, 2)

    def test_downsample_constant(self):
        vol = Volume4D(np.full((4, 4, 4, 4), 2.5))
        assert np.all(downsample(vol).data == 2.5)

    def test_downsample_stride(self):
        data = np.zeros((2, 2, 2, 4))
        data[..., :] = [0.0, 1.0, 2.0, 3.0]
        out = downsample(Volume4D(data))
        assert np.array_equal(out.data[0, 0, 0], [0.0, 2.0])

    @pytest.mark.parametrize("axis,dims", [("x", (3, 2, 2, 2)), ("t", (2, 2, 2, 5))])
    def test_odd_axis_named(self, axis, dims):
        x, y, z, t = dims
        vol = Volume4D(np.zeros((t, z, y, x)))
        with pytest.raises(ValueError, match=f"axis {axis}"):
            downsample(vol)

    def test_upsample_midpoints_and_clamp(self):
        data = np.array([0.0, 2.0]).reshape(1, 1, 1, 2)
        out = upsample(Volume4D(data))
        assert np.array_equal(out.data[0, 0, 0], [0.0, 1.0, 2.0, 2.0])

    def test_upsample_constant(self):
        vol = Volume4D(np.full((2, 2, 2, 2), -0.5))
        assert np.all(upsample(vol).data == -0.5)

    def test_down_up_identity_exact(self):
        vol = random_volume((4, 4, 4, 4), seed=11)
        up = upsample(vol)
        assert downsample(up) == vol

    @settings(max_examples=25, deadline=None)
    @given(
        dims=st.tuples(*[st.integers(1, 4)] * 4),
        seed=st.integers(0, 2**31),
    )
    def test_down_up_identity_property(self, dims, seed):
        x, y, z, t = dims
        vol = random_volume((2 * x, 2 * y, 2 * z, 2 * t), seed=seed)
        assert downsample(upsample(vol)) == vol


class TestResidualCombine:
    def test_algebraic_identity_exact(self):
        a = random_volume((4, 3, 2, 2), seed=1)
        b = random_volume((4, 3, 2, 2), seed=2)
        assert combine(residual(a, b), b) == a

    def test_self_residual_zero(self):
        a = random_volume((2, 2, 2, 2), seed=5)
        assert np.all(residual(a, a).data == 0.0)

    def test_constants(self):
        a = Volume4D(np.full((2, 2, 2, 2), 5.0))
        b = Volume4D(np.full((2, 2, 2, 2), 3.0))
        assert np.all(residual(a, b).data == 2.0)

    def test_dim_mismatch(self):
        a = random_volume((2, 2, 2, 2))
        b = random_volume((4, 2, 2, 2))
        with pytest.raises(ValueError, match="mismatch"):
            residual(a, b)
        with pytest.raises(ValueError, match="mismatch"):
            combine(a, b)
