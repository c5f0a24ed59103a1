import numpy as np
import pytest

from pvp.faceparams import (
    FaceParams,
    Image,
    SmoothingConfig,
    load_params,
    region_mask,
    save_params,
    smooth_trajectories,
    stack_features,
    standardize,
    unstack_features,
)

from conftest import rand_params


class TestSmoothing:
    def test_constant_series_preserved(self):
        out = smooth_trajectories([5.0, 5.0, 5.0, 5.0], SmoothingConfig(1.0, 2))
        np.testing.assert_allclose(out, [5, 5, 5, 5], atol=1e-12)

    def test_impulse_center_equals_kernel_center_weight(self):
        # direct evaluation of the normalized Gaussian kernel at offsets -2..2
        w = np.exp(-0.5 * (np.arange(-2, 3) / 1.0) ** 2)
        w = w / w.sum()
        out = smooth_trajectories([0.0, 0.0, 1.0, 0.0, 0.0], SmoothingConfig(1.0, 2))
        assert out[2] == pytest.approx(w[2], abs=1e-12)

    def test_interior_impulse_mass_preserved(self):
        # away from the truncated endpoints the smoothed impulse sums to 1
        series = [0.0] * 4 + [1.0] + [0.0] * 4
        out = smooth_trajectories(series, SmoothingConfig(1.0, 2))
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    def test_length_one_unchanged(self):
        out = smooth_trajectories([3.25], SmoothingConfig(2.0, 6))
        np.testing.assert_allclose(out, [3.25])

    def test_empty_series_raises(self):
        with pytest.raises(ValueError, match="empty input"):
            smooth_trajectories([], SmoothingConfig(1.0, 2))

    def test_non_finite_raises(self):
        with pytest.raises(ValueError, match="non-finite"):
            smooth_trajectories([1.0, np.nan], SmoothingConfig(1.0, 2))

    def test_linearity(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((30, 4))
        y = rng.standard_normal((30, 4))
        cfg = SmoothingConfig(1.5, 5)
        lhs = smooth_trajectories(2.0 * x + 3.0 * y, cfg)
        rhs = 2.0 * smooth_trajectories(x, cfg) + 3.0 * smooth_trajectories(y, cfg)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_stays_within_range(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-2, 7, (50, 3))
        out = smooth_trajectories(x, SmoothingConfig(2.0, 6))
        assert (out >= x.min(axis=0) - 1e-12).all()
        assert (out <= x.max(axis=0) + 1e-12).all()


class TestFeatures:
    def test_single_frame_row(self):
        p = FaceParams(yaw_deg=10, pitch_deg=-5, neck_pose=np.zeros(3),
                       jaw_pose=np.zeros(3), expression=np.zeros(50))
        feats = stack_features([p])
        assert feats.shape == (1, 52)
        np.testing.assert_allclose(feats[0, :2], [10, -5])
        np.testing.assert_allclose(feats[0, 2:], 0)

    def test_identical_frames_identical_rows(self):
        p = rand_params(np.random.default_rng(2))
        feats = stack_features([p, p])
        np.testing.assert_array_equal(feats[0], feats[1])

    def test_distinct_yaw_column(self):
        rng = np.random.default_rng(3)
        ps = [rand_params(rng) for _ in range(3)]
        feats = stack_features(ps)
        assert len(set(feats[:, 0])) == 3

    def test_unstack_roundtrip(self):
        rng = np.random.default_rng(4)
        ps = [rand_params(rng) for _ in range(5)]
        for p, (yaw, pitch, expr) in zip(ps, unstack_features(stack_features(ps))):
            assert yaw == p.yaw_deg
            assert pitch == p.pitch_deg
            np.testing.assert_array_equal(expr, p.expression)


class TestStandardize:
    def test_two_point_column(self):
        z, mean, std, degen = standardize(np.array([[1.0], [3.0]]))
        np.testing.assert_allclose(z.ravel(), [-1, 1])
        assert mean[0] == 2.0 and std[0] == 1.0 and not degen[0]

    def test_constant_column_flagged(self):
        z, _, _, degen = standardize(np.array([[4.0], [4.0], [4.0]]))
        np.testing.assert_allclose(z.ravel(), 0)
        assert degen[0]

    def test_idempotent_on_standardized(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((40, 3))
        z1, _, _, _ = standardize(x)
        z2, _, _, _ = standardize(z1)
        np.testing.assert_allclose(z1, z2, atol=1e-9)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            standardize(np.empty((0, 3)))


class TestRegionMask:
    def test_zero_exactly_on_declared_boxes(self, backend):
        p = rand_params(np.random.default_rng(6))
        m = region_mask(p, (64, 64), backend.face_layout)
        expected = np.ones((64, 64))
        for _, r0, r1, c0, c1 in backend.face_layout.excluded_boxes(p, (64, 64)):
            expected[max(0, r0):r1, max(0, c0):c1] = 0.0
        np.testing.assert_array_equal(m.mask, expected)

    def test_masked_difference_of_identical_images_is_zero(self, backend):
        p = rand_params(np.random.default_rng(7))
        img = backend.synthesize_from_params(p)
        m = region_mask(p, (64, 64), backend.face_layout)
        np.testing.assert_array_equal(m.apply(img), m.apply(img))

    def test_partition_property(self, backend):
        p = rand_params(np.random.default_rng(8))
        m = region_mask(p, (64, 64), backend.face_layout)
        indicator = np.zeros((64, 64))
        for _, r0, r1, c0, c1 in backend.face_layout.excluded_boxes(p, (64, 64)):
            indicator[max(0, r0):r1, max(0, c0):c1] = 1.0
        np.testing.assert_array_equal(m.mask + indicator, np.ones((64, 64)))

    def test_idempotent(self, backend):
        p = rand_params(np.random.default_rng(9))
        m = region_mask(p, (64, 64), backend.face_layout)
        np.testing.assert_array_equal(m.mask * m.mask, m.mask)

    def test_missing_layout_raises(self):
        p = rand_params(np.random.default_rng(10))
        with pytest.raises(ValueError, match="mask source unavailable"):
            region_mask(p, (64, 64), None)


class TestTypesAndIO:
    def test_face_params_validation(self):
        with pytest.raises(ValueError):
            FaceParams(0, 0, np.zeros(2), np.zeros(3), np.zeros(50))
        with pytest.raises(ValueError):
            FaceParams(np.nan, 0, np.zeros(3), np.zeros(3), np.zeros(50))
        with pytest.raises(ValueError):
            FaceParams(0, 0, np.zeros(3), np.zeros(3), np.zeros(49))

    def test_image_validation(self):
        with pytest.raises(ValueError):
            Image(pixels=np.full((4, 4, 3), 1.5))
        with pytest.raises(ValueError):
            Image(pixels=np.zeros((4, 4)))

    def test_pvpf_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        ps = [rand_params(rng) for _ in range(9)]
        path = tmp_path / "seq.pvpf"
        save_params(path, ps)
        loaded = load_params(path)
        assert len(loaded) == 9
        for orig, back in zip(ps, loaded):
            # float32 storage precision
            np.testing.assert_allclose(back.to_vector(), orig.to_vector(), rtol=1e-6, atol=1e-5)

    def test_pvpf_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pvpf"
        path.write_bytes(b"NOPE" + b"\x00" * 10)
        with pytest.raises(ValueError, match="magic"):
            load_params(path)
