import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatmark.core import (
    CH_COLOR,
    CH_OPACITY,
    CH_POSITION,
    CH_ROTATION,
    CH_SCALE,
    NUM_CHANNELS,
    Camera,
    Gaussian3D,
    GaussianCloud,
    SplatterImage,
    WatermarkMessage,
    covariance,
    flatten,
    normalize_quaternion,
    quaternion_to_matrix,
    unflatten,
)
from splatmark.errors import CountMismatch


def random_cloud(rng, n):
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianCloud(
        positions=rng.normal(size=(n, 3)).astype(np.float32),
        rotations=quats.astype(np.float32),
        scales=(0.05 + rng.random((n, 3))).astype(np.float32),
        opacities=rng.random(n).astype(np.float32),
        colors=rng.random((n, 3)).astype(np.float32),
    )


class TestQuaternion:
    def test_already_unit_is_untouched(self):
        q = np.array([1.0, 0.0, 0.0, 0.0], dtype=np.float32)
        out = normalize_quaternion(q)
        assert out is q or np.array_equal(out, q)

    def test_near_unit_keeps_bits(self):
        q = np.array([1.0 + 5e-7, 0.0, 0.0, 0.0], dtype=np.float32)
        assert np.array_equal(normalize_quaternion(q), q)

    def test_normalizes_general(self):
        q = np.array([2.0, 0.0, 0.0, 0.0], dtype=np.float32)
        assert np.allclose(normalize_quaternion(q), [1, 0, 0, 0])

    def test_rejects_near_zero(self):
        with pytest.raises(ValueError):
            normalize_quaternion(np.array([1e-9, 0, 0, 0], dtype=np.float32))

    def test_rotation_matrix_orthonormal(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            m = quaternion_to_matrix(q.astype(np.float32))
            assert np.allclose(m @ m.T, np.eye(3), atol=1e-6)
            assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-6)

    def test_identity_quaternion_identity_matrix(self):
        m = quaternion_to_matrix(np.array([1, 0, 0, 0], dtype=np.float32))
        assert np.allclose(m, np.eye(3))


class TestCovariance:
    def test_symmetric_positive_definite(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            g = Gaussian3D(
                position=np.zeros(3, np.float32),
                rotation=q.astype(np.float32),
                scale=(0.1 + rng.random(3)).astype(np.float32),
                opacity=0.5,
                color=np.full(3, 0.5, np.float32),
            )
            cov = covariance(g)
            assert np.array_equal(cov, cov.T)
            assert np.all(np.linalg.eigvalsh(cov) > 0)

    def test_eigenvalues_are_squared_scales_for_identity_rotation(self):
        g = Gaussian3D(
            position=np.zeros(3, np.float32),
            rotation=np.array([1, 0, 0, 0], np.float32),
            scale=np.array([0.5, 1.0, 2.0], np.float32),
            opacity=1.0,
            color=np.zeros(3, np.float32),
        )
        cov = covariance(g)
        assert np.allclose(np.diag(cov), [0.25, 1.0, 4.0], rtol=1e-6)


class TestGaussian3DValidation:
    def test_rejects_bad_opacity(self):
        with pytest.raises(ValueError):
            Gaussian3D(
                position=np.zeros(3, np.float32),
                rotation=np.array([1, 0, 0, 0], np.float32),
                scale=np.ones(3, np.float32),
                opacity=1.5,
                color=np.zeros(3, np.float32),
            )

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            Gaussian3D(
                position=np.zeros(3, np.float32),
                rotation=np.array([1, 0, 0, 0], np.float32),
                scale=np.array([1, 0, 1], np.float32),
                opacity=0.5,
                color=np.zeros(3, np.float32),
            )


class TestFlattenUnflatten:
    @given(
        v=st.integers(min_value=1, max_value=3),
        h=st.integers(min_value=1, max_value=6),
        w=st.integers(min_value=1, max_value=6),
        seed=st.integers(min_value=0, max_value=2**31 - 1),
    )
    @settings(max_examples=30, deadline=None)
    def test_bijection_bit_exact(self, v, h, w, seed):
        rng = np.random.default_rng(seed)
        data = rng.random((v, h, w, NUM_CHANNELS)).astype(np.float32)
        s = SplatterImage(data)
        cloud = flatten(s)
        back = unflatten(cloud, v, h, w)
        assert np.array_equal(back.data, s.data)

    def test_round_trip_from_cloud(self):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng, 24)
        s = unflatten(cloud, 2, 3, 4)
        again = flatten(s)
        for name in ("positions", "rotations", "scales", "opacities", "colors"):
            assert np.array_equal(getattr(again, name), getattr(cloud, name))

    def test_count_mismatch(self):
        rng = np.random.default_rng(4)
        with pytest.raises(CountMismatch):
            unflatten(random_cloud(rng, 5), 2, 2, 2)

    def test_channel_layout(self):
        assert CH_POSITION == slice(0, 3)
        assert CH_COLOR == slice(3, 6)
        assert CH_OPACITY == 6
        assert CH_ROTATION == slice(7, 11)
        assert CH_SCALE == slice(11, 14)
        assert NUM_CHANNELS == 14


class TestSelect:
    def test_boolean_subset(self):
        rng = np.random.default_rng(5)
        cloud = random_cloud(rng, 10)
        keep = rng.random(10) > 0.5
        sub = cloud.select(keep)
        assert sub.count == keep.sum()
        assert np.array_equal(sub.positions, cloud.positions[keep])


class TestCamera:
    def make(self):
        return Camera(
            fx=50.0, fy=50.0, cx=16.0, cy=16.0,
            rotation=np.eye(3), translation=np.array([0.0, 0.0, 2.0]),
            width=32, height=32,
        )

    def test_center_inverts_translation(self):
        cam = self.make()
        assert np.allclose(cam.center, [0, 0, -2])

    def test_optical_axis(self):
        cam = self.make()
        assert np.allclose(cam.optical_axis, [0, 0, 1])

    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(ValueError):
            Camera(
                fx=50.0, fy=50.0, cx=16.0, cy=16.0,
                rotation=np.eye(3) * 1.1, translation=np.zeros(3),
                width=32, height=32,
            )


class TestWatermarkMessage:
    @given(st.integers(min_value=0, max_value=2**31), st.sampled_from([16, 32, 48]))
    @settings(max_examples=50, deadline=None)
    def test_hex_round_trip(self, seed, n):
        msg = WatermarkMessage.random(n, np.random.default_rng(seed))
        assert WatermarkMessage.from_hex(msg.to_hex(), n) == msg

    def test_complement_flips_every_bit(self):
        msg = WatermarkMessage.random(16, np.random.default_rng(0))
        comp = msg.complement()
        assert all(a != b for a, b in zip(msg.bits, comp.bits))

    def test_rejects_unsupported_length(self):
        with pytest.raises(ValueError):
            WatermarkMessage((0, 1, 1))

    def test_as_array(self):
        msg = WatermarkMessage(tuple([1, 0] * 8))
        arr = msg.as_array()
        assert arr.dtype == np.float32
        assert np.array_equal(arr, np.array([1, 0] * 8, np.float32))
