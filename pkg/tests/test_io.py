import numpy as np
import pytest

from splatmark.core import NUM_CHANNELS, GaussianCloud, SplatterImage
from splatmark.errors import BadMagic, DimMismatch, ParseError, TruncatedFile
from splatmark.io import read_ply, read_splatter, write_ply, write_splatter


def random_cloud(rng, n):
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianCloud(
        positions=rng.normal(size=(n, 3)).astype(np.float32),
        rotations=quats.astype(np.float32),
        scales=(0.05 + rng.random((n, 3))).astype(np.float32),
        opacities=(0.01 + 0.98 * rng.random(n)).astype(np.float32),
        colors=rng.random((n, 3)).astype(np.float32),
    )


class TestPly:
    def test_round_trip_within_tolerance(self, tmp_path):
        rng = np.random.default_rng(0)
        cloud = random_cloud(rng, 200)
        path = tmp_path / "cloud.ply"
        write_ply(cloud, path)
        back = read_ply(path)
        assert back.count == cloud.count
        assert np.allclose(back.positions, cloud.positions, atol=1e-6)
        assert np.allclose(back.colors, cloud.colors, atol=1e-6)
        assert np.allclose(back.opacities, cloud.opacities, atol=1e-6)
        assert np.allclose(back.scales, cloud.scales, rtol=1e-6)
        # quaternions match up to normalization (writer stores them raw)
        assert np.allclose(back.rotations, cloud.rotations, atol=1e-6)

    def test_missing_property_raises(self, tmp_path):
        path = tmp_path / "bad.ply"
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            "element vertex 1\nproperty float x\nproperty float y\n"
            "end_header\n"
        )
        path.write_bytes(header.encode() + b"\x00" * 8)
        with pytest.raises(ParseError):
            read_ply(path)

    def test_not_a_ply(self, tmp_path):
        path = tmp_path / "junk.ply"
        path.write_bytes(b"not a ply file at all")
        with pytest.raises(ParseError):
            read_ply(path)

    def test_empty_cloud_round_trip(self, tmp_path):
        path = tmp_path / "empty.ply"
        write_ply(GaussianCloud.empty(), path)
        assert read_ply(path).count == 0


class TestSplt:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        data = rng.random((2, 8, 8, NUM_CHANNELS)).astype(np.float32)
        path = tmp_path / "grid.splt"
        write_splatter(SplatterImage(data), path)
        back = read_splatter(path)
        assert np.array_equal(back.data, data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.splt"
        path.write_bytes(b"XXXX" + b"\x00" * 40)
        with pytest.raises(BadMagic):
            read_splatter(path)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(2)
        data = rng.random((1, 4, 4, NUM_CHANNELS)).astype(np.float32)
        path = tmp_path / "trunc.splt"
        write_splatter(SplatterImage(data), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(TruncatedFile):
            read_splatter(path)

    def test_wrong_channel_count(self, tmp_path):
        import struct

        path = tmp_path / "chan.splt"
        payload = np.zeros(2 * 2 * 13, dtype="<f4").tobytes()
        path.write_bytes(b"SPLT" + struct.pack("<5I", 1, 1, 2, 2, 13) + payload)
        with pytest.raises(DimMismatch):
            read_splatter(path)
