"""File format round trips and malformed-input diagnostics."""

import numpy as np
import pytest

from dronesight.errors import DataError
from dronesight.geometry import IntensityImage, Pose
from dronesight.io import (
    DetectionRow,
    read_depth_raster,
    read_detections,
    read_features,
    read_localizations,
    read_pgm,
    read_poses,
    write_depth_raster,
    write_detections,
    write_features,
    write_localizations,
    write_pgm,
    write_poses,
)


def _random_pose(rng):
    return Pose.exp(rng.normal(scale=0.4, size=6))


class TestPoses:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        poses = [Pose.identity()] + [_random_pose(rng) for _ in range(5)]
        path = tmp_path / "poses.txt"
        write_poses(path, poses)
        back = read_poses(path)
        assert len(back) == len(poses)
        for a, b in zip(poses, back):
            assert np.allclose(a.rotation, b.rotation, atol=1e-8)
            assert np.allclose(a.translation, b.translation, atol=1e-8)

    def test_line_format(self, tmp_path):
        path = tmp_path / "poses.txt"
        write_poses(path, [Pose.identity()])
        fields = path.read_text().split("\n")[0].split()
        assert len(fields) == 13
        assert fields[0] == "0"

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "poses.txt"
        path.write_text("0 1 0 0 0 1 0 0 0 1 0 0 0\n1 bad line\n")
        with pytest.raises(DataError, match="2"):
            read_poses(path)


class TestPgm:
    def test_round_trip_within_quantization(self, tmp_path):
        rng = np.random.default_rng(1)
        img = IntensityImage(rng.uniform(0, 1, (20, 30)))
        path = tmp_path / "img.pgm"
        write_pgm(path, img)
        back = read_pgm(path)
        assert back.values.shape == (20, 30)
        assert np.max(np.abs(back.values - img.values)) <= 0.5 / 255 + 1e-12

    def test_binary_header(self, tmp_path):
        img = IntensityImage(np.zeros((4, 6)))
        path = tmp_path / "img.pgm"
        write_pgm(path, img)
        raw = path.read_bytes()
        assert raw.startswith(b"P5")
        assert b"6 4" in raw

    def test_rejects_non_p5(self, tmp_path):
        path = tmp_path / "img.pgm"
        path.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
        with pytest.raises(DataError):
            read_pgm(path)


class TestDetections:
    def test_round_trip_with_embeddings(self, tmp_path):
        rows = [
            DetectionRow(0, -1, 10.0, 20.0, 30.0, 40.0, 0.9, 1,
                         np.array([0.1, 0.2, 0.3])),
            DetectionRow(1, -1, 11.5, 21.5, 30.0, 40.0, 0.8, 1,
                         np.array([0.4, 0.5, 0.6])),
        ]
        path = tmp_path / "dets.csv"
        write_detections(path, rows)
        back = read_detections(path)
        assert len(back) == 2
        assert back[0].frame == 0 and back[0].track_id == -1
        assert back[1].x == pytest.approx(11.5)
        np.testing.assert_allclose(back[0].embedding, [0.1, 0.2, 0.3])

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "dets.csv"
        path.write_text("0,-1,1,2,3,4,0.5,0\n0,-1,oops\n")
        with pytest.raises(DataError, match="2"):
            read_detections(path)

    def test_empty_file_gives_empty_list(self, tmp_path):
        path = tmp_path / "dets.csv"
        path.write_text("")
        assert read_detections(path) == []


class TestFeatures:
    def test_round_trip(self, tmp_path):
        class F:
            def __init__(self, x, y, d):
                self.x, self.y, self.descriptor = x, y, d

        feats = [[F(1.0, 2.0, np.array([0.5, 0.25])),
                  F(3.0, 4.0, np.array([0.75, 0.125]))]]
        path = tmp_path / "features.txt"
        write_features(path, feats)
        back = read_features(path)
        assert set(back) == {0}
        assert back[0][0][0] == pytest.approx(1.0)
        np.testing.assert_allclose(back[0][1][2], [0.75, 0.125])

    def test_descriptor_length_enforced(self, tmp_path):
        path = tmp_path / "features.txt"
        path.write_text("0 1 2 0.5 0.5\n0 3 4 0.5\n")
        with pytest.raises(DataError):
            read_features(path)


class TestLocalizations:
    def test_round_trip(self, tmp_path):
        rows = [(0, 1, np.array([1.0, 2.0, 3.0]), 3.7416573867739413)]
        path = tmp_path / "loc.csv"
        write_localizations(path, rows)
        back = read_localizations(path)
        frame, track_id, point, dist = back[0]
        assert frame == 0 and track_id == 1
        np.testing.assert_allclose(point, [1.0, 2.0, 3.0])
        assert dist == pytest.approx(np.sqrt(14.0))
        assert path.read_text().startswith("frame,track_id,x,y,z,distance_m")


class TestDepthRaster:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        depth = rng.uniform(1, 5, (6, 8)).astype(np.float32).astype(float)
        depth[0, 0] = 0.0
        var = np.full((6, 8), 0.01)
        path = tmp_path / "d.dpth"
        write_depth_raster(path, depth, var)
        d2, v2 = read_depth_raster(path)
        assert d2.shape == (6, 8)
        np.testing.assert_allclose(d2, depth, atol=1e-6)
        np.testing.assert_allclose(v2, var, atol=1e-6)

    def test_header_magic_and_layout(self, tmp_path):
        depth = np.ones((2, 3))
        var = np.full((2, 3), 0.5)
        path = tmp_path / "d.dpth"
        write_depth_raster(path, depth, var)
        raw = path.read_bytes()
        assert raw[:4] == b"DPTH"
        # u32 w, u32 h, then 2*3 float32 depths + 2*3 float32 variances
        assert len(raw) == 4 + 4 + 4 + 6 * 4 + 6 * 4
        assert int.from_bytes(raw[4:8], "little") == 3
        assert int.from_bytes(raw[8:12], "little") == 2

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.dpth"
        path.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(DataError):
            read_depth_raster(path)
