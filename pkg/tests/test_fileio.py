import numpy as np
import pytest

from occsplat import fileio
from occsplat.errors import DataError
from occsplat.geometry import RigidTransform
from occsplat.grids import GridSpec, OccupancyGrid
from occsplat.scene import PointCloud


def f32_exact(a):
    return np.asarray(a).astype(np.float32).astype(np.float64)


def random_cloud(seed, n=57):
    rng = np.random.default_rng(seed)
    pose = RigidTransform(f32_exact(rng.normal(size=4)), f32_exact(rng.normal(size=3)))
    return PointCloud(f32_exact(rng.uniform(-10, 10, size=(n, 3))),
                      f32_exact(rng.uniform(0, 1, size=n)), pose)


class TestWeights:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        named = {
            "gaf.codebook": rng.normal(size=(8, 16)),
            "gaf.Wq": rng.normal(size=(16, 16)),
            "denoiser.l1.W": rng.normal(size=(38, 64)),
            "scalar": np.array([3.25]),
            "tensor3": rng.normal(size=(2, 3, 4)),
        }
        path = tmp_path / "w.gowt"
        fileio.save_weights(path, named)
        loaded = fileio.load_weights(path)
        assert list(loaded) == list(named)
        for k in named:
            assert loaded[k].dtype == np.float64
            np.testing.assert_array_equal(loaded[k], np.asarray(named[k], dtype=np.float64))

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.gowt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DataError):
            fileio.load_weights(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "w.gowt"
        fileio.save_weights(path, {"a": np.ones(4)})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(DataError):
            fileio.load_weights(path)


class TestClouds:
    def test_binary_roundtrip_bit_exact(self, tmp_path):
        cloud = random_cloud(1)
        path = tmp_path / "c.gopc"
        fileio.save_cloud_binary(path, cloud)
        loaded = fileio.load_cloud_binary(path)
        np.testing.assert_array_equal(loaded.points, cloud.points)
        np.testing.assert_array_equal(loaded.intensity, cloud.intensity)
        np.testing.assert_array_equal(loaded.pose.params(),
                                      f32_exact(cloud.pose.params()))

    def test_ascii_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        cloud = PointCloud(rng.uniform(-5, 5, size=(23, 3)),
                           rng.uniform(0, 1, size=23),
                           RigidTransform(rng.normal(size=4), rng.normal(size=3)))
        path = tmp_path / "c.txt"
        fileio.save_cloud_ascii(path, cloud)
        loaded = fileio.load_cloud_ascii(path)
        np.testing.assert_array_equal(loaded.points, cloud.points)
        np.testing.assert_array_equal(loaded.intensity, cloud.intensity)
        np.testing.assert_array_equal(loaded.pose.params(), cloud.pose.params())

    def test_ascii_comments_ignored(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("# header\n0.5 1.0 2.0 0.25\n# trailing comment\n")
        loaded = fileio.load_cloud_ascii(path)
        assert len(loaded) == 1
        np.testing.assert_array_equal(loaded.points[0], [0.5, 1.0, 2.0])

    def test_dispatch_by_content(self, tmp_path):
        cloud = random_cloud(3, n=5)
        bpath, apath = tmp_path / "c.gopc", tmp_path / "c.txt"
        fileio.save_cloud(bpath, cloud)
        fileio.save_cloud(apath, cloud)
        np.testing.assert_array_equal(fileio.load_cloud(bpath).points,
                                      fileio.load_cloud(apath).points)

    def test_empty_cloud(self, tmp_path):
        cloud = PointCloud(np.zeros((0, 3)), np.zeros(0))
        path = tmp_path / "e.gopc"
        fileio.save_cloud_binary(path, cloud)
        assert len(fileio.load_cloud_binary(path)) == 0


class TestGrids:
    SPEC = GridSpec((-2.0, -2.0, -0.5), 0.5, (8, 6, 4))

    def test_labels_roundtrip_bit_exact(self, tmp_path):
        labels = np.random.default_rng(4).integers(0, 6, size=(8, 6, 4)).astype(np.uint8)
        grid = OccupancyGrid(self.SPEC, labels, 6)
        path = tmp_path / "g.gocc"
        fileio.save_grid(path, grid)
        loaded = fileio.load_grid(path)
        np.testing.assert_array_equal(loaded.values, labels)
        assert loaded.num_classes == 6
        assert loaded.spec == self.SPEC

    def test_logits_roundtrip_bit_exact(self, tmp_path):
        logits = f32_exact(np.random.default_rng(5).normal(size=(8, 6, 4, 6)))
        grid = OccupancyGrid(self.SPEC, logits, 6)
        path = tmp_path / "g.gocc"
        fileio.save_grid(path, grid)
        loaded = fileio.load_grid(path)
        np.testing.assert_array_equal(loaded.values, logits)
        assert not loaded.is_labels

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.gocc"
        path.write_bytes(b"XXXX" + b"\x00" * 40)
        with pytest.raises(DataError):
            fileio.load_grid(path)


class TestReport:
    def test_canonical_and_readable(self, tmp_path):
        rep = {"iou": 0.5, "miou": 0.25, "per_class_iou": {"1": 0.5},
               "config_hash": "abc", "wall_ms": 12.5}
        path = tmp_path / "r.json"
        fileio.write_report(path, rep)
        assert fileio.read_report(path) == rep
        a = fileio.report_json(rep)
        b = fileio.report_json(dict(reversed(list(rep.items()))))
        assert a == b  # key order independent
