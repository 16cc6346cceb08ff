import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from occsplat import rng as rngmod
from occsplat.errors import ContractError, DataError
from occsplat.gaussian_init import (InitConfig, density_select,
                                    density_select_bruteforce, init_gaussians,
                                    random_coverage)
from occsplat.scene import PointCloud


def cloud_of(points):
    points = np.asarray(points, dtype=np.float64)
    return PointCloud(points, np.full(len(points), 0.5))


class TestDensitySelect:
    def test_densest_cluster_wins(self):
        rng = np.random.default_rng(0)
        big = rng.normal(scale=0.05, size=(10, 3))
        small = rng.normal(scale=0.05, size=(3, 3)) + 5.0
        pts = np.concatenate([big, small])
        centers = density_select(pts, radius=0.5, n_select=1)
        assert np.linalg.norm(centers[0]) < 1.0  # from the 10-point cluster

    def test_mutual_suppression_yields_one_center(self):
        pts = np.random.default_rng(1).normal(scale=0.01, size=(12, 3))
        centers = density_select(pts, radius=0.5, n_select=5)
        assert centers.shape == (1, 3)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_bruteforce_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-3, 3, size=(200, 3))
        fast = density_select(pts, radius=0.6, n_select=40)
        slow = density_select_bruteforce(pts, radius=0.6, n_select=40)
        np.testing.assert_array_equal(fast, slow)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_pairwise_distance_exceeds_radius(self, seed):
        pts = np.random.default_rng(seed).uniform(-2, 2, size=(80, 3))
        centers = density_select(pts, radius=0.7, n_select=30)
        if centers.shape[0] > 1:
            d = np.linalg.norm(centers[:, None] - centers[None, :], axis=-1)
            np.fill_diagonal(d, np.inf)
            assert d.min() > 0.7

    def test_bad_radius_rejected(self):
        with pytest.raises(ContractError):
            density_select(np.zeros((3, 3)), radius=0.0, n_select=1)


class TestRandomCoverage:
    def test_full_draw_is_permutation(self):
        pts = np.random.default_rng(2).normal(size=(20, 3))
        out = random_coverage(pts, 20, rngmod.stream(0, "t"))
        assert out.shape == (20, 3)
        assert {tuple(p) for p in out} == {tuple(p) for p in pts}

    def test_zero_draws(self):
        assert random_coverage(np.zeros((5, 3)), 0, rngmod.stream(0, "t")).shape == (0, 3)

    def test_oversampling_uses_replacement(self):
        pts = np.random.default_rng(3).normal(size=(4, 3))
        out = random_coverage(pts, 10, rngmod.stream(1, "t"))
        assert out.shape == (10, 3)

    def test_octant_uniformity_chi_square(self):
        gen = rngmod.stream(7, "uniformity")
        pts = gen.uniform(-1, 1, size=(40_000, 3))
        draws = random_coverage(pts, 10_000, rngmod.stream(8, "draw"))
        octant = ((draws[:, 0] > 0).astype(int) * 4
                  + (draws[:, 1] > 0).astype(int) * 2
                  + (draws[:, 2] > 0).astype(int))
        counts = np.bincount(octant, minlength=8)
        assert chisquare(counts).pvalue > 0.01

    def test_empty_pool_rejected(self):
        with pytest.raises(DataError):
            random_coverage(np.zeros((0, 3)), 3, rngmod.stream(0, "t"))


class TestInitGaussians:
    def _cloud(self, seed=0, n=800):
        return cloud_of(np.random.default_rng(seed).uniform(-8, 8, size=(n, 3)))

    def test_pure_random_when_density_fraction_zero(self):
        cfg = InitConfig(n_gaussians=64, density_fraction=0.0, seed=1)
        gs = init_gaussians(self._cloud(), cfg)
        assert len(gs) == 64

    def test_split_counts(self):
        cloud = self._cloud(1, n=5000)
        cfg = InitConfig(n_gaussians=512, density_fraction=0.7,
                         suppression_radius=0.3, seed=2)
        gs = init_gaussians(cloud, cfg)
        assert len(gs) == 512
        centers_d = density_select(cloud.points, 0.3, int(0.7 * 512))
        assert centers_d.shape[0] == 358  # 358 density + 154 random
        np.testing.assert_array_equal(gs.mu[:358], centers_d)

    def test_scales_within_range(self):
        gs = init_gaussians(self._cloud(2), InitConfig(n_gaussians=256, seed=3))
        assert gs.scale.min() >= 0.20
        assert gs.scale.max() <= 1.00

    def test_identity_rotations_zero_semantics(self):
        gs = init_gaussians(self._cloud(3), InitConfig(n_gaussians=32, seed=4))
        np.testing.assert_array_equal(gs.rot, np.tile([1.0, 0, 0, 0], (32, 1)))
        np.testing.assert_array_equal(gs.sem, np.zeros((32, 6)))

    def test_no_duplicate_centers(self):
        gs = init_gaussians(self._cloud(4), InitConfig(n_gaussians=128, seed=5))
        assert len({tuple(m) for m in gs.mu}) == 128

    def test_deterministic_under_seed(self):
        cloud = self._cloud(5)
        cfg = InitConfig(n_gaussians=96, seed=6)
        a = init_gaussians(cloud, cfg)
        b = init_gaussians(cloud, cfg)
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.scale, b.scale)

    def test_empty_cloud_rejected(self):
        with pytest.raises(DataError):
            init_gaussians(PointCloud(np.zeros((0, 3)), np.zeros(0)), InitConfig())

    def test_random_centers_come_from_unsuppressed_pool(self):
        cloud = self._cloud(6, n=400)
        cfg = InitConfig(n_gaussians=64, density_fraction=0.5,
                         suppression_radius=0.8, seed=7)
        gs = init_gaussians(cloud, cfg)
        _, alive = density_select(cloud.points, 0.8, 32, return_alive=True)
        pool = {tuple(p) for p in cloud.points[alive]}
        for center in gs.mu[32:]:
            assert tuple(center) in pool
