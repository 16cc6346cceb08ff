"""Hybrid Gaussian initialization from a completed point cloud: greedy
density-peak selection with radius suppression, topped up by uniform
coverage samples from the untouched remainder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import ContractError, DataError
from .geometry import quat_identity
from .scene import PointCloud
from .spatial import HashGrid
from .splat import GaussianSet


@dataclass
class InitConfig:
    n_gaussians: int = 512
    density_fraction: float = 0.7       # share of centers from density peaks
    suppression_radius: float = 0.5     # meters; one voxel by default
    scale_range: tuple = (0.20, 1.00)   # uniform per-axis initial scale
    num_classes: int = 6
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.density_fraction <= 1.0:
            raise ContractError("density_fraction must lie in [0, 1]")
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ContractError("scale_range must satisfy 0 < lo <= hi")
        if self.suppression_radius <= 0:
            raise ContractError("suppression_radius must be positive")


def density_select(points, radius: float, n_select: int,
                   return_alive: bool = False):
    """Greedy density peaks: repeatedly take the remaining point with the
    most remaining neighbors within `radius` (ties: lowest index), then
    drop it and those neighbors from candidacy.

    Returned centers are pairwise more than `radius` apart.  With
    return_alive=True also returns the mask of points never selected nor
    suppressed.
    """
    if radius <= 0:
        raise ContractError("radius must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    alive = np.ones(n, dtype=bool)
    chosen: list[int] = []
    if n:
        neighbors = HashGrid(points, cell_size=radius).neighbor_lists(radius)
        counts = np.array([len(nb) for nb in neighbors], dtype=np.int64)
        while len(chosen) < n_select and alive.any():
            masked = np.where(alive, counts, -1)
            pick = int(np.argmax(masked))  # argmax takes the lowest index on ties
            chosen.append(pick)
            removed = [pick] + [j for j in neighbors[pick] if alive[j]]
            alive[removed] = False
            for j in removed:
                live_nb = neighbors[j][alive[neighbors[j]]]
                counts[live_nb] -= 1
    centers = points[chosen] if chosen else np.zeros((0, 3))
    if return_alive:
        return centers, alive
    return centers


def density_select_bruteforce(points, radius: float, n_select: int) -> np.ndarray:
    """O(n^2) reference with the same semantics, for equivalence tests."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    within = d2 <= radius * radius
    np.fill_diagonal(within, False)
    alive = np.ones(n, dtype=bool)
    chosen = []
    while len(chosen) < n_select and alive.any():
        counts = np.where(alive, (within & alive[None, :]).sum(axis=1), -1)
        pick = int(np.argmax(counts))
        chosen.append(pick)
        alive[pick] = False
        alive[within[pick]] = False
    return points[chosen] if chosen else np.zeros((0, 3))


def random_coverage(points, n_samples: int, gen) -> np.ndarray:
    """Uniform draw of centers; without replacement when the pool allows,
    with replacement otherwise."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if n_samples == 0:
        return np.zeros((0, 3))
    if points.shape[0] == 0:
        raise DataError("cannot sample coverage centers from an empty pool")
    replace = n_samples > points.shape[0]
    idx = gen.choice(points.shape[0], size=n_samples, replace=replace)
    return points[idx]


def init_gaussians(cloud: PointCloud, cfg: InitConfig) -> GaussianSet:
    """Centers = density peaks plus uniform coverage of the untouched
    remainder; axis-aligned scales drawn per axis from scale_range,
    identity rotations, zero semantic logits."""
    if len(cloud) == 0:
        raise DataError("cannot initialize Gaussians from an empty cloud")
    pts = cloud.world_points()
    n_density = int(np.floor(cfg.density_fraction * cfg.n_gaussians))
    centers_d, alive = density_select(pts, cfg.suppression_radius, n_density,
                                      return_alive=True)
    n_random = cfg.n_gaussians - centers_d.shape[0]
    pool = pts[alive]
    if pool.shape[0] == 0:
        pool = pts  # everything selected or suppressed: fall back to the cloud
    gen = rngmod.stream(cfg.seed, "init")
    centers_r = random_coverage(pool, n_random, gen)
    mu = np.concatenate([centers_d, centers_r], axis=0)
    n = mu.shape[0]
    scale = gen.uniform(cfg.scale_range[0], cfg.scale_range[1], size=(n, 3))
    rot = np.tile(quat_identity(), (n, 1))
    sem = np.zeros((n, cfg.num_classes))
    return GaussianSet(mu, rot, scale, sem)
