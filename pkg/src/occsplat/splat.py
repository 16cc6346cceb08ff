"""Semantic 3D Gaussians and their splatting into voxel occupancy logits.

Each Gaussian contributes exp(-0.5 * mahalanobis^2) * sem to nearby
voxel centers.  splat_occupancy only visits voxels within a per-Gaussian
cutoff radius; brute_force_occupancy is the cutoff-free reference used
by the equivalence tests and is kept on an independent code path
(explicit covariance inverse, no tape).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .geometry import quat_normalize, quat_to_mat
from .grids import GridSpec, OccupancyGrid

EMPTY_PRIOR = 1.0          # fixed logit added to class 0 everywhere
DEFAULT_RADIUS_MULT = 3.0  # cutoff = multiplier * max(scale) per Gaussian


@dataclass
class GaussianSet:
    """Arrays of centers, unit rotation quaternions, positive scales, and
    per-class semantic logits."""

    mu: np.ndarray      # (N, 3)
    rot: np.ndarray     # (N, 4), |q| = 1
    scale: np.ndarray   # (N, 3), > 0
    sem: np.ndarray     # (N, C) raw logits

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(-1, 4)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1, 3)
        self.sem = np.asarray(self.sem, dtype=np.float64)
        if self.sem.ndim != 2 or self.sem.shape[1] < 1:
            raise ContractError("sem must be (N, num_classes)")
        n = self.mu.shape[0]
        if self.rot.shape[0] != n or self.scale.shape[0] != n or self.sem.shape[0] != n:
            raise ContractError("attribute arrays disagree on Gaussian count")
        if n:
            norms = np.linalg.norm(self.rot, axis=1)
            if np.abs(norms - 1.0).max() > 1e-9:
                raise ContractError("rotation quaternions must be unit length")
            if self.scale.min() <= 0:
                raise ContractError("scales must be positive")

    def __len__(self):
        return self.mu.shape[0]

    @property
    def num_classes(self) -> int:
        return self.sem.shape[1]

    def permuted(self, order) -> "GaussianSet":
        return GaussianSet(self.mu[order], self.rot[order],
                           self.scale[order], self.sem[order])


def quat_to_rot(q) -> np.ndarray:
    """Rotation matrix of a quaternion near unit length (renormalized)."""
    return quat_to_mat(quat_normalize(q))


def covariance(q, s) -> np.ndarray:
    """R S S^T R^T with S = diag(s); symmetric positive definite for s > 0."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ContractError("scales must be positive")
    r = quat_to_rot(q)
    return r @ np.diag(s * s) @ r.T


def gaussian_contribution(x, mu, rot, scale, sem) -> np.ndarray:
    """Semantic contribution of one Gaussian at a query position."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    r = quat_to_rot(rot)
    y = r.T @ d / np.asarray(scale, dtype=np.float64)
    return np.exp(-0.5 * float(y @ y)) * np.asarray(sem, dtype=np.float64)


# ---------------------------------------------------------------------------
# tape-aware splatting

def rotation_tensors(q: ad.Tensor) -> ad.Tensor:
    """(N, 4) quaternions -> (N, 3, 3) rotation matrices on the tape."""
    q = ad.l2_normalize(q)
    w = ad.slice_(q, (slice(None), slice(0, 1)))
    x = ad.slice_(q, (slice(None), slice(1, 2)))
    y = ad.slice_(q, (slice(None), slice(2, 3)))
    z = ad.slice_(q, (slice(None), slice(3, 4)))
    two = 2.0
    xx, yy, zz = ad.mul(x, x), ad.mul(y, y), ad.mul(z, z)
    xy, xz, yz = ad.mul(x, y), ad.mul(x, z), ad.mul(y, z)
    wx, wy, wz = ad.mul(w, x), ad.mul(w, y), ad.mul(w, z)
    one = np.ones((q.shape[0], 1))
    rows = [
        ad.sub(one, ad.scale(ad.add(yy, zz), two)),
        ad.scale(ad.sub(xy, wz), two),
        ad.scale(ad.add(xz, wy), two),
        ad.scale(ad.add(xy, wz), two),
        ad.sub(one, ad.scale(ad.add(xx, zz), two)),
        ad.scale(ad.sub(yz, wx), two),
        ad.scale(ad.sub(xz, wy), two),
        ad.scale(ad.add(yz, wx), two),
        ad.sub(one, ad.scale(ad.add(xx, yy), two)),
    ]
    return ad.reshape(ad.concat(rows, axis=1), (q.shape[0], 3, 3))


def _gaussian_voxel_edges(mu, scale, grid: GridSpec, radius_multiplier: float):
    """(gaussian, voxel) pairs with |voxel center - mu_g| <= mult * max(s_g).

    Voxel centers form a regular lattice, so the per-Gaussian index window
    is computed directly instead of querying a spatial index.
    """
    origin = np.asarray(grid.origin)
    vs = grid.voxel_size
    dims = np.asarray(grid.dims)
    g_idx_parts, v_idx_parts = [], []
    radii = radius_multiplier * scale.max(axis=1)
    lo = np.maximum(np.ceil((mu - radii[:, None] - origin) / vs - 0.5), 0).astype(np.int64)
    hi = np.minimum(np.floor((mu + radii[:, None] - origin) / vs - 0.5), dims - 1).astype(np.int64)
    for g in range(mu.shape[0]):
        if np.any(hi[g] < lo[g]):
            continue
        ii, jj, kk = np.meshgrid(np.arange(lo[g, 0], hi[g, 0] + 1),
                                 np.arange(lo[g, 1], hi[g, 1] + 1),
                                 np.arange(lo[g, 2], hi[g, 2] + 1), indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        centers = origin + (idx + 0.5) * vs
        keep = ((centers - mu[g]) ** 2).sum(axis=1) <= radii[g] ** 2
        if not keep.any():
            continue
        flat = grid.flat_index(idx[keep])
        v_idx_parts.append(flat)
        g_idx_parts.append(np.full(flat.shape[0], g, dtype=np.int64))
    if not g_idx_parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(g_idx_parts), np.concatenate(v_idx_parts)


def splat_logits(mu, rot, scale, sem, grid: GridSpec,
                 radius_multiplier: float = DEFAULT_RADIUS_MULT) -> ad.Tensor:
    """Occupancy logits (X*Y*Z, C) from Gaussian attribute tensors.

    Attributes may be tracked tape Tensors (training) or constants
    (inference); the locality structure is recomputed from their current
    values either way.
    """
    if radius_multiplier <= 0:
        raise ContractError("radius_multiplier must be positive")
    mu_t, rot_t = ad._coerce(mu), ad._coerce(rot)
    scale_t, sem_t = ad._coerce(scale), ad._coerce(sem)
    n_vox = grid.n_voxels
    n_cls = sem_t.shape[1]
    prior = np.zeros((n_vox, n_cls))
    prior[:, 0] = EMPTY_PRIOR
    g_idx, v_idx = _gaussian_voxel_edges(mu_t.array, scale_t.array, grid,
                                         radius_multiplier)
    if g_idx.size == 0:
        return ad._coerce(prior)
    centers = grid.flat_centers()[v_idx]
    rots = rotation_tensors(rot_t)
    d = ad.sub(ad.constant(centers), ad.gather_rows(mu_t, g_idx))
    local = ad.bmm(ad.gather_rows(rots, g_idx), ad.reshape(d, (d.shape[0], 3, 1)),
                   transpose_a=True)
    z = ad.div(ad.reshape(local, (d.shape[0], 3)), ad.gather_rows(scale_t, g_idx))
    maha = ad.sum_(ad.mul(z, z), axis=-1, keepdims=True)
    weight = ad.exp(ad.scale(maha, -0.5))
    contrib = ad.mul(ad.gather_rows(sem_t, g_idx),
                     ad.matmul(weight, ad.constant(np.ones((1, n_cls)))))
    summed = ad.segment_sum(contrib, v_idx, n_vox)
    return ad.add(summed, ad.constant(prior))


def splat_occupancy(gset: GaussianSet, grid: GridSpec,
                    radius_multiplier: float = DEFAULT_RADIUS_MULT) -> OccupancyGrid:
    logits = splat_logits(gset.mu, gset.rot, gset.scale, gset.sem, grid,
                          radius_multiplier)
    n_cls = gset.sem.shape[1]
    X, Y, Z = grid.dims
    return OccupancyGrid(grid, logits.array.reshape(X, Y, Z, n_cls), n_cls)


def brute_force_occupancy(gset: GaussianSet, grid: GridSpec) -> OccupancyGrid:
    """Reference: full Gaussians x voxels accumulation, no cutoff.

    Uses the explicit covariance inverse rather than the tape math so
    the two paths stay independent.
    """
    centers = grid.flat_centers()
    n_cls = gset.sem.shape[1] if len(gset) else 1
    logits = np.zeros((centers.shape[0], n_cls))
    logits[:, 0] = EMPTY_PRIOR
    for g in range(len(gset)):
        cov_inv = np.linalg.inv(covariance(gset.rot[g], gset.scale[g]))
        d = centers - gset.mu[g]
        maha = np.einsum("vi,ij,vj->v", d, cov_inv, d)
        logits += np.exp(-0.5 * maha)[:, None] * gset.sem[g]
    X, Y, Z = grid.dims
    return OccupancyGrid(grid, logits.reshape(X, Y, Z, n_cls), n_cls)
