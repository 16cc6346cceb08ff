"""Voxel grid bookkeeping shared by the scene, splatting, and fusion code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class GridSpec:
    origin: tuple        # minimum corner, meters
    voxel_size: float
    dims: tuple          # (X, Y, Z) voxel counts

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ContractError("voxel_size must be positive")
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ContractError("dims must be three counts >= 1")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))

    @property
    def n_voxels(self) -> int:
        X, Y, Z = self.dims
        return X * Y * Z

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.dims) * self.voxel_size

    def centers(self) -> np.ndarray:
        """Voxel center coordinates, shape (X, Y, Z, 3)."""
        X, Y, Z = self.dims
        ii, jj, kk = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1)
        return np.asarray(self.origin) + (idx + 0.5) * self.voxel_size

    def flat_centers(self) -> np.ndarray:
        return self.centers().reshape(-1, 3)

    def voxel_of(self, points) -> tuple:
        """Integer voxel coordinates and an in-bounds mask for (N, 3) points."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx = np.floor((pts - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=1)
        return idx, ok

    def flat_index(self, idx) -> np.ndarray:
        """x-major flattening: (i, j, k) -> i*Y*Z + j*Z + k."""
        _, Y, Z = self.dims
        idx = np.asarray(idx)
        return idx[..., 0] * (Y * Z) + idx[..., 1] * Z + idx[..., 2]


@dataclass
class OccupancyGrid:
    """Dense per-voxel class labels or logits over a GridSpec.

    values has shape (X, Y, Z) with an integer dtype for labels, or
    (X, Y, Z, num_classes) float for logits.
    """

    spec: GridSpec
    values: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        X, Y, Z = self.spec.dims
        if self.values.ndim == 3:
            if self.values.shape != (X, Y, Z):
                raise ContractError("label grid shape does not match spec dims")
            if not np.issubdtype(self.values.dtype, np.integer):
                raise ContractError("label grid must have an integer dtype")
            if self.values.size and (self.values.min() < 0
                                     or self.values.max() >= self.num_classes):
                raise ContractError("labels out of range")
        elif self.values.ndim == 4:
            if self.values.shape != (X, Y, Z, self.num_classes):
                raise ContractError("logit grid shape does not match spec dims")
            if not np.isfinite(self.values).all():
                raise ContractError("logits must be finite")
            self.values = self.values.astype(np.float64, copy=False)
        else:
            raise ContractError("values must be rank 3 (labels) or 4 (logits)")

    @property
    def is_labels(self) -> bool:
        return self.values.ndim == 3

    def argmax_labels(self) -> "OccupancyGrid":
        if self.is_labels:
            return self
        labels = np.argmax(self.values, axis=-1).astype(np.uint8)
        return OccupancyGrid(self.spec, labels, self.num_classes)
