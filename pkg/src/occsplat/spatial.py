"""Uniform hash grid for radius queries over point sets, plus Chamfer
distance.  The hash grid backs the density-based center selection; cell
size defaults to one voxel so suppression neighborhoods stay O(1)."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


class HashGrid:
    """Points bucketed by integer cell; neighbor queries scan the cell
    cube covering the query radius."""

    def __init__(self, points, cell_size: float):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.cell_size = float(cell_size)
        self.cells: dict = {}
        keys = np.floor(self.points / self.cell_size).astype(np.int64)
        for i, key in enumerate(map(tuple, keys)):
            self.cells.setdefault(key, []).append(i)
        self._keys = keys

    def query_radius(self, center, radius: float) -> np.ndarray:
        """Indices of points with |p - center| <= radius, ascending."""
        center = np.asarray(center, dtype=np.float64)
        reach = int(np.ceil(radius / self.cell_size))
        base = np.floor(center / self.cell_size).astype(np.int64)
        cand = []
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                for dz in range(-reach, reach + 1):
                    cand.extend(self.cells.get((base[0] + dx, base[1] + dy, base[2] + dz), ()))
        if not cand:
            return np.zeros(0, dtype=np.int64)
        cand = np.asarray(cand, dtype=np.int64)
        d2 = ((self.points[cand] - center) ** 2).sum(axis=1)
        return np.sort(cand[d2 <= radius * radius])

    def neighbor_lists(self, radius: float) -> list:
        """Per-point neighbor index arrays (excluding the point itself)."""
        out = []
        for i in range(self.points.shape[0]):
            nb = self.query_radius(self.points[i], radius)
            out.append(nb[nb != i])
        return out


def chamfer_distance(a, b) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return float("inf")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))
