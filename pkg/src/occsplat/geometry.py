"""Quaternions, rigid transforms, and pinhole cameras."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ContractError("zero quaternion")
    return q / n


def quat_to_mat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z). Assumes |q| = 1."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_yaw(yaw: float) -> np.ndarray:
    return np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class RigidTransform:
    """p_world = R(q) @ p_local + t, quaternion stored (w, x, y, z)."""

    q: np.ndarray = field(default_factory=quat_identity)
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ContractError("zero quaternion")
        # near-unit quaternions are kept bit-exact so poses survive f32
        # file round-trips; larger deviations are normalized
        self.q = q if abs(n - 1.0) <= 1e-6 else q / n
        self.t = np.asarray(self.t, dtype=np.float64)

    @property
    def rot(self) -> np.ndarray:
        return quat_to_mat(self.q)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rot.T + self.t

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rot.T

    def inverse(self) -> "RigidTransform":
        w, x, y, z = self.q
        q_inv = np.array([w, -x, -y, -z])
        return RigidTransform(q_inv, -(quat_to_mat(q_inv) @ self.t))

    def params(self) -> np.ndarray:
        """(tx, ty, tz, qw, qx, qy, qz) — the on-disk pose layout."""
        return np.concatenate([self.t, self.q])

    @staticmethod
    def from_params(p) -> "RigidTransform":
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (7,):
            raise ContractError(f"pose needs 7 values, got shape {p.shape}")
        return RigidTransform(p[3:7], p[0:3])

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()


@dataclass
class Camera:
    """Pinhole camera; extrinsics map world coordinates to camera frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: RigidTransform
    image_size: tuple  # (W, H) pixels

    def __post_init__(self):
        W, H = self.image_size
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")
        if not (0 <= self.cx < W and 0 <= self.cy < H):
            raise ContractError("principal point must lie inside the image")

    @property
    def position(self) -> np.ndarray:
        return self.extrinsics.inverse().t

    def ray_directions(self) -> np.ndarray:
        """Unit world-frame ray directions through each pixel center, (H, W, 3)."""
        W, H = self.image_size
        u, v = np.meshgrid(np.arange(W), np.arange(H))
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy,
                      np.ones_like(u, dtype=np.float64)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        c2w = self.extrinsics.inverse().rot
        return d @ c2w.T
