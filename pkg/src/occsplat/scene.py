"""Synthetic worlds, ray-cast LiDAR, sweep aggregation, and view rendering.

Worlds are lists of solid primitives (boxes, spheres, a ground slab).
LiDAR returns the first surface hit per ray, which reproduces the
occlusion bias of real scans: only visible surfaces produce points.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import ContractError
from .geometry import Camera, RigidTransform, quat_from_yaw, quat_to_mat
from .grids import GridSpec, OccupancyGrid

_RAY_EPS = 1e-9
_GROUND_XY = 1e6      # "infinite" half-extent of the ground slab
_SHADE_SCALE = 20.0   # depth shading length scale for rendered views


@dataclass
class Primitive:
    kind: str            # "box" | "sphere" | "ground"
    center: np.ndarray   # meters; for "ground" this is the slab center
    extent: np.ndarray   # box: full side lengths; sphere: (r, r, r); ground: (inf, inf, thickness)
    class_id: int
    yaw: float = 0.0     # rotation about +z, boxes only

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.extent = np.asarray(self.extent, dtype=np.float64)
        if self.kind not in ("box", "sphere", "ground"):
            raise ContractError(f"unknown primitive kind {self.kind!r}")
        if np.any(self.extent <= 0):
            raise ContractError("primitive extents must be positive")
        if self.class_id < 1:
            raise ContractError("class_id 0 is reserved for empty space")

    def half(self) -> np.ndarray:
        if self.kind == "ground":
            return np.array([_GROUND_XY, _GROUND_XY, self.extent[2] / 2])
        return self.extent / 2

    def contains(self, points) -> np.ndarray:
        """Inclusive point-membership test, vectorized over (N, 3) points."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        d = pts - self.center
        if self.kind == "sphere":
            r = self.extent[0]
            return (d * d).sum(axis=1) <= r * r
        if self.kind == "box" and self.yaw != 0.0:
            d = d @ quat_to_mat(quat_from_yaw(self.yaw))  # world->local is R^T; (R^T d)^T = d R
        return np.all(np.abs(d) <= self.half(), axis=1)


def ground_slab(z_top: float, thickness: float, class_id: int) -> Primitive:
    """Solid slab occupying z in (z_top - thickness, z_top], infinite in x/y."""
    center = np.array([0.0, 0.0, z_top - thickness / 2])
    return Primitive("ground", center, np.array([_GROUND_XY, _GROUND_XY, thickness]), class_id)


@dataclass
class World:
    primitives: list
    num_classes: int = 6

    def __post_init__(self):
        for p in self.primitives:
            if p.class_id >= self.num_classes:
                raise ContractError("primitive class_id exceeds the class count")


@dataclass
class PointCloud:
    points: np.ndarray       # (N, 3) meters, in the cloud's own frame
    intensity: np.ndarray    # (N,) in [0, 1]
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.points.shape[0] != self.intensity.shape[0]:
            raise ContractError("points and intensity lengths differ")
        if not np.isfinite(self.points).all():
            raise ContractError("point coordinates must be finite")
        if self.intensity.size and (self.intensity.min() < 0 or self.intensity.max() > 1):
            raise ContractError("intensity must lie in [0, 1]")

    def __len__(self):
        return self.points.shape[0]

    def world_points(self) -> np.ndarray:
        return self.pose.apply(self.points)


@dataclass
class SceneRecipe:
    n_boxes: int = 2
    n_spheres: int = 1
    box_extent: tuple = (0.6, 2.0)       # per-axis side length range, meters
    sphere_radius: tuple = (0.4, 1.0)
    placement: tuple = (-8.0, 8.0)       # xy placement range for object centers
    ground_z: float = 0.0
    ground_thickness: float = 0.5
    ground_class: int = 1

    def validate(self, num_classes: int):
        if self.box_extent[0] <= 0 or self.sphere_radius[0] <= 0:
            raise ContractError("primitive extents must be positive")
        if self.ground_thickness <= 0:
            raise ContractError("ground thickness must be positive")
        if num_classes < 3:
            raise ContractError("need at least one non-ground semantic class")


@dataclass
class LidarPattern:
    n_azimuth: int = 96
    elevations: tuple = (-0.55, -0.38, -0.24, -0.12, -0.02, 0.08)  # radians
    max_range: float = 40.0


def generate_scene(seed: int, recipe: SceneRecipe, num_classes: int = 6,
                   grid: GridSpec | None = None) -> World:
    """Deterministic world from a seed: one ground slab plus random boxes
    and spheres with classes drawn from 2..num_classes-1."""
    recipe.validate(num_classes)
    if grid is not None:
        lo, hi = recipe.placement
        if lo < grid.origin[0] or hi > grid.upper[0] or lo < grid.origin[1] or hi > grid.upper[1]:
            raise ContractError("recipe placement bounds exceed the grid extent")
    gen = rngmod.stream(seed, "scene")
    prims = [ground_slab(recipe.ground_z, recipe.ground_thickness, recipe.ground_class)]
    object_classes = list(range(2, num_classes))
    for _ in range(recipe.n_boxes):
        ext = gen.uniform(recipe.box_extent[0], recipe.box_extent[1], size=3)
        xy = gen.uniform(recipe.placement[0], recipe.placement[1], size=2)
        center = np.array([xy[0], xy[1], recipe.ground_z + ext[2] / 2])
        yaw = gen.uniform(0, 2 * np.pi)
        cls = int(gen.choice(object_classes))
        prims.append(Primitive("box", center, ext, cls, yaw=yaw))
    for _ in range(recipe.n_spheres):
        r = gen.uniform(recipe.sphere_radius[0], recipe.sphere_radius[1])
        xy = gen.uniform(recipe.placement[0], recipe.placement[1], size=2)
        center = np.array([xy[0], xy[1], recipe.ground_z + r])
        cls = int(gen.choice(object_classes))
        prims.append(Primitive("sphere", center, np.array([r, r, r]), cls))
    return World(prims, num_classes)


def rasterize_ground_truth(world: World, grid: GridSpec) -> OccupancyGrid:
    """Label each voxel by the last-listed primitive containing its center."""
    centers = grid.flat_centers()
    labels = np.zeros(centers.shape[0], dtype=np.uint8)
    for prim in world.primitives:
        labels[prim.contains(centers)] = prim.class_id
    return OccupancyGrid(grid, labels.reshape(grid.dims), world.num_classes)


# ---------------------------------------------------------------------------
# ray casting

def _ray_box(origins, dirs, prim: Primitive):
    """Slab-method entry distance per ray; rays starting inside hit the exit."""
    if prim.kind == "box" and prim.yaw != 0.0:
        rot = quat_to_mat(quat_from_yaw(prim.yaw))
        o = (origins - prim.center) @ rot
        d = dirs @ rot
    else:
        o = origins - prim.center
        d = dirs
    half = prim.half()
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    lo = np.fmin(t1, t2)
    hi = np.fmax(t1, t2)
    # parallel-axis rays: the slab constrains only if the origin is inside it
    par = np.abs(d) < 1e-15
    inside = np.abs(o) <= half
    lo[par] = np.where(inside[par], -np.inf, np.inf)
    hi[par] = np.where(inside[par], np.inf, -np.inf)
    tmin = lo.max(axis=1)
    tmax = hi.min(axis=1)
    t = np.where(tmin > _RAY_EPS, tmin, tmax)  # inside -> first boundary crossing
    t = np.where((tmax >= tmin) & (t > _RAY_EPS), t, np.inf)
    return t


def _ray_sphere(origins, dirs, prim: Primitive):
    oc = origins - prim.center
    r = prim.extent[0]
    b = (oc * dirs).sum(axis=1)
    c = (oc * oc).sum(axis=1) - r * r
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t_near = -b - sq
    t_far = -b + sq
    t = np.where(t_near > _RAY_EPS, t_near, t_far)
    return np.where(ok & (t > _RAY_EPS), t, np.inf)


def first_hits(world: World, origins, dirs, max_range: float):
    """First primitive hit per ray.

    Returns (t, prim_index, hit_mask); equal distances resolve to the
    later-listed primitive, matching the rasterization tie-break.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64),
                              np.asarray(dirs).shape).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    best_t = np.full(origins.shape[0], np.inf)
    best_i = np.full(origins.shape[0], -1, dtype=np.int64)
    for i, prim in enumerate(world.primitives):
        if prim.kind == "sphere":
            t = _ray_sphere(origins, dirs, prim)
        else:
            t = _ray_box(origins, dirs, prim)
        better = t <= best_t
        best_t = np.where(better, t, best_t)
        best_i = np.where(better, i, best_i)
    hit = np.isfinite(best_t) & (best_t <= max_range)
    return best_t, best_i, hit


def simulate_lidar(world: World, sensor_pose: RigidTransform,
                   pattern: LidarPattern) -> PointCloud:
    """One scan: first hit per ray, points in the sensor frame."""
    if pattern.max_range <= 0:
        raise ContractError("max_range must be positive")
    az = np.arange(pattern.n_azimuth) * (2 * np.pi / pattern.n_azimuth)
    el = np.asarray(pattern.elevations, dtype=np.float64)
    a, e = np.meshgrid(az, el, indexing="ij")
    dirs_sensor = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a),
                            np.sin(e)], axis=-1).reshape(-1, 3)
    dirs_world = sensor_pose.rotate(dirs_sensor)
    t, _, hit = first_hits(world, sensor_pose.t, dirs_world, pattern.max_range)
    pts = dirs_sensor[hit] * t[hit, None]
    intensity = np.exp(-t[hit] / pattern.max_range)
    return PointCloud(pts, intensity, sensor_pose)


def aggregate_sweeps(clouds) -> PointCloud:
    """Transform every sweep to the world frame and concatenate."""
    if not clouds:
        return PointCloud(np.zeros((0, 3)), np.zeros(0))
    pts = np.concatenate([c.world_points() for c in clouds], axis=0)
    inten = np.concatenate([c.intensity for c in clouds], axis=0)
    return PointCloud(pts, inten, RigidTransform.identity())


# ---------------------------------------------------------------------------
# rendering

def class_palette(num_classes: int) -> np.ndarray:
    """Fixed RGB palette; class 0 (empty) is black."""
    colors = [np.zeros(3)]
    for c in range(1, num_classes):
        hue = (c - 1) / max(num_classes - 1, 1)
        colors.append(np.array(colorsys.hsv_to_rgb(hue, 0.85, 1.0)))
    return np.stack(colors)


def render_views(world: World, cameras, stride_divisor: int = 32):
    """Per-pixel ray cast; color = class palette shaded by depth, misses black."""
    palette = class_palette(world.num_classes)
    images = []
    for cam in cameras:
        W, H = cam.image_size
        if W % stride_divisor or H % stride_divisor:
            raise ContractError(f"image dims must be divisible by {stride_divisor}")
        dirs = cam.ray_directions().reshape(-1, 3)
        t, idx, hit = first_hits(world, cam.position, dirs, np.inf)
        cls = np.zeros(dirs.shape[0], dtype=np.int64)
        cls[hit] = np.array([world.primitives[i].class_id for i in idx[hit]])
        shade = np.where(hit, np.exp(-np.where(hit, t, 0.0) / _SHADE_SCALE), 0.0)
        img = palette[cls] * shade[:, None]
        images.append(img.reshape(H, W, 3))
    return images


def default_cameras(num: int = 4, image_size=(256, 256), height: float = 1.6,
                    radius: float = 0.5, focal: float = 128.0):
    """Outward-facing ring of pinhole cameras around the grid center."""
    cams = []
    W, H = image_size
    for i in range(num):
        yaw = 2 * np.pi * i / num
        fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        pos = fwd * radius + np.array([0.0, 0.0, height])
        # camera frame: +z forward, +x right, +y down (right-handed)
        z = fwd
        x = np.cross(z, np.array([0.0, 0.0, 1.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot_c2w = np.stack([x, y, z], axis=1)
        q = _mat_to_quat(rot_c2w)
        cam_to_world = RigidTransform(q, pos)
        cams.append(Camera(focal, focal, W / 2, H / 2, cam_to_world.inverse(), (W, H)))
    return cams


def _mat_to_quat(m) -> np.ndarray:
    """Inverse of quat_to_mat for proper rotations."""
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        return np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                         (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    i = int(np.argmax([m[0, 0], m[1, 1], m[2, 2]]))
    if i == 0:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        return np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                         (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    if i == 1:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        return np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                         0.25 * s, (m[1, 2] + m[2, 1]) / s])
    s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
    return np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                     (m[1, 2] + m[2, 1]) / s, 0.25 * s])
