"""On-disk formats: GOWT weight checkpoints, GOPC point clouds (binary
and ASCII), GOCC occupancy grids, and the JSON metrics report.

All binary layouts are little-endian.  Floats stored as f32 (points,
grid headers, logits) round-trip bit-exactly once the in-memory value is
f32-representable; weights are f64 and always round-trip exactly.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np

from .errors import DataError
from .geometry import RigidTransform
from .grids import GridSpec, OccupancyGrid
from .scene import PointCloud

_WEIGHT_MAGIC = b"GOWT"
_CLOUD_MAGIC = b"GOPC"
_GRID_MAGIC = b"GOCC"


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError("unexpected end of file")
    return buf


# ---------------------------------------------------------------------------
# GOWT: named f64 tensors

def save_weights(path, named: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(_WEIGHT_MAGIC)
        fh.write(struct.pack("<I", len(named)))
        for name, arr in named.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_weights(path) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _WEIGHT_MAGIC:
            raise DataError(f"{path}: not a GOWT checkpoint")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8")
            out[name] = data.reshape(dims).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# GOPC: point clouds with pose

def save_cloud_binary(path, cloud: PointCloud) -> None:
    with open(path, "wb") as fh:
        fh.write(_CLOUD_MAGIC)
        fh.write(struct.pack("<I", len(cloud)))
        fh.write(cloud.pose.params().astype("<f4").tobytes())
        rows = np.concatenate([cloud.points, cloud.intensity[:, None]], axis=1)
        fh.write(rows.astype("<f4").tobytes(order="C"))


def load_cloud_binary(path) -> PointCloud:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _CLOUD_MAGIC:
            raise DataError(f"{path}: not a GOPC cloud")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        pose = np.frombuffer(_read_exact(fh, 4 * 7), dtype="<f4").astype(np.float64)
        rows = np.frombuffer(_read_exact(fh, 16 * count), dtype="<f4")
        rows = rows.reshape(count, 4).astype(np.float64)
    return PointCloud(rows[:, :3], np.clip(rows[:, 3], 0.0, 1.0),
                      RigidTransform.from_params(pose))


def save_cloud_ascii(path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# x y z intensity\n")
        fh.write("pose: " + " ".join(repr(float(v)) for v in cloud.pose.params()) + "\n")
        for p, i in zip(cloud.points, cloud.intensity):
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {float(i)!r}\n")


def load_cloud_ascii(path) -> PointCloud:
    pts, inten = [], []
    pose = RigidTransform.identity()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("pose:"):
                vals = [float(v) for v in line[5:].split()]
                pose = RigidTransform.from_params(np.asarray(vals))
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"{path}: expected 'x y z intensity', got {line!r}")
            pts.append([float(v) for v in parts[:3]])
            inten.append(float(parts[3]))
    pts_arr = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    return PointCloud(pts_arr, np.asarray(inten, dtype=np.float64), pose)


def save_cloud(path, cloud: PointCloud) -> None:
    if str(path).endswith((".txt", ".xyz", ".asc")):
        save_cloud_ascii(path, cloud)
    else:
        save_cloud_binary(path, cloud)


def load_cloud(path) -> PointCloud:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == _CLOUD_MAGIC:
        return load_cloud_binary(path)
    return load_cloud_ascii(path)


# ---------------------------------------------------------------------------
# GOCC: occupancy grids

def save_grid(path, grid: OccupancyGrid) -> None:
    X, Y, Z = grid.spec.dims
    mode = 0 if grid.is_labels else 1
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC)
        fh.write(struct.pack("<4I", X, Y, Z, grid.num_classes))
        fh.write(np.asarray(grid.spec.origin, dtype="<f4").tobytes())
        fh.write(struct.pack("<f", grid.spec.voxel_size))
        fh.write(struct.pack("<B", mode))
        if mode == 0:
            fh.write(grid.values.astype(np.uint8).tobytes(order="C"))
        else:
            fh.write(grid.values.astype("<f4").tobytes(order="C"))


def load_grid(path) -> OccupancyGrid:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _GRID_MAGIC:
            raise DataError(f"{path}: not a GOCC grid")
        X, Y, Z, C = struct.unpack("<4I", _read_exact(fh, 16))
        origin = np.frombuffer(_read_exact(fh, 12), dtype="<f4").astype(np.float64)
        (voxel_size,) = struct.unpack("<f", _read_exact(fh, 4))
        (mode,) = struct.unpack("<B", _read_exact(fh, 1))
        spec = GridSpec(tuple(origin), float(voxel_size), (X, Y, Z))
        if mode == 0:
            vals = np.frombuffer(_read_exact(fh, X * Y * Z), dtype=np.uint8)
            values = vals.reshape(X, Y, Z).copy()
        elif mode == 1:
            vals = np.frombuffer(_read_exact(fh, 4 * X * Y * Z * C), dtype="<f4")
            values = vals.reshape(X, Y, Z, C).astype(np.float64)
        else:
            raise DataError(f"{path}: unknown GOCC mode {mode}")
    return OccupancyGrid(spec, values, C)


# ---------------------------------------------------------------------------
# metrics report

def report_json(report: dict) -> str:
    """Canonical serialization: sorted keys, stable float repr."""
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def write_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report_json(report))


def read_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
