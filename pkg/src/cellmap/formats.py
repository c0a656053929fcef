"""On-disk formats: the binary cellmap file, KITTI-style datasets, trajectories and PLY export.

Cellmap file layout (all little-endian)::

    "CMAP"  u16 version  u32 n_sp  u32 cell_count
    per cell:
        u32 anchor_frame
        7 x f64 pose (qw, qx, qy, qz, tx, ty, tz)
        u32 entry_count
        entry_count x u32      ascending lattice indices
        entry_count x 4 x f32  (d, nx, ny, nz)

The lattice itself is never stored; it is rebuilt from ``n_sp``.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.spatial.transform import Rotation

from cellmap.cell_gen import Cell
from cellmap.cell_map import CellMap
from cellmap.core_geom import PoseSE3, Scan, voxel_downsample
from cellmap.errors import FormatError, IoError, LatticeMismatch, MissingPose
from cellmap.lattice import Lattice
from cellmap.metrics import Trajectory

MAGIC = b"CMAP"
VERSION = 1
_HEADER = struct.Struct("<4sHII")
_CELL_HEAD = struct.Struct("<I7dI")
HEADER_SIZE = _HEADER.size  # 14
CELL_OVERHEAD = _CELL_HEAD.size  # 64
ENTRY_SIZE = 4 + 16

# Elevation correction commonly applied to KITTI HDL-64 scans.
KITTI_VERTICAL_ANGLE_DEG = 0.205


# -- cellmap binary format ------------------------------------------------------

def serialized_size(cmap: CellMap) -> int:
    return HEADER_SIZE + sum(CELL_OVERHEAD + ENTRY_SIZE * len(c) for c in cmap.cells)


def _u32(value, what: str) -> int:
    value = int(value)
    if not 0 <= value < 2**32:
        raise FormatError(f"{what} {value} does not fit in u32")
    return value


def cellmap_to_bytes(cmap: CellMap) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, _u32(cmap.n_sp, "n_sp"), _u32(len(cmap), "cell count"))]
    for cell, pose in zip(cmap.cells, cmap.poses):
        parts.append(
            _CELL_HEAD.pack(
                _u32(cell.anchor_frame, "anchor frame"), *pose.quat, *pose.translation, len(cell)
            )
        )
        parts.append(cell.indices.astype("<u4").tobytes())
        planes = np.column_stack([cell.distances, cell.normals]).astype("<f4")
        parts.append(planes.tobytes())
    return b"".join(parts)


def cellmap_from_bytes(data: bytes) -> CellMap:
    buf = memoryview(data)
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"file too short for header ({len(buf)} bytes)")
    magic, version, n_sp, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if n_sp == 0:
        raise FormatError("n_sp is zero")
    off = HEADER_SIZE
    cells, poses = [], []
    for k in range(count):
        if off + CELL_OVERHEAD > len(buf):
            raise FormatError(f"truncated in header of cell {k}")
        anchor, *pq, m = _CELL_HEAD.unpack_from(buf, off)
        off += CELL_OVERHEAD
        end = off + ENTRY_SIZE * m
        if end > len(buf):
            raise FormatError(f"truncated in entries of cell {k}")
        idx = np.frombuffer(buf, "<u4", m, off).astype(np.int64)
        planes = np.frombuffer(buf, "<f4", 4 * m, off + 4 * m).reshape(m, 4).astype(float)
        off = end
        if m and (np.any(np.diff(idx) <= 0) or idx[-1] >= n_sp):
            raise FormatError(f"cell {k}: lattice indices not ascending or out of range")
        if not np.all(np.isfinite(planes)):
            raise FormatError(f"cell {k}: non-finite plane parameters")
        try:
            poses.append(PoseSE3(np.array(pq[:4]), np.array(pq[4:])))
        except ValueError as e:
            raise FormatError(f"cell {k}: bad pose ({e})") from None
        cells.append(Cell(idx, planes[:, 0], planes[:, 1:], n_sp, anchor))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last cell")
    return CellMap(n_sp, cells, poses)


def save_cellmap(cmap: CellMap, path) -> int:
    """Write ``cmap`` to ``path``; returns the number of bytes written."""
    data = cellmap_to_bytes(cmap)
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    return len(data)


def load_cellmap(path) -> CellMap:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    return cellmap_from_bytes(data)


@dataclass(frozen=True)
class CellMapFile:
    """Header-level summary of a cellmap file."""

    n_sp: int
    cell_count: int
    entry_counts: tuple[int, ...]
    size: int

    @property
    def total_entries(self) -> int:
        return sum(self.entry_counts)


def inspect_cellmap(path) -> CellMapFile:
    cmap = load_cellmap(path)
    return CellMapFile(cmap.n_sp, len(cmap), tuple(len(c) for c in cmap.cells), os.path.getsize(path))


# -- reconstruction ---------------------------------------------------------------

def _disk_offsets(rings: int) -> np.ndarray:
    """Unit-disk sample pattern: the centre plus ``rings`` concentric rings."""
    pts = [(0.0, 0.0)]
    for r in range(1, rings + 1):
        n = 6 * r
        a = np.arange(n) * (2.0 * math.pi / n)
        rad = r / rings
        pts.extend(zip(rad * np.cos(a), rad * np.sin(a)))
    return np.array(pts)


def reconstruct_cell_points(
    cell: Cell, lattice: Lattice, densify: bool = False, rings: int = 2
) -> tuple[np.ndarray, np.ndarray]:
    """Points and normals (anchor frame) representing the planes of ``cell``.

    Without ``densify`` each entry yields its anchor point ``d * u``. With it,
    each entry yields a small disk on its plane centred on that point, of
    radius ``lattice.mean_spacing * d``.
    """
    if cell.n_sp != lattice.n_sp:
        raise LatticeMismatch(f"cell built on {cell.n_sp} directions, lattice has {lattice.n_sp}")
    u = lattice.directions[cell.indices]
    centers = cell.distances[:, None] * u
    normals = cell.normals
    if not densify or len(cell) == 0:
        return centers, normals.copy()
    # Orthonormal tangent basis per plane.
    helper = np.where(np.abs(normals[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    e1 = np.cross(normals, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(normals, e1)
    radius = lattice.mean_spacing * cell.distances
    disk = _disk_offsets(rings)
    pts = (
        centers[:, None, :]
        + radius[:, None, None] * (disk[None, :, :1] * e1[:, None, :] + disk[None, :, 1:] * e2[:, None, :])
    )
    return pts.reshape(-1, 3), np.repeat(normals, len(disk), axis=0)


def reconstruct_map_points(cmap: CellMap, lattice: Lattice, densify: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """World-frame points and normals of the whole map."""
    pts, nrm = [np.zeros((0, 3))], [np.zeros((0, 3))]
    for cell, pose in zip(cmap.cells, cmap.poses):
        p, n = reconstruct_cell_points(cell, lattice, densify)
        pts.append(pose.apply(p))
        nrm.append(n @ pose.rotation.T)
    return np.vstack(pts), np.vstack(nrm)


def write_ply(path, points, normals=None) -> None:
    """ASCII PLY point cloud, with per-point normals when given."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    cols = ["x", "y", "z"]
    data = points
    if normals is not None:
        normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        if len(normals) != len(points):
            raise ValueError("points and normals differ in length")
        cols += ["nx", "ny", "nz"]
        data = np.hstack([points, normals])
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}"]
    header += [f"property float {c}" for c in cols]
    header.append("end_header")
    try:
        with open(path, "w") as f:
            f.write("\n".join(header) + "\n")
            np.savetxt(f, data, fmt="%.6f")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read an ASCII PLY written by :func:`write_ply`."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise FormatError("not a PLY file")
        props, n = [], None
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise FormatError("only ASCII PLY is supported")
            if tok[:2] == ["element", "vertex"]:
                n = int(tok[2])
            elif tok[0] == "property":
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if n is None:
            raise FormatError("PLY has no vertex element")
        data = np.loadtxt(f, ndmin=2, max_rows=n) if n else np.zeros((0, len(props)))
    if data.shape != (n, len(props)):
        raise FormatError("PLY vertex data does not match header")
    cols = {p: i for i, p in enumerate(props)}
    pts = data[:, [cols["x"], cols["y"], cols["z"]]]
    nrm = data[:, [cols["nx"], cols["ny"], cols["nz"]]] if "nx" in cols else None
    return pts, nrm


# -- trajectories -----------------------------------------------------------------

def pose_from_kitti_row(values) -> PoseSE3:
    v = np.asarray(values, dtype=float)
    if v.shape != (12,):
        raise FormatError(f"pose line needs 12 values, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise FormatError("non-finite value in pose line")
    M = v.reshape(3, 4)
    return PoseSE3.from_rt(M[:, :3], M[:, 3])


def pose_to_kitti_row(pose: PoseSE3) -> np.ndarray:
    return pose.matrix()[:3].reshape(12)


def read_trajectory(path, frame_ids=None) -> Trajectory:
    """Read a KITTI-convention pose file (12 reals per line, row-major 3x4).

    Frame ids default to the line number.
    """
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    poses = []
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            vals = [float(x) for x in line.split()]
        except ValueError:
            raise FormatError(f"{path}:{ln}: unparsable pose line") from None
        try:
            poses.append(pose_from_kitti_row(vals))
        except FormatError as e:
            raise FormatError(f"{path}:{ln}: {e}") from None
    ids = list(range(len(poses))) if frame_ids is None else list(frame_ids)
    if len(ids) != len(poses):
        raise FormatError(f"{path}: {len(poses)} poses for {len(ids)} frame ids")
    return Trajectory(ids, poses)


def write_trajectory(path, traj: Trajectory) -> None:
    rows = np.array([pose_to_kitti_row(p) for p in traj.poses]).reshape(-1, 12)
    try:
        np.savetxt(path, rows, fmt="%.17g")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


# -- KITTI-style datasets ---------------------------------------------------------

def read_velodyne_bin(path) -> np.ndarray:
    """(N, 3) float64 points from a 4 x f32 (x, y, z, intensity) record file."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(data) % 16:
        raise FormatError(f"{path}: size {len(data)} is not a multiple of 16 bytes")
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4)[:, :3].astype(float)


def write_velodyne_bin(path, points, intensity=None) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    rec = np.zeros((len(points), 4), dtype="<f4")
    rec[:, :3] = points
    if intensity is not None:
        rec[:, 3] = intensity
    rec.tofile(path)


def rectify_vertical_angle(points, angle_deg: float = KITTI_VERTICAL_ANGLE_DEG) -> np.ndarray:
    """Raise each point's elevation by ``angle_deg``.

    Each point is rotated about the horizontal axis perpendicular to its own
    azimuth, so ranges are unchanged. Points on the vertical axis are left
    as they are.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    axis = np.column_stack([p[:, 1], -p[:, 0], np.zeros(len(p))])
    norm = np.linalg.norm(axis, axis=1, keepdims=True)
    ok = norm[:, 0] > 0
    out = p.copy()
    if ok.any():
        rotvec = axis[ok] / norm[ok] * math.radians(angle_deg)
        out[ok] = Rotation.from_rotvec(rotvec).apply(p[ok])
    return out


def read_kitti_calibration(path) -> PoseSE3 | None:
    """The ``Tr`` (LiDAR to camera) transform of a KITTI calib file, if present."""
    for line in Path(path).read_text().splitlines():
        key, _, rest = line.partition(":")
        if key.strip() == "Tr":
            return pose_from_kitti_row([float(x) for x in rest.split()])
    return None


def _scan_files(directory: Path) -> list[Path]:
    vdir = directory / "velodyne"
    if not vdir.is_dir():
        raise FormatError(f"{directory} has no velodyne/ directory")
    files = sorted(vdir.glob("*.bin"))
    for f in files:
        if not f.stem.isdigit():
            raise FormatError(f"scan file name {f.name} is not a frame number")
    return files


class KittiDataset:
    """Iterable of ``(Scan, pose)`` pairs from a KITTI-layout directory.

    Expected layout: ``velodyne/NNNNNN.bin`` scans and a pose file
    (``poses.txt`` by default) with one line per scan. If a ``calib.txt``
    with a ``Tr`` entry is present, camera-frame poses are converted to the
    LiDAR frame.
    """

    def __init__(
        self,
        directory,
        poses=None,
        rectify: bool = False,
        rectify_angle_deg: float = KITTI_VERTICAL_ANGLE_DEG,
        downsample: float = 0.0,
        use_calibration: bool = True,
    ):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise IoError(f"{directory} is not a directory")
        self.files = _scan_files(self.directory)
        pose_path = Path(poses) if poses is not None else self.directory / "poses.txt"
        if not pose_path.exists():
            raise MissingPose(f"pose file {pose_path} not found")
        traj = read_trajectory(pose_path)
        if len(traj) < len(self.files):
            raise MissingPose(f"{len(self.files)} scans but only {len(traj)} poses")
        calib = self.directory / "calib.txt"
        Tr = read_kitti_calibration(calib) if use_calibration and calib.exists() else None
        poses_ = traj.poses[: len(self.files)]
        if Tr is not None:
            Tr_inv = Tr.inverse()
            poses_ = [Tr_inv @ p @ Tr for p in poses_]
        self.frame_ids = [int(f.stem) for f in self.files]
        self.poses = poses_
        self.rectify = rectify
        self.rectify_angle_deg = rectify_angle_deg
        self.downsample = downsample

    def __len__(self) -> int:
        return len(self.files)

    @property
    def trajectory(self) -> Trajectory:
        return Trajectory(self.frame_ids, self.poses)

    def scan(self, k: int) -> Scan:
        pts = read_velodyne_bin(self.files[k])
        if self.rectify:
            pts = rectify_vertical_angle(pts, self.rectify_angle_deg)
        if self.downsample > 0:
            pts = voxel_downsample(pts, self.downsample)
        return Scan(pts, self.frame_ids[k])

    def __iter__(self) -> Iterator[tuple[Scan, PoseSE3]]:
        for k in range(len(self.files)):
            yield self.scan(k), self.poses[k]


def ingest_kitti(directory, poses=None, rectify: bool = False, **kw) -> KittiDataset:
    return KittiDataset(directory, poses, rectify, **kw)


def write_dataset(directory, dataset, gt: Trajectory | None = None) -> Path:
    """Write a ``(Scan, pose)`` iterable in the layout :class:`KittiDataset` reads.

    Poses go to ``poses.txt``; ``gt`` (if given) to ``ground_truth.txt``.
    Scans are stored as float32, so coordinates are rounded accordingly.
    """
    d = Path(directory)
    (d / "velodyne").mkdir(parents=True, exist_ok=True)
    poses, ids = [], []
    for k, (scan, pose) in enumerate(dataset):
        fid = scan.frame_id if scan.frame_id is not None else k
        write_velodyne_bin(d / "velodyne" / f"{fid:06d}.bin", scan.points)
        poses.append(pose)
        ids.append(fid)
    if ids != list(range(len(ids))):
        raise FormatError("dataset frame ids must be 0, 1, 2, ... to match pose file lines")
    write_trajectory(d / "poses.txt", Trajectory(ids, poses))
    if gt is not None:
        write_trajectory(d / "ground_truth.txt", gt)
    return d
