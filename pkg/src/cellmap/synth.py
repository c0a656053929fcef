"""Synthetic planar worlds, a spinning-LiDAR ray caster and drifting odometry.

These generate the ground truth for every desk-scale experiment: scenes are
sets of bounded rectangles, scans are exact ray/rectangle intersections with
optional Gaussian range noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cellmap.core_geom import PoseSE3, Scan, se3_exp
from cellmap.metrics import Trajectory


@dataclass(frozen=True)
class Rect:
    """Bounded plane: ``normal . x = offset`` restricted to a rectangle."""

    center: tuple
    normal: tuple
    u_axis: tuple
    half_u: float
    half_v: float

    @property
    def offset(self) -> float:
        return float(np.dot(self.normal, self.center))

    @property
    def v_axis(self) -> np.ndarray:
        return np.cross(self.normal, self.u_axis)

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Euclidean distance from points to the bounded rectangle."""
        d = np.asarray(points, dtype=float) - np.asarray(self.center)
        n = np.asarray(self.normal)
        u = np.asarray(self.u_axis)
        v = self.v_axis
        du = np.maximum(np.abs(d @ u) - self.half_u, 0.0)
        dv = np.maximum(np.abs(d @ v) - self.half_v, 0.0)
        return np.sqrt((d @ n) ** 2 + du**2 + dv**2)


def _rect(center, normal, u_axis, size_u, size_v) -> Rect:
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    u = np.asarray(u_axis, dtype=float)
    u = u - (u @ n) * n
    u = u / np.linalg.norm(u)
    return Rect(tuple(np.asarray(center, float)), tuple(n), tuple(u), 0.5 * size_u, 0.5 * size_v)


@dataclass
class SyntheticScene:
    planes: list[Rect] = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        for p in self.planes:
            if not (p.half_u > 0 and p.half_v > 0):
                raise ValueError("scene rectangles need positive extents")

    def distance(self, points) -> np.ndarray:
        """Distance from each point to the nearest scene surface."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.min([r.distance(pts) for r in self.planes], axis=0)


def _box(center, size) -> list[Rect]:
    """The six faces of an axis-aligned box."""
    c = np.asarray(center, dtype=float)
    s = np.asarray(size, dtype=float)
    out = []
    for axis in range(3):
        a1, a2 = [a for a in range(3) if a != axis]
        for sign in (-1.0, 1.0):
            n = np.zeros(3)
            n[axis] = sign
            u = np.zeros(3)
            u[a1] = 1.0
            fc = c.copy()
            fc[axis] += sign * 0.5 * s[axis]
            # v = n x u must be along a2, sizes ordered to match.
            out.append(_rect(fc, n, u, s[a1], s[a2]))
    return out


def _pillars(xs, y_wall, side, depth, width, height) -> list[Rect]:
    """Wall-attached columns protruding ``depth`` from the wall at ``y_wall``."""
    out = []
    for x in xs:
        yc = y_wall - side * 0.5 * depth
        for r in _box((x, yc, 0.5 * height), (width, depth, height)):
            # Skip the faces buried in the wall, floor or ceiling.
            n = np.asarray(r.normal)
            if abs(n[2]) > 0.5 or n[1] * side > 0.5:
                continue
            out.append(r)
    return out


def box_room(size: float = 20.0) -> SyntheticScene:
    if size <= 0:
        raise ValueError("size must be positive")
    return SyntheticScene(_box((0.0, 0.0, 0.0), (size, size, size)), f"box_room({size:g})")


def corridor(
    width: float = 4.0,
    height: float = 3.0,
    length: float = 100.0,
    pillar_spacing: float | None = None,
    pillar_depth: float = 0.4,
    pillar_width: float = 0.6,
) -> SyntheticScene:
    """Corridor along +x from x=0 to x=length, floor at z=0, walls at y=+-width/2.

    With ``pillar_spacing`` the walls carry staggered columns, which make
    motion along the corridor observable.
    """
    if min(width, height, length) <= 0:
        raise ValueError("corridor dimensions must be positive")
    cx = 0.5 * length
    planes = [
        _rect((cx, 0.5 * width, 0.5 * height), (0, -1, 0), (1, 0, 0), length, height),
        _rect((cx, -0.5 * width, 0.5 * height), (0, 1, 0), (1, 0, 0), length, height),
        _rect((cx, 0.0, 0.0), (0, 0, 1), (1, 0, 0), length, width),
        _rect((cx, 0.0, height), (0, 0, -1), (1, 0, 0), length, width),
    ]
    label = f"corridor({width:g},{height:g},{length:g})"
    if pillar_spacing:
        xs = np.arange(pillar_spacing * 0.5, length, pillar_spacing)
        planes += _pillars(xs[::2], 0.5 * width, 1.0, pillar_depth, pillar_width, height)
        planes += _pillars(xs[1::2], -0.5 * width, -1.0, pillar_depth, pillar_width, height)
        label += f"+pillars({pillar_spacing:g})"
    return SyntheticScene(planes, label)


def square_loop_world(
    side: float = 60.0,
    width: float = 8.0,
    height: float = 4.0,
    pillar_spacing: float | None = 5.0,
) -> SyntheticScene:
    """Walled square ring road whose centerline runs (0,0)->(side,0)->(side,side)->(0,side).

    Outer walls bound [-width/2, side+width/2]^2, the inner block fills
    [width/2, side-width/2]^2, the floor is z=0 and the sky is open.
    Columns along the outer walls give along-track structure.
    """
    if min(side, width, height) <= 0 or side <= width:
        raise ValueError("square loop needs side > width > 0")
    h = 0.5 * width
    lo, hi = -h, side + h
    mid = 0.5 * side
    outer = hi - lo
    inner = side - width
    planes = [
        _rect((mid, 0.5 * (lo + hi), 0.0), (0, 0, 1), (1, 0, 0), outer, outer),
        # outer walls, facing inward
        _rect((mid, lo, 0.5 * height), (0, 1, 0), (1, 0, 0), outer, height),
        _rect((mid, hi, 0.5 * height), (0, -1, 0), (1, 0, 0), outer, height),
        _rect((lo, mid, 0.5 * height), (1, 0, 0), (0, 1, 0), outer, height),
        _rect((hi, mid, 0.5 * height), (-1, 0, 0), (0, 1, 0), outer, height),
    ]
    for r in _box((mid, mid, 0.5 * height), (inner, inner, height)):
        if abs(r.normal[2]) < 0.5:
            planes.append(r)
    if pillar_spacing:
        xs = np.arange(0.0, side + 1e-9, pillar_spacing)[1:-1]
        d, w = 0.5, 0.8
        # South wall (y = lo), columns protrude toward +y.
        planes += _pillars(xs, lo, -1.0, d, w, height)
        # North wall (y = hi), columns protrude toward -y; offset by half a spacing.
        planes += _pillars(xs + 0.5 * pillar_spacing, hi, 1.0, d, w, height)
        # West and east walls: build along x then swap axes.
        for x_wall, sgn, shift in ((lo, -1.0, 0.25), (hi, 1.0, 0.75)):
            for r in _pillars(xs + shift * pillar_spacing, x_wall, sgn, d, w, height):
                c, n, u = r.center, r.normal, r.u_axis
                planes.append(
                    _rect((c[1], c[0], c[2]), (n[1], n[0], n[2]), (u[1], u[0], u[2]), 2 * r.half_u, 2 * r.half_v)
                )
    return SyntheticScene(planes, f"square_loop_world({side:g})")


def make_scene(kind: str, **dims) -> SyntheticScene:
    builders = {"box_room": box_room, "corridor": corridor, "square_loop_world": square_loop_world}
    if kind not in builders:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {sorted(builders)}")
    return builders[kind](**dims)


# -- ray casting --------------------------------------------------------------

def ray_pattern(rings: int = 64, azimuths: int = 1024, min_elev_deg: float = -25.0, max_elev_deg: float = 25.0) -> np.ndarray:
    """Unit ray directions of a spinning multi-beam LiDAR, shape (rings*azimuths, 3)."""
    el = np.radians(np.linspace(min_elev_deg, max_elev_deg, rings))
    az = np.arange(azimuths) * (2.0 * math.pi / azimuths)
    E, A = np.meshgrid(el, az, indexing="ij")
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


def cast_rays(scene: SyntheticScene, origin, directions) -> np.ndarray:
    """Range to the nearest rectangle along each world-frame ray (inf on miss)."""
    o = np.asarray(origin, dtype=float)
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    best = np.full(len(d), np.inf)
    for r in scene.planes:
        n = np.asarray(r.normal)
        den = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (r.offset - n @ o) / den
        ok = np.isfinite(t) & (t > 1e-9) & (t < best)
        if not ok.any():
            continue
        idx = np.flatnonzero(ok)
        hit = o + t[idx, None] * d[idx] - np.asarray(r.center)
        inside = (np.abs(hit @ np.asarray(r.u_axis)) <= r.half_u) & (np.abs(hit @ r.v_axis) <= r.half_v)
        best[idx[inside]] = t[idx[inside]]
    return best


def raycast_scan(
    scene: SyntheticScene,
    sensor_pose: PoseSE3,
    pattern: np.ndarray | None = None,
    noise_sigma: float = 0.0,
    seed: int = 0,
    frame_id: int = 0,
    max_range: float = 120.0,
) -> Scan:
    """Simulated scan in the sensor frame; misses and far returns are dropped."""
    rays = ray_pattern() if pattern is None else np.asarray(pattern, dtype=float).reshape(-1, 3)
    if len(rays) == 0:
        raise ValueError("ray pattern is empty")
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    rng_ = cast_rays(scene, sensor_pose.translation, rays @ sensor_pose.rotation.T)
    hit = np.isfinite(rng_) & (rng_ <= max_range)
    r = rng_[hit]
    if noise_sigma > 0:
        r = r + np.random.default_rng(seed).normal(0.0, noise_sigma, len(r))
    return Scan(rays[hit] * r[:, None], frame_id)


# -- trajectories ---------------------------------------------------------------

def _heading_pose(position, yaw: float) -> PoseSE3:
    return PoseSE3(np.array([math.cos(0.5 * yaw), 0.0, 0.0, math.sin(0.5 * yaw)]), position)


def straight_trajectory(n: int, step: float = 1.0, start=(0.0, 0.0, 0.0), yaw: float = 0.0) -> Trajectory:
    s = np.asarray(start, dtype=float)
    d = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    return Trajectory.from_poses(_heading_pose(s + i * step * d, yaw) for i in range(n))


def square_loop_trajectory(side: float = 60.0, step: float = 1.0, height: float = 1.8, laps: float = 1.0) -> Trajectory:
    """Counter-clockwise along the square centerline starting at the origin corner."""
    perimeter = 4.0 * side
    n = int(round(laps * perimeter / step)) + 1
    poses = []
    for i in range(n):
        s = (i * step) % perimeter
        leg = min(int(s // side), 3)
        u = s - leg * side
        corners = [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)]
        dirs = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)]
        cx, cy = corners[leg]
        dx, dy = dirs[leg]
        poses.append(_heading_pose((cx + u * dx, cy + u * dy, height), leg * 0.5 * math.pi))
    return Trajectory.from_poses(poses)


def drift_odometry(
    gt: Trajectory,
    per_meter_drift=(0.01, 0.0),
    seed: int = 0,
    direction=None,
    axis=None,
    noise_fraction: float = 0.1,
) -> Trajectory:
    """Odometry that accumulates error proportionally to distance travelled.

    Every relative motion of length ``s`` is right-multiplied by
    ``exp(s * (t_drift * direction, r_drift * axis) + noise)`` in the body
    frame. ``direction`` and ``axis`` default to seeded random unit vectors;
    the noise is Gaussian with ``noise_fraction`` of the bias magnitudes.
    """
    t_drift, r_drift = per_meter_drift
    if t_drift == 0 and r_drift == 0:
        return Trajectory(list(gt.frame_ids), list(gt.poses))
    rng = np.random.default_rng(seed)

    def unit(v):
        v = rng.normal(size=3) if v is None else np.asarray(v, dtype=float)
        return v / np.linalg.norm(v)

    dt, dr = unit(direction), unit(axis)
    out = [gt.poses[0]]
    for a, b in zip(gt.poses, gt.poses[1:]):
        rel = a.inverse() @ b
        s = float(np.linalg.norm(rel.translation))
        xi = np.concatenate([t_drift * dt, r_drift * dr]) * s
        xi = xi + noise_fraction * s * np.concatenate(
            [t_drift * rng.normal(size=3), r_drift * rng.normal(size=3)]
        )
        out.append(out[-1] @ rel @ se3_exp(xi))
    return Trajectory(list(gt.frame_ids), out)


class SyntheticDataset:
    """Iterable of ``(Scan, odometry pose)`` pairs ray-cast along ``gt``.

    Scans are generated lazily and deterministically: frame ``i`` uses noise
    seed ``seed * 1_000_003 + i``.
    """

    def __init__(
        self,
        scene: SyntheticScene,
        gt: Trajectory,
        odometry: Trajectory | None = None,
        pattern: np.ndarray | None = None,
        noise_sigma: float = 0.0,
        seed: int = 0,
    ):
        self.scene = scene
        self.gt = gt
        self.odometry = odometry if odometry is not None else gt
        self.pattern = ray_pattern() if pattern is None else pattern
        self.noise_sigma = noise_sigma
        self.seed = seed

    def __len__(self) -> int:
        return len(self.gt)

    def scan(self, k: int) -> Scan:
        fid = self.gt.frame_ids[k]
        return raycast_scan(
            self.scene, self.gt.poses[k], self.pattern, self.noise_sigma, self.seed * 1_000_003 + fid, fid
        )

    def __iter__(self):
        for k in range(len(self.gt)):
            yield self.scan(k), self.odometry.poses[k]
