"""Turn a local point-cloud map into a Cell of per-direction planes.

Pipeline per local map: project every point onto the lattice, sort each
direction group by range, cut the group at the first foreground/background
gap, fit a plane with seeded RANSAC and store where the lattice ray meets it.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from cellmap.core_geom import PoseSE3
from cellmap.errors import EmptyMap
from cellmap.lattice import Lattice

PARALLEL_EPS = 1e-6


@dataclass(frozen=True)
class CellGenParams:
    gap_threshold: float = 3.0
    min_points_per_group: int = 5
    ransac_inlier_dist: float = 0.10
    ransac_max_iters: int = 50
    ransac_min_inlier_fraction: float = 0.6
    seed: int = 0
    # Planes seen at a steeper angle than this (|n . u| below it) are dropped.
    min_incidence_cos: float = 0.0872  # cos 85 deg

    def __post_init__(self):
        for name in (
            "gap_threshold",
            "min_points_per_group",
            "ransac_inlier_dist",
            "ransac_max_iters",
            "ransac_min_inlier_fraction",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.min_incidence_cos < 1.0:
            raise ValueError("min_incidence_cos must lie in [0, 1)")
        if self.min_points_per_group < 3:
            raise ValueError("min_points_per_group must be at least 3 for a plane")


class PlaneEntry(NamedTuple):
    distance: float
    normal: np.ndarray


class Cell:
    """Sparse lattice-index -> (distance, normal) table in the anchor frame."""

    def __init__(self, indices, distances, normals, n_sp: int, anchor_frame: int = 0):
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        distances = np.asarray(distances, dtype=float).reshape(-1)
        normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        if not (len(indices) == len(distances) == len(normals)):
            raise ValueError("indices, distances and normals must have equal length")
        if len(indices) and (indices[0] < 0 or indices[-1] >= n_sp):
            raise ValueError("lattice index out of range")
        if np.any(np.diff(indices) <= 0):
            raise ValueError("cell indices must be strictly increasing")
        for a in (indices, distances, normals):
            a.setflags(write=False)
        self.indices = indices
        self.distances = distances
        self.normals = normals
        self.n_sp = int(n_sp)
        self.anchor_frame = int(anchor_frame)
        self._slots = None

    @classmethod
    def empty(cls, n_sp: int, anchor_frame: int = 0) -> Cell:
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, 3)), n_sp, anchor_frame)

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, j) -> bool:
        return self.slots[int(j)] >= 0

    def __getitem__(self, j) -> PlaneEntry:
        k = self.slots[int(j)]
        if k < 0:
            raise KeyError(j)
        return PlaneEntry(float(self.distances[k]), self.normals[k])

    def get(self, j):
        k = self.slots[int(j)]
        return None if k < 0 else PlaneEntry(float(self.distances[k]), self.normals[k])

    @property
    def slots(self) -> np.ndarray:
        """Dense array: entry row for each lattice index, -1 where empty."""
        if self._slots is None:
            s = np.full(self.n_sp, -1, dtype=np.int64)
            s[self.indices] = np.arange(len(self.indices))
            s.setflags(write=False)
            self._slots = s
        return self._slots

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.n_sp).tobytes())
        for a in (self.indices, self.distances, self.normals):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def equals(self, other: Cell) -> bool:
        return (
            self.n_sp == other.n_sp
            and self.anchor_frame == other.anchor_frame
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.distances, other.distances)
            and np.array_equal(self.normals, other.normals)
        )

    def __repr__(self) -> str:
        return f"Cell(n_sp={self.n_sp}, anchor_frame={self.anchor_frame}, entries={len(self)})"


# -- seeded hashing -------------------------------------------------------

def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def group_seed(params: CellGenParams, anchor_frame: int, lattice_index) -> np.ndarray:
    """Per-group RANSAC seed from (seed, anchor frame, lattice index)."""
    base = _splitmix64(np.uint64(params.seed & 0xFFFFFFFF) ^ (np.uint64(anchor_frame & 0xFFFFFFFF) << np.uint64(32)))
    return _splitmix64(base ^ np.asarray(lattice_index, dtype=np.uint64))


# -- per-group stages -------------------------------------------------------

def segment_map(points, lattice: Lattice) -> dict[int, np.ndarray]:
    """Group point indices by nearest lattice direction."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyMap("no points to segment")
    labels = lattice.nearest(pts)
    order = np.argsort(labels, kind="stable")
    lab = labels[order]
    cuts = np.flatnonzero(np.diff(lab)) + 1
    return {int(g[0]): idx for g, idx in zip(np.split(lab, cuts), np.split(order, cuts))}


def gap_cluster(group_points, gap_threshold: float, min_points: int = 5):
    """Sort by range and cut at the first gap larger than ``gap_threshold``.

    Returns the kept (foreground) points, range-sorted, and a validity flag.
    A group without any gap is always returned whole and valid.
    """
    pts = np.asarray(group_points, dtype=float).reshape(-1, 3)
    r = np.linalg.norm(pts, axis=1)
    order = np.argsort(r, kind="stable")
    pts, r = pts[order], r[order]
    gaps = np.flatnonzero(np.diff(r) > gap_threshold)
    if len(gaps) == 0:
        return pts, True
    kept = pts[: gaps[0] + 1]
    return kept, len(kept) >= min_points


def _ransac_batch(pts, gid, counts, seeds, params: CellGenParams):
    """RANSAC plane fits for many groups at once.

    ``pts`` holds the points of all groups back to back, ``gid`` the group of
    each point, ``counts`` the size of each group (every count >= 3) and
    ``seeds`` one uint64 per group. Returns (normals, centroids, accepted).
    """
    G = len(counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    c = counts.astype(np.uint64)
    best = np.full(G, -1, dtype=np.int64)
    best_n = np.zeros((G, 3))
    best_p = np.zeros((G, 3))
    thr = params.ransac_inlier_dist
    for it in range(params.ransac_max_iters):
        k = np.uint64(3 * it)
        h0 = _splitmix64(seeds + k)
        h1 = _splitmix64(seeds + k + np.uint64(1))
        h2 = _splitmix64(seeds + k + np.uint64(2))
        i0 = h0 % c
        i1 = (i0 + np.uint64(1) + h1 % (c - np.uint64(1))) % c
        i2 = (i0 + np.uint64(1) + h2 % (c - np.uint64(1))) % c
        p0 = pts[starts + i0.astype(np.int64)]
        p1 = pts[starts + i1.astype(np.int64)]
        p2 = pts[starts + i2.astype(np.int64)]
        n = np.cross(p1 - p0, p2 - p0)
        nn = np.linalg.norm(n, axis=1)
        good = nn > 1e-12
        n[good] /= nn[good, None]
        dist = np.abs(((pts - p0[gid]) * n[gid]).sum(axis=1))
        score = np.bincount(gid, weights=(dist <= thr).astype(float), minlength=G).astype(np.int64)
        score[~good] = -1
        better = score > best
        best[better] = score[better]
        best_n[better] = n[better]
        best_p[better] = p0[better]

    inl = np.abs(((pts - best_p[gid]) * best_n[gid]).sum(axis=1)) <= thr
    accepted = best >= params.ransac_min_inlier_fraction * counts
    # Least-squares refinement on the best inlier set.
    w = inl.astype(float)
    m = np.bincount(gid, weights=w, minlength=G)
    m_safe = np.maximum(m, 1.0)
    cent = np.stack([np.bincount(gid, weights=w * pts[:, a], minlength=G) for a in range(3)], axis=1)
    cent /= m_safe[:, None]
    q = (pts - cent[gid]) * w[:, None]
    cov = np.empty((G, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(gid, weights=q[:, a] * q[:, b], minlength=G)
            cov[:, a, b] = s
            cov[:, b, a] = s
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    flip = (normals * cent).sum(axis=1) > 0
    normals[flip] *= -1.0
    accepted &= m >= 3
    # The refined plane must keep the support the sample plane had.
    close = np.abs(((pts - cent[gid]) * normals[gid]).sum(axis=1)) <= thr
    support = np.bincount(gid, weights=close.astype(float), minlength=G)
    accepted &= support >= params.ransac_min_inlier_fraction * counts
    return normals, cent, accepted


def fit_plane(points, params: CellGenParams = CellGenParams(), seed: int = 0):
    """RANSAC plane with least-squares refinement.

    Returns ``(normal, offset)`` with ``normal . x = offset`` on the plane and
    the normal facing the origin, or ``None`` when no plane is supported.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < max(3, params.min_points_per_group):
        return None
    n, cent, ok = _ransac_batch(
        pts,
        np.zeros(len(pts), dtype=np.int64),
        np.array([len(pts)]),
        np.array([seed], dtype=np.uint64),
        params,
    )
    if not ok[0]:
        return None
    return n[0], float(n[0] @ cent[0])


def ray_plane_distance(normal, plane_point, direction):
    """Range along ``direction`` from the origin to the plane, or None."""
    normal = np.asarray(normal, dtype=float)
    den = float(normal @ np.asarray(direction, dtype=float))
    if abs(den) < PARALLEL_EPS:
        return None
    d = float(normal @ np.asarray(plane_point, dtype=float)) / den
    if not d > 0 or not np.isfinite(d):
        return None
    return d


# -- whole-map generation ---------------------------------------------------

def _groups(local: np.ndarray, lattice: Lattice, params: CellGenParams):
    """Sorted point array plus kept-group bookkeeping for the batch path."""
    labels = lattice.nearest(local)
    r = np.linalg.norm(local, axis=1)
    order = np.lexsort((r, labels))
    lab, rs, pts = labels[order], r[order], local[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(lab)) + 1])
    sizes = np.diff(np.concatenate([starts, [len(lab)]]))
    # First range gap inside each group (gap k sits between k and k+1).
    gap = np.zeros(len(lab), dtype=bool)
    gap[:-1] = (np.diff(rs) > params.gap_threshold) & (lab[1:] == lab[:-1])
    pos = np.where(gap, np.arange(len(lab)), len(lab))
    first_gap = np.minimum.reduceat(pos, starts)
    has_gap = first_gap < starts + sizes
    kept = np.where(has_gap, first_gap - starts + 1, sizes)
    return pts, lab[starts], starts, kept


def generate_cell(
    local_map_world,
    anchor_pose: PoseSE3,
    lattice: Lattice,
    params: CellGenParams = CellGenParams(),
    anchor_frame: int = 0,
    workers: int = 1,
    chunk_groups: int = 8192,
) -> Cell:
    """Build the Cell of a world-frame local map anchored at ``anchor_pose``.

    Groups are independent; ``workers > 1`` spreads chunks of groups over a
    thread pool. Seeds are per group, so the result does not depend on
    ``workers`` or ``chunk_groups``.
    """
    world = np.asarray(local_map_world, dtype=float).reshape(-1, 3)
    if len(world) == 0:
        raise EmptyMap("local map is empty")
    local = anchor_pose.inverse().apply(world)
    local = local[np.any(local != 0.0, axis=1)]
    if len(local) == 0:
        raise EmptyMap("local map has no points away from the anchor origin")

    pts, keys, starts, kept = _groups(local, lattice, params)
    r_lo = np.linalg.norm(pts[starts], axis=1)
    r_hi = np.linalg.norm(pts[starts + np.maximum(kept, 1) - 1], axis=1)
    eligible = np.flatnonzero(kept >= params.min_points_per_group)
    if len(eligible) == 0:
        return Cell.empty(lattice.n_sp, anchor_frame)

    def run(sel):
        counts = kept[sel]
        ends = np.cumsum(counts)
        idx = np.repeat(starts[sel] - ends + counts, counts) + np.arange(ends[-1])
        gid = np.repeat(np.arange(len(sel)), counts)
        seeds = group_seed(params, anchor_frame, keys[sel])
        gp = pts[idx]
        n, cent, ok = _ransac_batch(gp, gid, counts, seeds, params)
        u = lattice.directions[keys[sel]]
        # The plane must hold where the lattice ray actually points: the
        # group point closest in direction to the ray has to sit on the
        # plane when measured along its own ray. Groups straddling an edge
        # otherwise store the majority face's plane extended past the edge,
        # or a fold plane across a corner seen at a grazing angle.
        rng_ = np.linalg.norm(gp, axis=1)
        cosang = (gp * u[gid]).sum(axis=1) / rng_
        first = np.concatenate([[0], ends[:-1]])
        best = np.maximum.reduceat(cosang, first)
        closest = np.flatnonzero(cosang == best[gid])
        closest = closest[np.unique(gid[closest], return_index=True)[1]]
        pc = gp[closest]
        resid = np.abs(((pc - cent) * n).sum(axis=1))
        inc = np.abs((pc * n).sum(axis=1)) / rng_[closest]
        ok &= resid <= params.ransac_inlier_dist * inc
        den = (n * u).sum(axis=1)
        num = (n * cent).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = num / den
        ok &= (np.abs(den) >= max(PARALLEL_EPS, params.min_incidence_cos)) & np.isfinite(d) & (d > 0)
        # The plane must meet the lattice ray where the group has data. A
        # plane fitted across an edge can pass the inlier test yet cut the
        # ray far outside the observed ranges.
        tol = params.ransac_inlier_dist
        ok &= (d >= r_lo[sel] - tol) & (d <= r_hi[sel] + tol)
        return keys[sel][ok], d[ok], n[ok]

    chunks = [eligible[i : i + chunk_groups] for i in range(0, len(eligible), chunk_groups)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return Cell(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        lattice.n_sp,
        anchor_frame,
    )
