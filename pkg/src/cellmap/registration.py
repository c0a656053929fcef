"""Scan-to-Cell point-to-plane Gauss-Newton and bidirectional registration.

Correspondences come from the shared lattice: a scan point, moved into the
Cell's anchor frame, is matched to the plane stored under its nearest
lattice direction. The residual of a match is ``(T p - d_j u_j) . n_j``.

Pose updates are left perturbations ``T <- exp(dxi) T`` with
``dxi = (rho, phi)``. Forward residuals see the scan through ``T``; reverse
residuals see the other scan through ``T^-1`` but are differentiated with
respect to the same left perturbation of ``T``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from cellmap.cell_gen import Cell, PlaneEntry
from cellmap.core_geom import R_MIN, PoseSE3, Scan, se3_exp, skew, voxel_downsample
from cellmap.errors import InsufficientCorrespondences, LatticeMismatch, SingularNormalEquations
from cellmap.lattice import Lattice

log = logging.getLogger(__name__)

# Relative eigenvalue below which a direction counts as unconstrained.
RANK_TOL = 1e-12


@dataclass(frozen=True)
class RegistrationParams:
    max_iterations: int = 4
    inlier_residual_threshold: float = 0.5
    huber_delta: float = 0.3
    damping: float = 1e-6
    min_correspondences: int = 50
    downsample: float = 0.0
    convergence_tol: float = 1e-6
    # Matches with |residual| above this are left out of the normal
    # equations. Projective matching pairs points on surfaces hidden from
    # the anchor with whatever the anchor saw in that direction, and Huber
    # alone still lets every such pair pull with force ``huber_delta``.
    # ``None`` keeps every match.
    outlier_gate: float | None = 0.5
    # Drop matches whose plane faces away from the scan's own sensor: such a
    # plane is the far side of an object the scan sees from the front.
    reject_backfacing: bool = True
    # Drop matches whose range differs from the plane's range along the
    # same ray by more than this: a point well behind the stored surface is
    # hidden from the anchor, so the cell says nothing about it. ``None``
    # disables the test.
    max_range_gap: float | None = 0.5
    # The range gate starts this loose and halves every iteration down to
    # ``max_range_gap``, so a poor initial guess still finds its matches.
    range_gap_start: float | None = 2.0

    def __post_init__(self):
        for name in ("max_iterations", "inlier_residual_threshold", "huber_delta", "min_correspondences"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")
        if self.outlier_gate is not None and not self.outlier_gate > 0:
            raise ValueError("outlier_gate must be positive or None")


class Correspondence(NamedTuple):
    scan_point: np.ndarray
    lattice_index: int
    plane: PlaneEntry


@dataclass
class RegistrationResult:
    pose: PoseSE3
    inlier_ratio: float
    mean_residual: float
    converged: bool
    iterations_run: int
    num_correspondences: int = 0
    cost_history: list[float] = field(default_factory=list)
    last_step: float = float("inf")
    # Some pose direction was unconstrained by the matches in at least one
    # iteration; the damping then held it at its initial value.
    degenerate: bool = False


class _Matches(NamedTuple):
    points: np.ndarray  # scan points, sensor frame
    moved: np.ndarray  # points after the pose, anchor frame
    indices: np.ndarray
    distances: np.ndarray
    normals: np.ndarray
    directions: np.ndarray


def _check(cell: Cell, lattice: Lattice):
    if cell.n_sp != lattice.n_sp:
        raise LatticeMismatch(f"cell built on {cell.n_sp} directions, lattice has {lattice.n_sp}")


def _match(
    points: np.ndarray,
    T: PoseSE3,
    cell: Cell,
    lattice: Lattice,
    backfacing: bool = False,
    range_gap: float | None = None,
) -> _Matches:
    moved = T.apply(points) if len(points) else np.zeros((0, 3))
    r = np.linalg.norm(moved, axis=1)
    keep = r >= R_MIN
    pts, moved, r = points[keep], moved[keep], r[keep]
    if len(cell) == 0 or len(pts) == 0:
        e = np.zeros((0, 3))
        return _Matches(e, e, np.zeros(0, np.int64), np.zeros(0), e, e)
    j = lattice.nearest_unit(moved / r[:, None])
    slot = cell.slots[j]
    hit = slot >= 0
    j, slot = j[hit], slot[hit]
    pts, moved = pts[hit], moved[hit]
    normals = cell.normals[slot]
    keep = np.ones(len(j), dtype=bool)
    if backfacing:
        # The scan's sensor sits at T's translation in the anchor frame.
        keep &= ((T.translation - moved) * normals).sum(axis=1) > 0.0
    if range_gap is not None:
        u = lattice.directions[j]
        r_hit = r[hit]
        with np.errstate(divide="ignore", invalid="ignore"):
            # Range at which the point's own ray meets the stored plane.
            t = cell.distances[slot] * (u * normals).sum(axis=1) * r_hit / (moved * normals).sum(axis=1)
        keep &= np.abs(t - r_hit) <= range_gap
    if not keep.all():
        pts, moved, j, slot, normals = pts[keep], moved[keep], j[keep], slot[keep], normals[keep]
    return _Matches(pts, moved, j, cell.distances[slot], normals, lattice.directions[j])


def _residuals(m: _Matches) -> np.ndarray:
    return ((m.moved - m.distances[:, None] * m.directions) * m.normals).sum(axis=1)


def find_correspondences(scan: Scan, T: PoseSE3, cell: Cell, lattice: Lattice) -> list[Correspondence]:
    _check(cell, lattice)
    m = _match(scan.points, T, cell, lattice)
    return [
        Correspondence(p, int(j), PlaneEntry(float(d), n))
        for p, j, d, n in zip(m.points, m.indices, m.distances, m.normals)
    ]


def residual(c: Correspondence, T: PoseSE3, lattice: Lattice) -> float:
    u = lattice.directions[c.lattice_index]
    return float((T.apply(c.scan_point) - c.plane.distance * u) @ c.plane.normal)


def jacobian_forward(c: Correspondence, T: PoseSE3) -> np.ndarray:
    q = T.apply(c.scan_point)
    n = np.asarray(c.plane.normal)
    return n @ np.hstack([np.eye(3), -skew(q)])


def jacobian_reverse(c: Correspondence, T: PoseSE3) -> np.ndarray:
    """Gradient of ``(T^-1 p - d u) . n`` w.r.t. a left perturbation of ``T``."""
    p = np.asarray(c.scan_point)
    n = np.asarray(c.plane.normal)
    return n @ (-T.rotation.T @ np.hstack([np.eye(3), -skew(p)]))


def _jac_forward_batch(m: _Matches) -> np.ndarray:
    # n^T [I | -[q]x] = [n, q x n]
    return np.hstack([m.normals, np.cross(m.moved, m.normals)])


def _jac_reverse_batch(m: _Matches, T: PoseSE3) -> np.ndarray:
    # n^T (-R^T [I | -[p]x]) = [-Rn, (Rn) x p]
    rn = m.normals @ T.rotation.T
    return np.hstack([-rn, np.cross(rn, m.points)])


def _huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def _huber_cost(r: np.ndarray, delta: float) -> float:
    a = np.abs(r)
    return float(np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta)).sum())


class _Problem:
    """One or two residual sets sharing the unknown relative pose ``T``."""

    def __init__(self, terms, lattice: Lattice, params: RegistrationParams):
        # terms: list of (points, cell, reverse_flag)
        self.terms = terms
        self.lattice = lattice
        self.params = params
        self.n_points = sum(len(p) for p, _, _ in terms)

    def range_gap(self, k: int) -> float | None:
        """Range gate used when linearizing at iteration ``k`` (0-based)."""
        p = self.params
        if p.max_range_gap is None or p.range_gap_start is None:
            return p.max_range_gap
        return max(p.max_range_gap, p.range_gap_start * 0.5**k)

    def evaluate(self, T: PoseSE3, with_jacobian: bool = True, range_gap: float | None = None):
        rs, Js = [], []
        p = self.params
        Tinv = T.inverse()
        for pts, cell, reverse in self.terms:
            m = _match(pts, Tinv if reverse else T, cell, self.lattice, p.reject_backfacing, range_gap)
            rs.append(_residuals(m))
            if with_jacobian:
                Js.append(_jac_reverse_batch(m, T) if reverse else _jac_forward_batch(m))
        r = np.concatenate(rs)
        J = np.vstack(Js) if with_jacobian else None
        return r, J

    def _weights(self, r: np.ndarray) -> np.ndarray:
        w = _huber_weights(r, self.params.huber_delta)
        if self.params.outlier_gate is not None:
            w[np.abs(r) > self.params.outlier_gate] = 0.0
        return w

    def cost(self, r: np.ndarray) -> float:
        """Robust cost over the matches that take part in the solve."""
        gate = self.params.outlier_gate
        if gate is not None:
            r = r[np.abs(r) <= gate]
        return _huber_cost(r, self.params.huber_delta)

    def solve(self, T0: PoseSE3) -> RegistrationResult:
        """Damped Gauss-Newton, re-matching at the current pose every iteration."""
        p = self.params
        T = T0
        r, J = self.evaluate(T, range_gap=self.range_gap(0))
        if len(r) < p.min_correspondences:
            raise InsufficientCorrespondences(f"{len(r)} correspondences, need {p.min_correspondences}")
        costs = [self.cost(r)]
        step = np.inf
        degenerate = False
        it = 0
        for it in range(1, p.max_iterations + 1):
            w = self._weights(r)
            H = J.T @ (w[:, None] * J)
            g = J.T @ (w * r)
            dxi, deficient = _solve_damped(H, g, p.damping)
            degenerate |= deficient
            step = float(np.linalg.norm(dxi))
            T = se3_exp(dxi) @ T
            done = step < p.convergence_tol or it == p.max_iterations
            # The closing evaluation always uses the final, tightest gate.
            gap = p.max_range_gap if done else self.range_gap(it)
            r, J = self.evaluate(T, with_jacobian=not done, range_gap=gap)
            costs.append(self.cost(r))
            if done:
                break
        a = np.abs(r)
        inl = a < p.inlier_residual_threshold
        return RegistrationResult(
            pose=T,
            inlier_ratio=float(inl.sum()) / self.n_points if self.n_points else 0.0,
            mean_residual=float(a[inl].mean()) if inl.any() else float("inf"),
            converged=step < p.convergence_tol and not degenerate,
            iterations_run=it,
            num_correspondences=len(r),
            cost_history=costs,
            last_step=step,
            degenerate=degenerate,
        )


def _solve_damped(H: np.ndarray, g: np.ndarray, damping: float) -> tuple[np.ndarray, bool]:
    """Damped Gauss-Newton step and whether ``H`` itself is rank deficient."""
    if not np.all(np.isfinite(H)) or not np.all(np.isfinite(g)):
        raise SingularNormalEquations("non-finite normal equations")
    ev = np.linalg.eigvalsh(H)
    if ev[-1] <= 0:
        # Every match fell outside the robust gate: nothing to update from.
        return np.zeros(6), True
    deficient = bool(ev[0] <= RANK_TOL * ev[-1])
    # Damping is scaled by the mean diagonal so it is unit-free.
    lam = damping * np.trace(H) / 6.0
    if deficient and lam <= 0:
        raise SingularNormalEquations(
            f"normal equations are rank deficient (eigenvalues {ev[0]:.3g} .. {ev[-1]:.3g})"
        )
    try:
        dxi = np.linalg.solve(H + lam * np.eye(6), -g)
    except np.linalg.LinAlgError as e:
        raise SingularNormalEquations(str(e)) from e
    if not np.all(np.isfinite(dxi)):
        raise SingularNormalEquations("non-finite update")
    return dxi, deficient


def _prepare(scan: Scan, params: RegistrationParams) -> np.ndarray:
    pts = scan.points
    if params.downsample > 0:
        pts = voxel_downsample(pts, params.downsample)
    return np.asarray(pts)


def register_scan_to_cell(
    scan: Scan,
    cell: Cell,
    T0: PoseSE3,
    lattice: Lattice,
    params: RegistrationParams = RegistrationParams(),
) -> RegistrationResult:
    """Pose of ``scan`` in the anchor frame of ``cell``, starting from ``T0``."""
    _check(cell, lattice)
    if len(scan) == 0:
        raise InsufficientCorrespondences("scan is empty")
    return _Problem([(_prepare(scan, params), cell, False)], lattice, params).solve(T0)


def bidirectional_register(
    cell_a: Cell,
    scan_a: Scan,
    cell_b: Cell,
    scan_b: Scan,
    T0: PoseSE3,
    lattice: Lattice,
    params: RegistrationParams = RegistrationParams(),
) -> RegistrationResult:
    """Relative pose ``T`` of b in a's anchor frame from both directions at once.

    Forward residuals put ``scan_b`` into ``cell_a`` through ``T``; reverse
    residuals put ``scan_a`` into ``cell_b`` through ``T^-1``. Both sets are
    stacked into one normal-equation system per iteration.
    """
    _check(cell_a, lattice)
    _check(cell_b, lattice)
    if len(scan_a) == 0 or len(scan_b) == 0:
        raise InsufficientCorrespondences("scan is empty")
    terms = [
        (_prepare(scan_b, params), cell_a, False),
        (_prepare(scan_a, params), cell_b, True),
    ]
    return _Problem(terms, lattice, params).solve(T0)
