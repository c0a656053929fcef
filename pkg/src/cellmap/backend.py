"""Loop detection by nearest-anchor search, loop verification, and pose-graph optimization.

The graph has one node per cell (its world-frame anchor pose). Factors
carry a measured relative pose ``Z_ij`` from node i to node j and a 6x6
information matrix in (rho, phi) order. The error of a factor is
``log(Z_ij^-1 T_i^-1 T_j)``; node poses move by left perturbations
``T <- exp(d) T`` exactly as in registration.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from cellmap.cell_gen import Cell
from cellmap.cell_map import CellMap
from cellmap.core_geom import PoseSE3, Scan, adjoint, se3_exp, se3_left_jacobian_inv, se3_log
from cellmap.errors import (
    CellMapError,
    DisconnectedGraph,
    IndexMismatch,
    SingularSystem,
)
from cellmap.lattice import Lattice
from cellmap.registration import RegistrationParams, register_scan_to_cell

log = logging.getLogger(__name__)

SIGMA_T = 0.1  # m
SIGMA_R = 0.01  # rad
LOOP_HUBER_DELTA = 1.0
FACTOR_KINDS = ("odometry", "bidirectional", "loop")


def information_matrix(sigma_t: float = SIGMA_T, sigma_r: float = SIGMA_R, scale: float = 1.0) -> np.ndarray:
    return scale * np.diag([1.0 / sigma_t**2] * 3 + [1.0 / sigma_r**2] * 3)


@dataclass(frozen=True)
class PoseGraphNode:
    cell_index: int
    pose: PoseSE3


@dataclass(frozen=True, eq=False)
class PoseFactor:
    """Relative-pose measurement ``T_from^-1 T_to`` with its information matrix."""

    from_index: int
    to_index: int
    measured_relative: PoseSE3
    information: np.ndarray = field(default_factory=information_matrix)
    kind: str = "odometry"

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"factor kind must be one of {FACTOR_KINDS}")
        if self.from_index == self.to_index:
            raise ValueError("a factor needs two distinct nodes")
        info = np.array(self.information, dtype=float).reshape(6, 6)
        if not np.allclose(info, info.T, rtol=0, atol=1e-12 * max(1.0, np.abs(info).max())):
            raise ValueError("information matrix must be symmetric")
        try:
            np.linalg.cholesky(info)
        except np.linalg.LinAlgError as e:
            raise ValueError("information matrix must be positive definite") from e
        info.setflags(write=False)
        object.__setattr__(self, "information", info)


@dataclass(frozen=True)
class LoopParams:
    n_loop: int = 10
    inlier_ratio_threshold: float = 0.2
    exclusion_window: int | None = None  # defaults to n_loop
    # A loop registration counts as converged when its final update is
    # below this norm. Re-matching every iteration keeps the last step
    # from reaching the registration's strict 1e-6 within a few iterations.
    max_final_step: float = 1e-2

    def __post_init__(self):
        if self.n_loop < 1:
            raise ValueError("n_loop must be at least 1")
        if not 0.0 <= self.inlier_ratio_threshold <= 1.0:
            raise ValueError("inlier_ratio_threshold must lie in [0, 1]")
        if self.exclusion_window is not None and self.exclusion_window < 0:
            raise ValueError("exclusion_window must be nonnegative")

    @property
    def window(self) -> int:
        return self.n_loop if self.exclusion_window is None else int(self.exclusion_window)


def find_loop_candidates(cmap: CellMap, current: int, params: LoopParams = LoopParams()) -> list[int]:
    """Nearest ``n_loop`` cells to ``current`` by anchor distance, minus recent ones.

    The ``n_loop`` nearest cells of the whole map are taken first (the
    current cell among them), then every index in
    ``[current - window, current]`` is dropped. Ties in distance go to the
    lower index. The result is ordered nearest first.
    """
    if not 0 <= current < len(cmap):
        raise IndexError(f"cell {current} not in map of {len(cmap)}")
    pos = np.array([p.translation for p in cmap.poses]).reshape(-1, 3)
    d = np.linalg.norm(pos - pos[current], axis=1)
    order = np.lexsort((np.arange(len(d)), d))[: params.n_loop]
    lo = current - params.window
    return [int(i) for i in order if not lo <= i <= current]


class LoopCheck(NamedTuple):
    factor: PoseFactor | None
    inlier_ratio: float
    last_step: float


def verify_loop(
    scan: Scan,
    candidate_cell: Cell,
    candidate_pose: PoseSE3,
    current_pose: PoseSE3,
    lattice: Lattice,
    reg_params: RegistrationParams = RegistrationParams(),
    loop_params: LoopParams = LoopParams(),
    candidate_index: int = 0,
    current_index: int = 1,
) -> PoseFactor | None:
    """Register the current anchor scan against a candidate cell; a loop factor if it holds."""
    return check_loop(
        scan, candidate_cell, candidate_pose, current_pose, lattice, reg_params, loop_params,
        candidate_index, current_index,
    ).factor


def check_loop(
    scan, candidate_cell, candidate_pose, current_pose, lattice,
    reg_params=RegistrationParams(), loop_params=LoopParams(), candidate_index=0, current_index=1,
) -> LoopCheck:
    """Like :func:`verify_loop` but also reports the registration statistics."""
    if len(candidate_cell) == 0 or len(scan) == 0:
        return LoopCheck(None, 0.0, float("inf"))
    T0 = candidate_pose.inverse() @ current_pose
    try:
        res = register_scan_to_cell(scan, candidate_cell, T0, lattice, reg_params)
    except CellMapError as e:
        log.debug("loop %d -> %d rejected: %s", candidate_index, current_index, e)
        return LoopCheck(None, 0.0, float("inf"))
    ok = (
        res.inlier_ratio >= loop_params.inlier_ratio_threshold
        and not res.degenerate
        and (res.converged or res.last_step < loop_params.max_final_step)
    )
    factor = None
    if ok:
        factor = PoseFactor(
            candidate_index, current_index, res.pose, information_matrix(scale=res.inlier_ratio), "loop"
        )
    return LoopCheck(factor, res.inlier_ratio, res.last_step)


# -- pose graph ---------------------------------------------------------------


@dataclass
class GraphResult:
    poses: list[PoseSE3]
    cost_history: list[float]
    iterations: int
    converged: bool


def _check_connected(n: int, edges, fixed: int):
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = np.zeros(n, dtype=bool)
    seen[fixed] = True
    queue = deque([fixed])
    while queue:
        k = queue.popleft()
        for m in adj[k]:
            if not seen[m]:
                seen[m] = True
                queue.append(m)
    if not seen.all():
        missing = np.flatnonzero(~seen)[:5].tolist()
        raise DisconnectedGraph(f"nodes {missing} are not connected to the fixed node")


def _factor_error(Ti: PoseSE3, Tj: PoseSE3, Z: PoseSE3) -> np.ndarray:
    return se3_log(Z.inverse() @ Ti.inverse() @ Tj)


def _robust(f: PoseFactor, e: np.ndarray) -> tuple[float, float]:
    """(cost, IRLS weight) of one factor error under its kernel."""
    s = float(e @ f.information @ e)
    if f.kind != "loop":
        return 0.5 * s, 1.0
    a = np.sqrt(s)
    if a <= LOOP_HUBER_DELTA:
        return 0.5 * s, 1.0
    return LOOP_HUBER_DELTA * (a - 0.5 * LOOP_HUBER_DELTA), LOOP_HUBER_DELTA / a


def graph_cost(poses: list[PoseSE3], factors, index) -> float:
    total = 0.0
    for f in factors:
        e = _factor_error(poses[index[f.from_index]], poses[index[f.to_index]], f.measured_relative)
        total += _robust(f, e)[0]
    return total


def optimize_pose_graph(
    nodes: list[PoseGraphNode],
    factors: list[PoseFactor],
    fixed: int | None = None,
    max_iterations: int = 50,
    tol: float = 1e-8,
) -> GraphResult:
    """Damped Gauss-Newton over all node poses with one node held fixed.

    ``fixed`` is a cell index and defaults to the first node. A step that
    would raise the total robust cost is retried with more damping, so the
    recorded cost never increases.
    """
    if not nodes:
        return GraphResult([], [0.0], 0, True)
    index = {nd.cell_index: k for k, nd in enumerate(nodes)}
    if len(index) != len(nodes):
        raise IndexMismatch("duplicate cell_index among nodes")
    fixed_pos = 0 if fixed is None else index.get(fixed)
    if fixed_pos is None:
        raise IndexMismatch(f"fixed node {fixed} is not in the graph")
    for f in factors:
        if f.from_index not in index or f.to_index not in index:
            raise IndexMismatch(f"factor {f.from_index}->{f.to_index} references a missing node")
    n = len(nodes)
    _check_connected(n, [(index[f.from_index], index[f.to_index]) for f in factors], fixed_pos)
    poses = [nd.pose for nd in nodes]
    if not factors:
        return GraphResult(poses, [0.0], 0, True)

    # Free nodes map to consecutive 6-blocks of the unknown vector.
    free = np.full(n, -1)
    free[[k for k in range(n) if k != fixed_pos]] = np.arange(n - 1)
    dim = 6 * (n - 1)
    cost = graph_cost(poses, factors, index)
    history = [cost]
    lam = 0.0
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        H, g = _linearize(poses, factors, index, free, dim)
        diag_mean = float(H.diagonal().mean()) if dim else 0.0
        accepted = False
        for _ in range(12):
            dx = _solve(H, g, lam * diag_mean)
            trial = [
                p if free[k] < 0 else se3_exp(dx[6 * free[k] : 6 * free[k] + 6]) @ p
                for k, p in enumerate(poses)
            ]
            new_cost = graph_cost(trial, factors, index)
            if new_cost <= cost:
                accepted = True
                break
            lam = 1e-4 if lam == 0.0 else lam * 10.0
        step = float(np.linalg.norm(dx))
        if not accepted:
            # No damping level reduces the cost: we sit at a minimum.
            converged = True
            history.append(cost)
            break
        poses, cost = trial, new_cost
        history.append(cost)
        lam = 0.0 if lam <= 1e-4 else lam / 10.0
        if step < tol:
            converged = True
            break
    return GraphResult(poses, history, it, converged)


def _linearize(poses, factors, index, free, dim):
    rows, cols, vals = [], [], []
    g = np.zeros(dim)
    for f in factors:
        i, j = index[f.from_index], index[f.to_index]
        Ti, Tj, Z = poses[i], poses[j], f.measured_relative
        e = _factor_error(Ti, Tj, Z)
        _, w = _robust(f, e)
        # Left perturbations of T_j and T_i enter e on the right and on the
        # left respectively; the SE(3) Jacobians carry them through the log.
        Jj = se3_left_jacobian_inv(-e) @ adjoint(Tj.inverse())
        Ji = -se3_left_jacobian_inv(e) @ adjoint((Ti @ Z).inverse())
        W = w * f.information
        blocks = [(free[i], Ji), (free[j], Jj)]
        for a, Ja in blocks:
            if a < 0:
                continue
            g[6 * a : 6 * a + 6] += Ja.T @ W @ e
            for b, Jb in blocks:
                if b < 0:
                    continue
                blk = Ja.T @ W @ Jb
                r, c = np.meshgrid(np.arange(6 * a, 6 * a + 6), np.arange(6 * b, 6 * b + 6), indexing="ij")
                rows.append(r.ravel())
                cols.append(c.ravel())
                vals.append(blk.ravel())
    if rows:
        H = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim)
        )
    else:
        H = sp.csc_matrix((dim, dim))
    return H, g


def _solve(H, g, lam: float) -> np.ndarray:
    A = H + lam * sp.identity(H.shape[0], format="csc") if lam > 0 else H
    with np.errstate(all="ignore"):
        try:
            dx = spsolve(A.tocsc(), -g)
        except RuntimeError as e:
            raise SingularSystem(str(e)) from e
    dx = np.atleast_1d(dx)
    if not np.all(np.isfinite(dx)):
        raise SingularSystem("pose-graph normal equations are singular")
    return dx


def apply_optimized_poses(cmap: CellMap, poses) -> CellMap:
    """New map with replaced anchor poses; cells are shared untouched.

    ``poses`` is a sequence aligned with the map, a ``{cell_index: pose}``
    mapping covering every cell, or a :class:`GraphResult`.
    """
    if isinstance(poses, GraphResult):
        poses = poses.poses
    if isinstance(poses, dict):
        if set(poses) != set(range(len(cmap))):
            raise IndexMismatch("pose indices do not match the map's cells")
        poses = [poses[k] for k in range(len(cmap))]
    return cmap.with_poses(poses)


def nodes_from_map(cmap: CellMap) -> list[PoseGraphNode]:
    return [PoseGraphNode(k, p) for k, p in enumerate(cmap.poses)]
