"""Streaming map construction: local-map accumulation, cell generation and the backend."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from cellmap.backend import (
    LoopParams,
    PoseFactor,
    PoseGraphNode,
    apply_optimized_poses,
    check_loop,
    find_loop_candidates,
    information_matrix,
    optimize_pose_graph,
)
from cellmap.cell_gen import Cell, CellGenParams, generate_cell
from cellmap.cell_map import CellMap
from cellmap.core_geom import PoseSE3, Scan
from cellmap.errors import CellMapError, EmptyDataset, MissingPose
from cellmap.lattice import cached_lattice
from cellmap.metrics import Trajectory
from cellmap.registration import RegistrationParams, bidirectional_register

log = logging.getLogger(__name__)

# Distances within this of the spacing count as reaching it, so that poses
# sampled at exact multiples of the spacing open a new cell on that frame.
SPACING_EPS = 1e-9


class OdometryInput(NamedTuple):
    frame_id: int
    pose: PoseSE3
    timestamp: float | None = None


@dataclass(frozen=True)
class PipelineConfig:
    cell_spacing: float = 6.0
    n_sp: int = 50000
    cell_params: CellGenParams = CellGenParams()
    reg_params: RegistrationParams = RegistrationParams()
    loop_params: LoopParams = LoopParams()
    enable_bidirectional: bool = True
    enable_loop: bool = True
    # Bidirectional results whose last update exceeds this are not trusted
    # and the odometry relative pose is used for that edge instead.
    max_final_step: float = 1e-2
    workers: int = 1

    def __post_init__(self):
        if not self.cell_spacing > 0:
            raise ValueError("cell_spacing must be positive")


@dataclass
class LocalMap:
    anchor_frame: int
    anchor_pose: PoseSE3
    anchor_scan: Scan
    frame_ids: list[int]
    frame_poses: list[PoseSE3]
    points_world: np.ndarray


def accumulate_local_map(stream: Iterable, config: PipelineConfig = PipelineConfig()) -> Iterator[LocalMap]:
    """Group a ``(Scan, pose)`` stream into local maps, one per anchor frame.

    A map opened at anchor k takes frames while their distance to P_k stays
    below ``cell_spacing``; the first frame at or beyond it closes the map
    and becomes the next anchor. The trailing partial map is emitted too.
    """
    current: LocalMap | None = None
    chunks: list[np.ndarray] = []
    last_id = None
    for k, item in enumerate(stream):
        scan, pose = item
        fid = scan.frame_id if scan.frame_id is not None else k
        if pose is None:
            raise MissingPose(f"frame {fid} has no pose")
        if last_id is not None and fid <= last_id:
            raise ValueError(f"frame ids must increase (got {fid} after {last_id})")
        last_id = fid
        if current is not None:
            dist = float(np.linalg.norm(pose.translation - current.anchor_pose.translation))
            if dist >= config.cell_spacing - SPACING_EPS:
                current.points_world = np.vstack(chunks) if chunks else np.zeros((0, 3))
                yield current
                current = None
        if current is None:
            current = LocalMap(fid, pose, scan, [], [], np.zeros((0, 3)))
            chunks = []
        current.frame_ids.append(fid)
        current.frame_poses.append(pose)
        if len(scan):
            chunks.append(pose.apply(scan.points))
    if current is not None:
        current.points_world = np.vstack(chunks) if chunks else np.zeros((0, 3))
        yield current


@dataclass
class PipelineResult:
    cellmap: CellMap
    trajectory: Trajectory  # every input frame, corrected by its anchor's update
    odometry: Trajectory
    factors: list[PoseFactor] = field(default_factory=list)
    skipped_anchors: list[int] = field(default_factory=list)
    loop_checks: list[tuple[int, int, float, bool]] = field(default_factory=list)

    @property
    def loop_factors(self) -> list[PoseFactor]:
        return [f for f in self.factors if f.kind == "loop"]


def run_pipeline(dataset: Iterable, config: PipelineConfig = PipelineConfig()) -> PipelineResult:
    """Build a CellMap from a ``(Scan, odometry pose)`` stream.

    Each closed local map becomes a cell anchored at its first frame. The
    edge to the previous cell comes from bidirectional registration when
    enabled and trustworthy, else from odometry. Verified loops trigger a
    full pose-graph optimization. With both stages off the anchor poses are
    the input odometry, untouched.
    """
    lattice = cached_lattice(config.n_sp)
    cmap = CellMap(config.n_sp)
    odo_ids: list[int] = []
    odo_poses: list[PoseSE3] = []
    frame_anchor: list[int] = []  # cell index owning each frame, -1 before the first cell
    raw_anchor: list[PoseSE3] = []  # odometry pose of each cell's anchor
    anchor_scans: list[Scan] = []
    factors: list[PoseFactor] = []
    skipped: list[int] = []
    checks: list[tuple[int, int, float, bool]] = []

    def optimize():
        nodes = [PoseGraphNode(k, p) for k, p in enumerate(cmap.poses)]
        res = optimize_pose_graph(nodes, factors, fixed=0)
        return apply_optimized_poses(cmap, res.poses)

    seen_any = False
    corrected = False  # some anchor pose differs from odometry
    pending = False  # factors added since the last solve
    for lm in accumulate_local_map(dataset, config):
        seen_any = True
        odo_ids.extend(lm.frame_ids)
        odo_poses.extend(lm.frame_poses)
        try:
            cell = generate_cell(
                lm.points_world, lm.anchor_pose, lattice, config.cell_params, lm.anchor_frame, config.workers
            )
            if len(cell) == 0:
                raise CellMapError("no valid planes")
        except CellMapError as e:
            log.warning("skipping cell at frame %d: %s", lm.anchor_frame, e)
            skipped.append(lm.anchor_frame)
            frame_anchor.extend([len(cmap) - 1] * len(lm.frame_ids))
            continue

        k = len(cmap)
        if k == 0:
            pose = lm.anchor_pose
        else:
            odo_rel = raw_anchor[-1].inverse() @ lm.anchor_pose
            rel, kind = odo_rel, "odometry"
            if config.enable_bidirectional:
                rel, kind = _bidirectional_edge(
                    cmap.cells[-1], anchor_scans[-1], cell, lm.anchor_scan, odo_rel, lattice, config
                )
            factors.append(PoseFactor(k - 1, k, rel, information_matrix(), kind))
            if kind == "odometry" and not corrected:
                pose = lm.anchor_pose
            else:
                # Chain the new node onto the current estimate of its predecessor.
                pose = cmap.poses[-1] @ rel
                corrected = True
                pending = True
        cmap.append(cell, pose)
        raw_anchor.append(lm.anchor_pose)
        anchor_scans.append(lm.anchor_scan)
        frame_anchor.extend([k] * len(lm.frame_ids))

        if config.enable_loop and k > 0:
            added = False
            for c in find_loop_candidates(cmap, k, config.loop_params):
                chk = check_loop(
                    lm.anchor_scan, cmap.cells[c], cmap.poses[c], cmap.poses[k], lattice,
                    config.reg_params, config.loop_params, c, k,
                )
                checks.append((c, k, chk.inlier_ratio, chk.factor is not None))
                if chk.factor is not None:
                    log.info("loop %d -> %d verified (inlier ratio %.3f)", c, k, chk.inlier_ratio)
                    factors.append(chk.factor)
                    added = True
            if added:
                cmap = optimize()
                corrected, pending = True, False

    if not seen_any:
        raise EmptyDataset("dataset contains no frames")
    if pending:
        cmap = optimize()

    # Frames of a cell whose anchor kept its odometry pose pass through
    # untouched, so disabling every correction reproduces the input exactly.
    corr = [
        None if cmap.poses[k] is raw_anchor[k] else cmap.poses[k] @ raw_anchor[k].inverse()
        for k in range(len(cmap))
    ]
    traj = [p if a < 0 or corr[a] is None else corr[a] @ p for a, p in zip(frame_anchor, odo_poses)]
    return PipelineResult(
        cmap, Trajectory(odo_ids, traj), Trajectory(odo_ids, odo_poses), factors, skipped, checks
    )


def _bidirectional_edge(cell_a: Cell, scan_a: Scan, cell_b: Cell, scan_b: Scan, odo_rel, lattice, config):
    try:
        res = bidirectional_register(cell_a, scan_a, cell_b, scan_b, odo_rel, lattice, config.reg_params)
    except CellMapError as e:
        log.info("bidirectional registration failed (%s); using odometry", e)
        return odo_rel, "odometry"
    if not res.degenerate and (res.converged or res.last_step < config.max_final_step):
        return res.pose, "bidirectional"
    log.info("bidirectional registration did not settle (step %.2e); using odometry", res.last_step)
    return odo_rel, "odometry"
