"""Compact LiDAR maps built from per-direction plane parameters on a fixed spherical lattice."""

from cellmap.backend import (
    GraphResult,
    LoopParams,
    PoseFactor,
    PoseGraphNode,
    apply_optimized_poses,
    find_loop_candidates,
    optimize_pose_graph,
    verify_loop,
)
from cellmap.cell_gen import Cell, CellGenParams, PlaneEntry, fit_plane, generate_cell, segment_map
from cellmap.cell_map import CellMap
from cellmap.core_geom import PoseSE3, Scan, se3_exp, se3_log
from cellmap.errors import CellMapError
from cellmap.formats import (
    KittiDataset,
    ingest_kitti,
    load_cellmap,
    read_trajectory,
    reconstruct_cell_points,
    save_cellmap,
    write_trajectory,
)
from cellmap.lattice import Lattice, generate_lattice, nearest_index
from cellmap.metrics import Trajectory, ate_rmse, kitti_relative_error, umeyama_align
from cellmap.pipeline import PipelineConfig, PipelineResult, accumulate_local_map, run_pipeline
from cellmap.registration import (
    RegistrationParams,
    RegistrationResult,
    bidirectional_register,
    find_correspondences,
    register_scan_to_cell,
)

__version__ = "0.1.0"

__all__ = [
    "Cell",
    "CellGenParams",
    "CellMap",
    "CellMapError",
    "GraphResult",
    "KittiDataset",
    "Lattice",
    "LoopParams",
    "PipelineConfig",
    "PipelineResult",
    "PlaneEntry",
    "PoseFactor",
    "PoseGraphNode",
    "PoseSE3",
    "RegistrationParams",
    "RegistrationResult",
    "Scan",
    "Trajectory",
    "accumulate_local_map",
    "apply_optimized_poses",
    "ate_rmse",
    "bidirectional_register",
    "find_correspondences",
    "find_loop_candidates",
    "fit_plane",
    "generate_cell",
    "generate_lattice",
    "ingest_kitti",
    "kitti_relative_error",
    "load_cellmap",
    "nearest_index",
    "optimize_pose_graph",
    "read_trajectory",
    "reconstruct_cell_points",
    "register_scan_to_cell",
    "run_pipeline",
    "save_cellmap",
    "se3_exp",
    "se3_log",
    "segment_map",
    "umeyama_align",
    "verify_loop",
    "write_trajectory",
]
