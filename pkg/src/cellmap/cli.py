"""Command-line interface: ``cellmap {build,reconstruct,eval,synth,inspect}``.

Exit status is 0 on success, 1 on a usage error and 2 on a data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from cellmap.backend import LoopParams
from cellmap.cell_gen import CellGenParams
from cellmap.errors import CellMapError
from cellmap.formats import (
    KITTI_VERTICAL_ANGLE_DEG,
    KittiDataset,
    inspect_cellmap,
    load_cellmap,
    read_trajectory,
    reconstruct_map_points,
    save_cellmap,
    write_dataset,
    write_ply,
    write_trajectory,
)
from cellmap.lattice import cached_lattice
from cellmap.metrics import ate_rmse, kitti_relative_error
from cellmap.pipeline import PipelineConfig, run_pipeline
from cellmap.registration import RegistrationParams

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

log = logging.getLogger("cellmap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(kind):
    def conv(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return conv


def _fraction(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cellmap", description="Compact LiDAR maps on a fixed spherical lattice.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    b = sub.add_parser("build", help="build a cellmap from a KITTI-layout dataset")
    b.add_argument("dataset", type=Path, help="directory with velodyne/*.bin and poses.txt")
    b.add_argument("-o", "--output", type=Path, required=True, help="cellmap file to write")
    b.add_argument("-t", "--trajectory", type=Path, help="corrected per-frame trajectory to write")
    b.add_argument("--poses", type=Path, help="pose file (default: DATASET/poses.txt)")
    b.add_argument("--cell-spacing", type=_positive(float), default=6.0)
    b.add_argument("--n-sp", type=_positive(int), default=50000)
    b.add_argument("--iterations", type=_positive(int), default=RegistrationParams.max_iterations)
    b.add_argument("--loop-candidates", type=_positive(int), default=LoopParams.n_loop)
    b.add_argument("--inlier-threshold", type=_fraction, default=LoopParams.inlier_ratio_threshold)
    b.add_argument("--no-loop", action="store_true", help="disable loop closure")
    b.add_argument("--no-bidir", action="store_true", help="disable bidirectional registration")
    b.add_argument(
        "--rectify-vertical-angle",
        nargs="?",
        type=float,
        const=KITTI_VERTICAL_ANGLE_DEG,
        default=None,
        metavar="DEG",
        help=f"raise every point's elevation (default angle {KITTI_VERTICAL_ANGLE_DEG} deg)",
    )
    b.add_argument("--seed", type=int, default=0, help="plane-fitting seed")
    b.add_argument("--downsample", type=float, default=0.0, metavar="METERS", help="voxel size for input scans")
    b.add_argument("--workers", type=_positive(int), default=1)
    b.set_defaults(func=cmd_build)

    r = sub.add_parser("reconstruct", help="export the map's planes as a PLY point cloud")
    r.add_argument("cellmap", type=Path)
    r.add_argument("-o", "--output", type=Path, required=True)
    r.add_argument("--densify", action="store_true", help="emit a small disk per plane")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="compare a trajectory file against ground truth")
    e.add_argument("estimate", type=Path)
    e.add_argument("ground_truth", type=Path)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic ray-cast dataset")
    s.add_argument("output", type=Path)
    s.add_argument("--scene", choices=("square_loop", "corridor", "box_room"), default="square_loop")
    s.add_argument("--step", type=_positive(float), default=1.0, help="meters between frames")
    s.add_argument("--frames", type=_positive(int), help="frame count (straight scenes)")
    s.add_argument("--side", type=_positive(float), default=60.0, help="square loop side length")
    s.add_argument("--drift", type=float, default=0.01, help="odometry translation drift per meter")
    s.add_argument("--rot-drift", type=float, default=0.0, help="odometry rotation drift (rad) per meter")
    s.add_argument("--noise", type=float, default=0.02, help="range noise sigma in meters")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    i = sub.add_parser("inspect", help="print cellmap statistics")
    i.add_argument("cellmap", type=Path)
    i.set_defaults(func=cmd_inspect)
    return p


def config_from_args(args) -> PipelineConfig:
    return PipelineConfig(
        cell_spacing=args.cell_spacing,
        n_sp=args.n_sp,
        cell_params=CellGenParams(seed=args.seed),
        reg_params=RegistrationParams(max_iterations=args.iterations),
        loop_params=LoopParams(n_loop=args.loop_candidates, inlier_ratio_threshold=args.inlier_threshold),
        enable_bidirectional=not args.no_bidir,
        enable_loop=not args.no_loop,
        workers=args.workers,
    )


def cmd_build(args, out) -> int:
    config = config_from_args(args)
    angle = args.rectify_vertical_angle
    ds = KittiDataset(
        args.dataset,
        poses=args.poses,
        rectify=angle is not None,
        rectify_angle_deg=KITTI_VERTICAL_ANGLE_DEG if angle is None else angle,
        downsample=args.downsample,
    )
    res = run_pipeline(ds, config)
    size = save_cellmap(res.cellmap, args.output)
    if args.trajectory:
        write_trajectory(args.trajectory, res.trajectory)
    print(f"cells {len(res.cellmap)}", file=out)
    print(f"entries {res.cellmap.total_entries}", file=out)
    print(f"bytes {size}", file=out)
    print(f"loops {len(res.loop_factors)}", file=out)
    print(f"skipped {len(res.skipped_anchors)}", file=out)
    return EXIT_OK


def cmd_reconstruct(args, out) -> int:
    cmap = load_cellmap(args.cellmap)
    pts, nrm = reconstruct_map_points(cmap, cached_lattice(cmap.n_sp), densify=args.densify)
    write_ply(args.output, pts, nrm)
    print(f"points {len(pts)}", file=out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    est = read_trajectory(args.estimate)
    gt = read_trajectory(args.ground_truth)
    print(f"ate_rmse {ate_rmse(est, gt):.6f}", file=out)
    try:
        print(f"kitti_ate_percent {kitti_relative_error(est, gt):.6f}", file=out)
    except CellMapError as e:
        print(f"kitti_ate_percent n/a ({e})", file=out)
    return EXIT_OK


def cmd_synth(args, out) -> int:
    from cellmap import synth

    if args.scene == "square_loop":
        scene = synth.square_loop_world(side=args.side)
        gt = synth.square_loop_trajectory(side=args.side, step=args.step)
    elif args.scene == "corridor":
        n = args.frames or 60
        length = n * args.step + 20.0
        scene = synth.corridor(5.0, 3.0, length, pillar_spacing=5.0, pillar_depth=1.0, pillar_width=1.0)
        gt = synth.straight_trajectory(n, args.step, start=(10.0, 0.0, 1.5))
    else:
        n = args.frames or 12
        scene = synth.box_room()
        gt = synth.straight_trajectory(n, args.step, start=(-0.5 * n * args.step, 0.0, 0.0))
    odo = synth.drift_odometry(
        gt, (args.drift, args.rot_drift), seed=args.seed, direction=(0.0, 0.0, 1.0)
    )
    ds = synth.SyntheticDataset(scene, gt, odo, noise_sigma=args.noise, seed=args.seed)
    write_dataset(args.output, ds, gt)
    print(f"frames {len(gt)}", file=out)
    print(f"scene {scene.label}", file=out)
    return EXIT_OK


def cmd_inspect(args, out) -> int:
    info = inspect_cellmap(args.cellmap)
    print(f"n_sp {info.n_sp}", file=out)
    print(f"cell_count {info.cell_count}", file=out)
    print(f"entries {info.total_entries}", file=out)
    print(f"bytes {info.size}", file=out)
    if info.cell_count:
        print(f"mean_cell_bytes {(info.size) / info.cell_count:.1f}", file=out)
    return EXIT_OK


def main(argv=None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(parser.format_usage().rstrip(), file=err)
        print(str(e), file=err)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=err, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except (CellMapError, OSError, ValueError) as e:
        print(f"cellmap {args.command}: error: {e}", file=err)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
