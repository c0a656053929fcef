"""Trajectory containers and accuracy metrics (aligned ATE RMSE, KITTI drift)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cellmap.core_geom import PoseSE3
from cellmap.errors import DegenerateTrajectory, TrajectoryTooShort

KITTI_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)


@dataclass
class Trajectory:
    frame_ids: list[int] = field(default_factory=list)
    poses: list[PoseSE3] = field(default_factory=list)

    def __post_init__(self):
        self.frame_ids = [int(f) for f in self.frame_ids]
        if len(self.frame_ids) != len(self.poses):
            raise ValueError("frame_ids and poses differ in length")
        if any(b <= a for a, b in zip(self.frame_ids, self.frame_ids[1:])):
            raise ValueError("frame ids must be strictly increasing")

    @classmethod
    def from_poses(cls, poses) -> Trajectory:
        poses = list(poses)
        return cls(list(range(len(poses))), poses)

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self):
        return iter(zip(self.frame_ids, self.poses))

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def subset(self, frame_ids) -> Trajectory:
        lookup = dict(zip(self.frame_ids, self.poses))
        ids = [f for f in frame_ids if f in lookup]
        return Trajectory(ids, [lookup[f] for f in ids])

    def transformed(self, G: PoseSE3) -> Trajectory:
        return Trajectory(list(self.frame_ids), [G @ p for p in self.poses])

    def path_length(self) -> float:
        p = self.positions()
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) if len(p) > 1 else 0.0


def _matched(est: Trajectory, gt: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    common = sorted(set(est.frame_ids) & set(gt.frame_ids))
    a = est.subset(common).positions()
    b = gt.subset(common).positions()
    return a, b


def _umeyama(src: np.ndarray, dst: np.ndarray):
    """Rigid (R, t, singular values) minimizing sum |R src + t - dst|^2."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, S, Vt = np.linalg.svd(H)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s, S


def umeyama_align(est: Trajectory, gt: Trajectory, allow_degenerate: bool = False) -> PoseSE3:
    """Rigid transform ``A`` (scale fixed to 1) minimizing ``sum |A est_i - gt_i|^2``.

    Raises DegenerateTrajectory for fewer than three matched frames, for
    coincident positions, or when the optimal rotation is not unique
    (collinear data) unless ``allow_degenerate`` is set.
    """
    src, dst = _matched(est, gt)
    if len(src) < 3:
        raise DegenerateTrajectory("need at least three matched frames")
    if np.ptp(src, axis=0).max() == 0 or np.ptp(dst, axis=0).max() == 0:
        raise DegenerateTrajectory("positions are coincident")
    R, t, S = _umeyama(src, dst)
    if not allow_degenerate and S[1] <= 1e-9 * S[0]:
        raise DegenerateTrajectory("positions are collinear; rotation is not unique")
    return PoseSE3.from_rt(R, t)


def ate_rmse(est: Trajectory, gt: Trajectory) -> float:
    """RMSE of position residuals after rigid alignment of ``est`` onto ``gt``.

    Collinear inputs are accepted: the optimal rotation is then not unique but
    the minimal residual is.
    """
    A = umeyama_align(est, gt, allow_degenerate=True)
    src, dst = _matched(est, gt)
    r = A.apply(src) - dst
    return float(np.sqrt((r**2).sum(axis=1).mean()))


def kitti_relative_error(est: Trajectory, gt: Trajectory, lengths=KITTI_LENGTHS, step: int = 1) -> float:
    """Average relative translational error in percent over fixed path lengths."""
    common = sorted(set(est.frame_ids) & set(gt.frame_ids))
    E = [p.matrix() for p in est.subset(common).poses]
    Gm = [p.matrix() for p in gt.subset(common).poses]
    pos = np.array([g[:3, 3] for g in Gm]).reshape(-1, 3)
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos, axis=0), axis=1))])
    if len(dist) == 0 or dist[-1] < min(lengths):
        raise TrajectoryTooShort(f"ground-truth path is {dist[-1] if len(dist) else 0:.1f} m long")
    errors = []
    for first in range(0, len(Gm), step):
        for length in lengths:
            last = int(np.searchsorted(dist, dist[first] + length, side="right"))
            if last >= len(Gm):
                continue
            d_gt = np.linalg.inv(Gm[first]) @ Gm[last]
            d_est = np.linalg.inv(E[first]) @ E[last]
            err = np.linalg.inv(d_est) @ d_gt
            errors.append(np.linalg.norm(err[:3, 3]) / length)
    if not errors:
        raise TrajectoryTooShort("no segment of the evaluated lengths fits")
    return 100.0 * float(np.mean(errors))
