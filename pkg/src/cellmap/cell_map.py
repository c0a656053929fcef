"""The global map: an ordered list of (Cell, anchor pose) pairs."""

from __future__ import annotations

from dataclasses import dataclass, field

from cellmap.cell_gen import Cell
from cellmap.core_geom import PoseSE3
from cellmap.errors import IndexMismatch, LatticeMismatch


@dataclass
class CellMap:
    """Cells with their world-frame anchor poses; list position is the cell index."""

    n_sp: int
    cells: list[Cell] = field(default_factory=list)
    poses: list[PoseSE3] = field(default_factory=list)

    def __post_init__(self):
        self.n_sp = int(self.n_sp)
        if len(self.cells) != len(self.poses):
            raise IndexMismatch(f"{len(self.cells)} cells but {len(self.poses)} poses")
        for c in self.cells:
            if c.n_sp != self.n_sp:
                raise LatticeMismatch(f"cell built on {c.n_sp} directions, map uses {self.n_sp}")

    def __len__(self) -> int:
        return len(self.cells)

    def append(self, cell: Cell, pose: PoseSE3) -> int:
        if cell.n_sp != self.n_sp:
            raise LatticeMismatch(f"cell built on {cell.n_sp} directions, map uses {self.n_sp}")
        self.cells.append(cell)
        self.poses.append(pose)
        return len(self.cells) - 1

    @property
    def anchor_frames(self) -> list[int]:
        return [c.anchor_frame for c in self.cells]

    @property
    def total_entries(self) -> int:
        return sum(len(c) for c in self.cells)

    def with_poses(self, poses) -> CellMap:
        """Same cells (shared, not copied) under new anchor poses."""
        poses = list(poses)
        if len(poses) != len(self.cells):
            raise IndexMismatch(f"{len(poses)} poses for {len(self.cells)} cells")
        return CellMap(self.n_sp, list(self.cells), poses)

    def equals(self, other: CellMap) -> bool:
        """Bit-level equality of every cell and pose."""
        if self.n_sp != other.n_sp or len(self) != len(other):
            return False
        for a, b, pa, pb in zip(self.cells, other.cells, self.poses, other.poses):
            if not a.equals(b):
                return False
            if pa.quat.tobytes() != pb.quat.tobytes() or pa.translation.tobytes() != pb.translation.tobytes():
                return False
        return True
