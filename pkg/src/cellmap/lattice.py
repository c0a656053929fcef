"""Spherical Fibonacci lattice and its shared nearest-direction index."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from cellmap.errors import InvalidCount, ZeroVector

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))

# Neighbours fetched from the tree before the exact tie-break rescoring.
_CANDIDATES = 2


def fibonacci_directions(n_sp: int) -> np.ndarray:
    i = np.arange(n_sp, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / n_sp
    az = i * GOLDEN_ANGLE
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    d = np.stack([r * np.cos(az), r * np.sin(az), z], axis=1)
    # Renormalize so every direction is unit length to machine precision.
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _sq_dist(directions: np.ndarray, u: np.ndarray) -> np.ndarray:
    return ((directions - u) ** 2).sum(axis=-1)


class Lattice:
    """``n_sp`` unit directions and a KD-tree over them.

    The lattice is immutable after construction. ``cKDTree`` queries are
    read-only, so one instance may be shared by any number of threads.
    """

    def __init__(self, n_sp: int):
        if int(n_sp) != n_sp or n_sp < 1:
            raise InvalidCount(f"n_sp must be a positive integer, got {n_sp!r}")
        self.n_sp = int(n_sp)
        self.directions = fibonacci_directions(self.n_sp)
        self.directions.setflags(write=False)
        self.tree = cKDTree(self.directions)

    def __len__(self) -> int:
        return self.n_sp

    @property
    def mean_spacing(self) -> float:
        """Angular radius (rad) of the solid angle owned by one direction."""
        return math.sqrt(4.0 * math.pi / self.n_sp)

    def nearest_unit(self, units: np.ndarray) -> np.ndarray:
        """Nearest lattice index for each row of an (N, 3) array of unit vectors.

        The tree proposes a few candidates which are rescored with the same
        arithmetic a linear scan would use; equal distances go to the lower
        index.
        """
        units = np.asarray(units, dtype=float).reshape(-1, 3)
        if len(units) == 0:
            return np.zeros(0, dtype=np.int64)
        k = min(_CANDIDATES, self.n_sp)
        _, idx = self.tree.query(units, k=k)
        if k == 1:
            return np.asarray(idx, dtype=np.int64).reshape(-1)
        idx = np.asarray(idx, dtype=np.int64)
        d = _sq_dist(self.directions[idx], units[:, None, :])
        # Lexicographic (distance, index) minimum.
        order = np.lexsort((idx, d), axis=-1)
        return np.take_along_axis(idx, order[:, :1], axis=1)[:, 0]

    def nearest(self, points: np.ndarray) -> np.ndarray:
        """Nearest lattice index for arbitrary nonzero points, shape (N, 3)."""
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        n = np.linalg.norm(p, axis=1)
        if np.any(n == 0.0):
            raise ZeroVector("cannot project the zero vector onto the sphere")
        return self.nearest_unit(p / n[:, None])

    def nearest_linear_scan(self, p) -> int:
        """Exhaustive reference query, used for verification."""
        p = np.asarray(p, dtype=float).reshape(3)
        n = np.linalg.norm(p)
        if n == 0.0:
            raise ZeroVector("cannot project the zero vector onto the sphere")
        return int(np.argmin(_sq_dist(self.directions, p / n)))


def generate_lattice(n_sp: int) -> Lattice:
    return Lattice(n_sp)


@lru_cache(maxsize=4)
def cached_lattice(n_sp: int) -> Lattice:
    """Lattices are fully determined by ``n_sp``; build each size once."""
    return Lattice(n_sp)


def nearest_index(lattice: Lattice, p) -> int:
    return int(lattice.nearest(np.asarray(p, dtype=float).reshape(1, 3))[0])
