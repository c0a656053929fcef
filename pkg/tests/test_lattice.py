import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cellmap.errors import InvalidCount, ZeroVector
from cellmap.lattice import Lattice, cached_lattice, generate_lattice, nearest_index


def linear_scan(directions, u):
    """Reference: lowest index among the minimal squared distances."""
    d = ((directions - u) ** 2).sum(axis=1)
    return int(np.flatnonzero(d == d.min())[0])


def random_units(rng, n):
    u = rng.normal(size=(n, 3))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def test_single_direction_lattice():
    L = generate_lattice(1)
    np.testing.assert_array_equal(L.directions, [[1.0, 0.0, 0.0]])


def test_formula_for_small_lattice():
    n = 7
    L = generate_lattice(n)
    golden = math.pi * (3 - math.sqrt(5))
    for i in range(n):
        z = 1 - (2 * i + 1) / n
        r = math.sqrt(1 - z * z)
        np.testing.assert_allclose(L.directions[i], [r * math.cos(i * golden), r * math.sin(i * golden), z], atol=1e-15)


@pytest.mark.parametrize("bad", [0, -3, 2.5])
def test_invalid_counts(bad):
    with pytest.raises(InvalidCount):
        generate_lattice(bad)


def test_directions_unit_distinct_and_deterministic(lattice):
    np.testing.assert_allclose(np.linalg.norm(lattice.directions, axis=1), 1.0, atol=1e-12)
    assert len(np.unique(lattice.directions, axis=0)) == lattice.n_sp
    assert generate_lattice(50000).directions.tobytes() == lattice.directions.tobytes()


def test_minimum_pairwise_angle_for_1000_points():
    L = generate_lattice(1000)
    dots = L.directions @ L.directions.T
    np.fill_diagonal(dots, -1.0)
    min_angle = math.acos(min(1.0, dots.max()))
    assert min_angle > 0.8 * math.sqrt(4 * math.pi / 1000)


def test_covering_radius_for_default_lattice(lattice):
    u = random_units(np.random.default_rng(0), 100_000)
    j = lattice.nearest_unit(u)
    ang = np.arccos(np.clip((lattice.directions[j] * u).sum(axis=1), -1, 1))
    assert ang.max() < 1.5 * math.sqrt(4 * math.pi / lattice.n_sp)


def test_lattice_point_is_its_own_nearest(lattice):
    for k in (0, 1, 17, 24999, 49999):
        assert nearest_index(lattice, lattice.directions[k] * 7.5) == k


def test_north_pole_maps_to_index_zero(lattice):
    assert nearest_index(lattice, [0, 0, 1]) == 0


def test_agrees_with_linear_scan_on_random_directions(lattice):
    u = random_units(np.random.default_rng(1), 10_000)
    got = lattice.nearest_unit(u)
    want = np.array([linear_scan(lattice.directions, x) for x in u])
    np.testing.assert_array_equal(got, want)


def test_agrees_with_linear_scan_on_near_ties():
    # Midpoints between neighbouring directions are the hardest queries.
    L = generate_lattice(500)
    _, nb = L.tree.query(L.directions, k=4)
    q = L.directions[nb[:, 0]] + L.directions[nb[:, 1:]].transpose(1, 0, 2)
    q = q.reshape(-1, 3)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    want = np.array([linear_scan(L.directions, x) for x in q])
    np.testing.assert_array_equal(L.nearest_unit(q), want)


def test_exact_tie_goes_to_lowest_index():
    L = Lattice(4)
    # Overwrite with a symmetric configuration to force an exact tie.
    dirs = np.array([[1.0, 0, 0], [0, 1.0, 0], [-1.0, 0, 0], [0, -1.0, 0]])
    object.__setattr__(L, "directions", dirs)
    from scipy.spatial import cKDTree

    L.tree = cKDTree(dirs)
    q = np.array([[0.0, 0.0, 1.0]])
    assert L.nearest_unit(q)[0] == 0
    q = np.array([[-1.0, -1.0, 0.0]]) / math.sqrt(2)
    assert L.nearest_unit(q)[0] == 2


@given(st.tuples(*[st.floats(-1, 1)] * 3), st.floats(1e-3, 1e3))
def test_scale_invariance(v, s):
    v = np.array(v)
    if np.linalg.norm(v) < 1e-6:
        return
    L = cached_lattice(2000)
    assert nearest_index(L, v) == nearest_index(L, s * v)


def test_zero_vector_rejected(lattice):
    with pytest.raises(ZeroVector):
        nearest_index(lattice, [0, 0, 0])


def test_concurrent_queries_match_serial(lattice):
    u = random_units(np.random.default_rng(2), 40_000)
    serial = lattice.nearest_unit(u)
    with ThreadPoolExecutor(4) as pool:
        parts = list(pool.map(lattice.nearest_unit, np.array_split(u, 8)))
    np.testing.assert_array_equal(np.concatenate(parts), serial)


def test_mean_spacing(lattice):
    assert lattice.mean_spacing == pytest.approx(math.sqrt(4 * math.pi / 50000))
