import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from cellmap.core_geom import (
    PoseSE3,
    Scan,
    adjoint,
    pose_error,
    se3_exp,
    se3_left_jacobian_inv,
    se3_log,
    skew,
    transform_point,
    voxel_downsample,
)
from cellmap.errors import AngleNearPi

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


@st.composite
def twists(draw, max_angle=math.pi - 1e-3):
    rho = draw(vec3)
    axis = draw(vec3)
    n = np.linalg.norm(axis)
    angle = draw(st.floats(0, max_angle))
    phi = axis / n * angle if n > 1e-6 else np.zeros(3)
    return np.concatenate([rho, phi])


poses = twists().map(se3_exp)


def hat(xi):
    A = np.zeros((4, 4))
    A[:3, :3] = skew(xi[3:])
    A[:3, 3] = xi[:3]
    return A


# -- exp / log -------------------------------------------------------------------

def test_exp_zero_is_identity_exactly():
    P = se3_exp(np.zeros(6))
    assert np.array_equal(P.quat, [1.0, 0.0, 0.0, 0.0])
    assert np.array_equal(P.translation, np.zeros(3))


def test_exp_quarter_turn_about_z():
    P = se3_exp([0, 0, 0, 0, 0, math.pi / 2])
    np.testing.assert_allclose(P.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    np.testing.assert_allclose(P.translation, 0.0, atol=0)


def test_exp_half_turn_translation_matches_integration():
    xi = np.array([1.0, 0, 0, 0, 0, math.pi])
    # Closed form: J(phi) rho = rho + (2/pi^2) [phi]x rho + (1/pi^2) [phi]x^2 rho = (0, 2/pi, 0).
    expected = np.array([0.0, 2.0 / math.pi, 0.0])
    P = se3_exp(xi)
    np.testing.assert_allclose(P.translation, expected, atol=1e-12)
    # Independent oracle: 1000-step product integration of the flow.
    M = np.linalg.matrix_power(expm(hat(xi) / 1000.0), 1000)
    np.testing.assert_allclose(P.matrix(), M, atol=1e-9)


@given(twists(max_angle=3.0))
def test_exp_matches_matrix_exponential(xi):
    np.testing.assert_allclose(se3_exp(xi).matrix(), expm(hat(xi)), atol=1e-9 * (1 + np.abs(xi).max()))


def test_log_of_identity_is_zero():
    assert np.array_equal(se3_log(PoseSE3()), np.zeros(6))


def test_log_pure_translation():
    np.testing.assert_allclose(se3_log(PoseSE3(translation=[1, 2, 3])), [1, 2, 3, 0, 0, 0], atol=0)


@given(twists(max_angle=math.pi - 1e-5))
def test_exp_log_roundtrip(xi):
    P = se3_exp(xi)
    Q = se3_exp(se3_log(P))
    t_err, r_err = pose_error(P, Q)
    assert t_err < 1e-9 * (1 + np.linalg.norm(P.translation))
    assert r_err < 1e-9


@given(twists(max_angle=math.pi - 1e-3))
def test_log_exp_roundtrip_on_tangent(xi):
    np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-8 * (1 + np.abs(xi).max()))


def test_small_angle_branch_is_continuous():
    for th in (1e-10, 1e-9, 1e-8, 1.1e-8, 1e-7):
        xi = np.array([0.3, -0.2, 0.1, th, -th, 0.5 * th])
        np.testing.assert_allclose(se3_exp(xi).matrix(), expm(hat(xi)), atol=1e-15)
        np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-15)


def test_log_rejects_angles_near_pi():
    with pytest.raises(AngleNearPi):
        se3_log(se3_exp([0, 0, 0, 0, 0, math.pi - 1e-7]))


def test_left_jacobian_inverse_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(20):
        phi = rng.normal(size=3)
        phi *= rng.uniform(0.0, 2.5) / np.linalg.norm(phi)
        xi = np.concatenate([rng.normal(size=3), phi])
        Jinv = se3_left_jacobian_inv(xi)
        # Left Jacobian by differences: log(exp(d) exp(xi)) ~ xi + Jl^-1 d.
        h = 1e-6
        num = np.zeros((6, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            num[:, k] = (se3_log(se3_exp(d) @ se3_exp(xi)) - se3_log(se3_exp(-d) @ se3_exp(xi))) / (2 * h)
        np.testing.assert_allclose(Jinv, num, atol=1e-7)


@given(poses, twists(max_angle=2.0))
def test_adjoint_identity(P, xi):
    lhs = P @ se3_exp(xi) @ P.inverse()
    rhs = se3_exp(adjoint(P) @ xi)
    t, r = pose_error(lhs, rhs)
    assert t < 1e-8 * (1 + np.linalg.norm(P.translation)) ** 2 and r < 1e-9


# -- group structure ---------------------------------------------------------------

@given(poses, poses, poses)
def test_composition_is_associative(a, b, c):
    x, y = (a @ b) @ c, a @ (b @ c)
    np.testing.assert_allclose(x.matrix(), y.matrix(), atol=1e-12 * (1 + np.abs(x.matrix()).max()))


@given(poses)
def test_inverse_is_two_sided(P):
    for Q in (P @ P.inverse(), P.inverse() @ P):
        t, r = pose_error(Q, PoseSE3())
        assert t < 1e-9 and r < 1e-9


@given(poses, poses)
def test_quaternion_stays_unit_after_composition(a, b):
    assert abs(np.linalg.norm((a @ b).quat) - 1.0) < 1e-9


@given(poses)
def test_reconstructing_a_pose_is_bit_exact(P):
    Q = PoseSE3(P.quat, P.translation)
    assert Q.quat.tobytes() == P.quat.tobytes()


# -- points ---------------------------------------------------------------------

def test_transform_point_examples():
    np.testing.assert_array_equal(transform_point(PoseSE3(), [1, 2, 3]), [1, 2, 3])
    R = se3_exp([0, 0, 0, 0, 0, math.pi / 2])
    np.testing.assert_allclose(transform_point(R, [1, 0, 0]), [0, 1, 0], atol=1e-15)


@given(poses, poses, vec3)
def test_compose_then_apply(a, b, p):
    np.testing.assert_allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-12 * (1 + np.abs(p).max()) * 20)


@given(poses, vec3, vec3)
def test_transform_is_rigid(P, p, q):
    d0 = np.linalg.norm(p - q)
    d1 = np.linalg.norm(P.apply(p) - P.apply(q))
    assert abs(d0 - d1) < 1e-9


def test_skew_examples():
    assert np.array_equal(skew([0, 0, 0]), np.zeros((3, 3)))
    np.testing.assert_array_equal(skew([1, 0, 0]) @ [0, 1, 0], [0, 0, 1])


@given(vec3, vec3)
def test_skew_is_cross_product_and_antisymmetric(v, u):
    S = skew(v)
    np.testing.assert_allclose(S @ u, np.cross(v, u), atol=1e-12)
    assert np.array_equal(S.T, -S)


def test_pose_rejects_bad_input():
    with pytest.raises(ValueError):
        PoseSE3([0, 0, 0, 0])
    with pytest.raises(ValueError):
        PoseSE3(translation=[np.nan, 0, 0])


def test_scan_drops_close_and_nonfinite_points():
    s = Scan(np.array([[0.1, 0, 0], [1, 0, 0], [np.inf, 0, 0], [0, 0.49, 0], [0, 0, 0.5]]), 3)
    np.testing.assert_array_equal(s.points, [[1, 0, 0], [0, 0, 0.5]])
    assert s.frame_id == 3
    assert not s.points.flags.writeable


def test_voxel_downsample_keeps_first_point_per_voxel():
    p = np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.5, 0, 0], [0.3, 0.3, 0.3]])
    np.testing.assert_array_equal(voxel_downsample(p, 1.0), p[[0, 2]])
    assert voxel_downsample(p, 0.0) is p
