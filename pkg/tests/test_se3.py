import math

import numpy as np
import pytest
from conftest import random_twist
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from magnus_odom.errors import LogBranchError, StructureError
from magnus_odom.se3 import (
    ADJ_SMALL_ANGLE,
    Pose,
    ad_bracket,
    adjoint_of_exp,
    alpha_coefficients,
    curlyvee,
    curlywedge,
    hat,
    hat3,
    matfun_H,
    matfun_J,
    orthonormality_error,
    se3_exp,
    se3_left_jacobian,
    se3_left_jacobian_inv,
    se3_log,
    vee,
    vee3,
)

finite3 = arrays(np.float64, 3, elements=st.floats(-50, 50))
finite6 = arrays(np.float64, 6, elements=st.floats(-5, 5))


def series(x, shift, terms=30):
    """sum_n X^n / (n + shift)!"""
    out = np.zeros_like(x)
    p = np.eye(x.shape[0])
    for n in range(terms):
        out = out + p / math.factorial(n + shift)
        p = p @ x
    return out


def adjoint_with_angle(rng, phi):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return curlywedge(np.concatenate([rng.uniform(-1, 1, 3), phi * axis]))


# -- hat / vee -----------------------------------------------------------------
def test_hat3_zero_and_basis():
    assert np.array_equal(hat3(np.zeros(3)), np.zeros((3, 3)))
    np.testing.assert_array_equal(hat3([0, 0, 1]), [[0, -1, 0], [1, 0, 0], [0, 0, 0]])


@given(finite3, finite3)
def test_hat3_is_cross_product(v, w):
    # component-wise cross product
    expect = np.array([v[1] * w[2] - v[2] * w[1], v[2] * w[0] - v[0] * w[2], v[0] * w[1] - v[1] * w[0]])
    np.testing.assert_allclose(hat3(v) @ w, expect, atol=1e-9)
    np.testing.assert_array_equal(hat3(v), -hat3(v).T)


@given(finite3, finite6)
def test_vee_hat_roundtrip_exact(v, xi):
    assert np.array_equal(vee3(hat3(v)), v)
    assert np.array_equal(vee(hat(xi)), xi)
    assert np.array_equal(curlyvee(curlywedge(xi)), xi)


# -- exp / log -----------------------------------------------------------------
def test_exp_identity_and_quarter_turn():
    p = se3_exp(np.zeros(6))
    np.testing.assert_array_equal(p.rotation, np.eye(3))
    np.testing.assert_array_equal(p.translation, np.zeros(3))
    q = se3_exp([0, 0, 0, 0, 0, np.pi / 2])
    np.testing.assert_allclose(q.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    np.testing.assert_allclose(q.translation, 0, atol=0)


def test_exp_matches_power_series(rng):
    for _ in range(200):
        xi = random_twist(rng, 3.0, 1.5)
        ref = series(hat(xi), 0, 30)
        np.testing.assert_allclose(se3_exp(xi).matrix(), ref, atol=1e-10)


def test_log_exp_roundtrip(rng):
    for _ in range(500):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        xi = np.concatenate([rng.uniform(-10, 10, 3), axis * rng.uniform(0, np.pi - 1e-3)])
        np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)
    small = np.array([1e-3, -2e-3, 5e-4, 1e-9, -3e-10, 2e-9])
    np.testing.assert_allclose(se3_log(se3_exp(small)), small, atol=1e-15)


def test_log_near_pi_raises():
    with pytest.raises(LogBranchError):
        se3_log(se3_exp([1, 0, 0, 0, 0, np.pi - 1e-8]))
    # just outside the margin is still fine
    se3_log(se3_exp([1, 0, 0, 0, 0, np.pi - 1e-4]))


@given(finite6)
def test_exp_output_is_valid_pose(xi):
    p = se3_exp(xi)
    assert p.is_valid()


def test_group_axioms(rng):
    for _ in range(100):
        a, b, c = (se3_exp(random_twist(rng, 10, 3)) for _ in range(3))
        np.testing.assert_allclose(((a @ b) @ c).matrix(), (a @ (b @ c)).matrix(), atol=1e-12)
        np.testing.assert_allclose((a @ a.inverse()).matrix(), np.eye(4), atol=1e-12)


def test_composition_reorthonormalizes():
    # a slightly non-orthonormal rotation is repaired by composition
    bad = Pose(np.eye(3) * (1 + 1e-7), np.zeros(3))
    out = bad @ Pose.identity()
    assert orthonormality_error(out.rotation) < 1e-12
    for _ in range(10000):
        out = out @ se3_exp([0.1, 0, 0, 0.01, 0.02, 0.03])
    assert out.is_valid()


def test_adjoint_of_exp_is_exp_of_curlywedge(rng):
    from scipy.linalg import expm

    for _ in range(50):
        xi = random_twist(rng, 2, 2)
        np.testing.assert_allclose(adjoint_of_exp(xi), expm(curlywedge(xi)), atol=1e-12)


# -- curlywedge ----------------------------------------------------------------
def test_curlywedge_special_cases():
    assert np.array_equal(curlywedge(np.zeros(6)), np.zeros((6, 6)))
    nu = np.array([1.0, -2.0, 3.0])
    x = curlywedge(np.concatenate([nu, np.zeros(3)]))
    expect = np.zeros((6, 6))
    expect[:3, 3:] = hat3(nu)
    np.testing.assert_array_equal(x, expect)


def test_bracket_matches_4x4_commutator(rng):
    for _ in range(200):
        a, b = random_twist(rng, 3, 3), random_twist(rng, 3, 3)
        comm6 = curlywedge(a) @ curlywedge(b) - curlywedge(b) @ curlywedge(a)
        comm4 = hat(a) @ hat(b) - hat(b) @ hat(a)
        np.testing.assert_allclose(curlyvee(comm6), vee(comm4), atol=1e-12)
        np.testing.assert_allclose(ad_bracket(a, b), vee(comm4), atol=1e-12)


def test_curlyvee_rejects_bad_structure():
    x = curlywedge(np.arange(6.0))
    x[4, 0] = 1.0
    with pytest.raises(StructureError):
        curlyvee(x)
    with pytest.raises(StructureError):
        curlyvee(np.eye(6))
    with pytest.raises(StructureError):
        curlyvee(np.zeros((4, 4)))


def test_quintic_identity(rng):
    for _ in range(1000):
        xi = random_twist(rng, 5, 3)
        x = curlywedge(xi)
        phi = np.linalg.norm(xi[3:])
        x3 = x @ x @ x
        res = x3 @ x @ x + 2 * phi**2 * x3 + phi**4 * x
        assert np.linalg.norm(res) <= 1e-8 * (1 + phi**5) * np.linalg.norm(x)


# -- matrix functions ----------------------------------------------------------
def test_matfun_at_zero():
    np.testing.assert_array_equal(matfun_J(np.zeros((6, 6))), np.eye(6))
    np.testing.assert_array_equal(matfun_H(np.zeros((6, 6))), 0.5 * np.eye(6))


def test_alpha1_at_pi():
    # closed form at phi = pi reduces to 3 / (2 pi^2)
    assert alpha_coefficients(np.pi)[0] == pytest.approx(3 / (2 * np.pi**2), rel=1e-14)


@pytest.mark.parametrize("phi", [1e-9, 1e-5, 1e-2, 0.2, 0.5, 1.0, 2.0, 3.0])
def test_matfuns_match_series(rng, phi):
    for _ in range(20):
        x = adjoint_with_angle(rng, phi)
        tol = 1e-12 if phi < 1e-3 else 1e-10
        assert np.linalg.norm(matfun_J(x) - series(x, 1)) <= tol * np.linalg.norm(series(x, 1))
        assert np.linalg.norm(matfun_H(x) - series(x, 2)) <= tol * np.linalg.norm(series(x, 2))


def test_index_shift_identity(rng):
    for _ in range(200):
        x = curlywedge(random_twist(rng, 3, 3))
        np.testing.assert_allclose(matfun_J(x), np.eye(6) + x @ matfun_H(x), atol=1e-10)


def test_continuity_across_threshold(rng):
    for _ in range(20):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        rho = rng.uniform(-1, 1, 3)
        for s in (0.9, 1.1):
            x = curlywedge(np.concatenate([rho, s * ADJ_SMALL_ANGLE * axis]))
            for f in (matfun_J, matfun_H):
                assert np.abs(f(x, "closed") - f(x, "taylor")).max() < 1e-8


def test_left_jacobian_inverse(rng):
    for _ in range(100):
        xi = random_twist(rng, 3, 2.5)
        np.testing.assert_allclose(se3_left_jacobian_inv(xi) @ se3_left_jacobian(xi), np.eye(6), atol=1e-10)


def test_left_jacobian_first_order(rng):
    # exp((xi + d)^) ~= exp((J d)^) exp(xi^)
    for _ in range(50):
        xi = random_twist(rng, 2, 2)
        d = 1e-6 * random_twist(rng)
        lhs = se3_exp(xi + d)
        rhs = se3_exp(se3_left_jacobian(xi) @ d) @ se3_exp(xi)
        np.testing.assert_allclose(lhs.matrix(), rhs.matrix(), atol=1e-11)
