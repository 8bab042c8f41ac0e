import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperext.covering import euclidean_image
from hyperext.hyperbolic import (
    BallPoint,
    HyperbolicBall,
    MobiusTransform,
    check_inside,
    compose,
    euclidean_radius,
    hyperbolic_ball_volume,
    hyperbolic_distance,
    hyperbolic_radius,
    random_mobius,
    sinh_power_integral,
    sphere_area,
)


def ball_points(dim, max_norm=0.95):
    coords = st.lists(st.floats(-1, 1, allow_nan=False), min_size=dim, max_size=dim)
    return coords.map(lambda c: np.asarray(c) * max_norm / max(1.0, np.linalg.norm(c)))


@pytest.mark.parametrize("n, area", [(0, 2.0), (1, 2 * np.pi), (2, 4 * np.pi)])
def test_sphere_area(n, area):
    assert sphere_area(n) == pytest.approx(area, rel=1e-14)


def test_distance_from_origin_matches_radius_conversion():
    r = np.array([0.1, 0.5, 0.9, 0.999])
    pts = np.stack([r, np.zeros_like(r)], axis=-1)
    assert np.allclose(hyperbolic_distance(pts, np.zeros(2)), hyperbolic_radius(r), rtol=1e-13)
    assert np.allclose(euclidean_radius(hyperbolic_radius(r)), r, rtol=1e-13)


def test_distance_keeps_precision_for_close_points():
    x = np.array([0.3, 0.4])
    y = x + np.array([1e-12, 0.0])
    # the metric at x is 2/(1-|x|^2) times Euclidean length
    assert hyperbolic_distance(x, y) == pytest.approx(2e-12 / (1 - 0.25), rel=1e-6)


def test_boundary_points_rejected():
    with pytest.raises(ValueError, match="outside the open ball"):
        check_inside(np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        BallPoint(np.array([0.6, 0.8]))
    with pytest.raises(ValueError):
        MobiusTransform.translation([1.0, 0.0])


@pytest.mark.parametrize("n", [1, 2])
def test_sinh_power_integral_matches_oracle(oracles, n):
    for t, val in oracles["closed_forms"]["sinh_power"][str(n)].items():
        assert sinh_power_integral(float(t), n) == pytest.approx(val, rel=1e-10)


def test_ball_volume_small_radius_is_euclidean():
    rho = 1e-3
    # metric is 4|dx|^2 near 0, so a ball of radius rho has Euclidean radius rho/2 scaled by 2
    assert hyperbolic_ball_volume(rho, 1) == pytest.approx(np.pi * rho**2, rel=1e-6)
    with pytest.raises(ValueError):
        hyperbolic_ball_volume(0.0, 1)


@settings(max_examples=60, deadline=None)
@given(ball_points(2), ball_points(2), ball_points(2))
def test_translation_is_isometry(a, x, y):
    T = MobiusTransform.translation(a)
    d0 = hyperbolic_distance(x, y)
    assert hyperbolic_distance(T(x), T(y)) == pytest.approx(d0, rel=1e-9, abs=1e-11)


@settings(max_examples=40, deadline=None)
@given(ball_points(3), ball_points(3))
def test_translation_moves_center_to_origin(a, x):
    T = MobiusTransform.translation(a)
    assert np.allclose(T(a), 0.0, atol=1e-12)
    assert np.allclose(T.inverse()(T(x)), x, atol=1e-10)


def test_conformal_factor_formula(rng):
    T = random_mobius(rng, 3, 0.8)
    x = rng.uniform(-0.5, 0.5, size=(20, 3))
    lhs = T.conformal_factor(x)
    rhs = (1 - np.sum(T(x) ** 2, -1)) / (1 - np.sum(x**2, -1))
    assert np.allclose(lhs, rhs, rtol=1e-12)


def test_jacobian_is_conformal(rng):
    T = random_mobius(rng, 2, 0.7)
    x = rng.uniform(-0.6, 0.6, size=(10, 2))
    J = T.jacobian(x)
    lam = T.conformal_factor(x)
    JtJ = np.einsum("pji,pjk->pik", J, J)
    assert np.allclose(JtJ, lam[:, None, None] ** 2 * np.eye(2), atol=1e-12)


def test_compose_matches_sequential_application(rng):
    S, T = random_mobius(rng, 3, 0.6), random_mobius(rng, 3, 0.6)
    x = rng.uniform(-0.5, 0.5, size=(25, 3))
    assert np.allclose(compose(S, T)(x), S(T(x)), atol=1e-10)
    assert np.allclose((S @ T)(x), S(T(x)), atol=1e-10)


def test_non_orthogonal_rotation_rejected():
    with pytest.raises(ValueError, match="orthogonal"):
        MobiusTransform(np.array([[1.0, 0.1], [0.0, 1.0]]), np.zeros(2))


@pytest.mark.parametrize("center", [[0.0, 0.0], [0.5, -0.3], [0.9, 0.1]])
def test_ball_membership_two_ways(rng, center):
    B = HyperbolicBall(np.array(center), 1.3)
    x = rng.uniform(-0.7, 0.7, size=(500, 2)) + 0.2 * np.array(center)
    x = x[np.linalg.norm(x, axis=1) < 0.99]
    assert np.array_equal(B.contains(x), B.contains_frame(x))


@pytest.mark.parametrize("center, rho", [([0.0, 0.0], 0.5), ([0.6, 0.2], 1.0), ([-0.2, 0.95], 2.5)])
def test_euclidean_image_of_ball(center, rho):
    c, R = euclidean_image(np.array(center), rho)
    c2, R2 = HyperbolicBall(np.array(center), rho).euclidean_sphere()
    assert np.allclose(c, c2, atol=1e-12)
    assert float(R) == pytest.approx(R2, rel=1e-12)
    # a point on the Euclidean sphere is at hyperbolic distance rho
    p = c + R * np.array([0.0, 1.0])
    assert hyperbolic_distance(p, np.array(center)) == pytest.approx(rho, rel=1e-9)
