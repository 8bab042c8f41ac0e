import numpy as np
import pytest

from hyperext.extension import (
    EVAL_LIMIT,
    NearBoundaryError,
    covariance_defect,
    distance_to_range,
    hyperbolic_energy,
    hyperharmonic_extension,
    kernel_mass,
    explicit_distance_bound,
    nontangential_check,
    uniform_ball_sample,
)
from hyperext.hyperbolic import MobiusTransform, random_mobius
from hyperext.spheremap import SphereGrid, gagliardo_seminorm, make_test_map

from conftest import circle_field, circle_map, sphere_field


def test_kernel_mass_on_circle_near_boundary(rng):
    x = uniform_ball_sample(rng, 200, 2, 0.99)
    assert np.max(np.abs(kernel_mass(x, SphereGrid.circle(2048)) - 1.0)) < 1e-6


def test_kernel_mass_on_sphere_inside_resolved_radius(rng):
    x = uniform_ball_sample(rng, 100, 3, 0.9)
    assert np.max(np.abs(kernel_mass(x, SphereGrid.sphere(192)) - 1.0)) < 1e-6


@pytest.mark.parametrize("make, dim, value", [
    (lambda: make_test_map("constant:c=0.6,0.8", SphereGrid.circle(256)), 2, [0.6, 0.8]),
    (lambda: make_test_map("constant:c=0,0,1", SphereGrid.sphere(24)), 3, [0.0, 0.0, 1.0]),
])
def test_constant_map_extends_to_constant(rng, make, dim, value):
    f = hyperharmonic_extension(make())
    x = uniform_ball_sample(rng, 300, dim, 0.999)
    assert np.max(np.abs(f.evaluate(x) - np.array(value))) < 1e-12
    assert np.max(np.abs(f.derivative(x))) < 1e-9


@pytest.mark.parametrize("k", [1, 2, 3])
def test_circle_extension_is_poisson_mode(rng, k):
    # in the disc the extension is harmonic, so z^k extends to r^k e^{ik theta}
    f = circle_field(f"circle-degree:k={k}")
    x = uniform_ball_sample(rng, 100, 2, 0.99)
    r, th = np.linalg.norm(x, axis=1), np.arctan2(x[:, 1], x[:, 0])
    exact = np.stack([r**k * np.cos(k * th), r**k * np.sin(k * th)], axis=-1)
    assert np.max(np.abs(f.evaluate(x) - exact)) < 1e-6


def test_derivative_matches_finite_differences(rng):
    f = circle_field("bubble:k=1:a=0.5,0")
    x = uniform_ball_sample(rng, 40, 2, 0.97)
    h = 1e-6
    fd = np.stack([(f.evaluate(x + h * e) - f.evaluate(x - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
    assert np.allclose(f.derivative(x), fd, atol=1e-6)


def test_sphere_identity_extension_is_equivariant(rng):
    f = sphere_field("sphere-degree:k=1", 48)
    x = uniform_ball_sample(rng, 30, 3, 0.8)
    v = f.evaluate(x)
    # radial: the value is parallel to x
    cross = np.cross(v, x) / np.linalg.norm(x, axis=1)[:, None]
    assert np.max(np.abs(cross)) < 1e-3
    R = MobiusTransform(np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]), np.zeros(3))
    assert np.allclose(f.evaluate(R(x)), R(v), atol=1e-3)


def test_covariance_defect_shrinks_with_refinement():
    rng = np.random.default_rng(7)
    sample = uniform_ball_sample(rng, 200, 2, 0.9)
    transforms = [random_mobius(rng, 2, 0.5) for _ in range(5)]
    defects = [max(covariance_defect(circle_field("circle-degree:k=2", m), T, sample) for T in transforms)
               for m in (128, 256, 512)]
    assert defects[0] > defects[1] > defects[2]
    assert defects[2] < 1e-4


def test_routes_agree_where_both_resolve(rng):
    f = circle_field("bubble:k=1:a=0.5,0")
    x = uniform_ball_sample(rng, 100, 2, 0.95)
    x = x[np.linalg.norm(x, axis=1) > 0.6]
    assert np.allclose(f.evaluate(x, route="kernel"), f.evaluate(x, route="pullback"), atol=1e-8)


def test_unknown_route():
    with pytest.raises(ValueError, match="unknown route"):
        circle_field("circle-degree:k=1").evaluate(np.zeros((1, 2)), route="spectral")


def test_near_boundary_points_rejected():
    f = circle_field("circle-degree:k=1")
    f.evaluate(np.array([[EVAL_LIMIT * 0.999999, 0.0]]))
    with pytest.raises(NearBoundaryError):
        f.evaluate(np.array([[1.0 - 1e-8, 0.0]]))


def test_hyperbolic_energy_of_degree_one():
    # h(x) = x has hyperbolic gradient (1-|x|^2)/2, so the energy density is the Euclidean one
    est = hyperbolic_energy(circle_field("circle-degree:k=1"), 10_000, seed=0, truncation_radius=8.0)
    assert est.value == pytest.approx(np.pi * np.tanh(4.0) ** 2, rel=1e-10)
    assert est.truncation_radius == pytest.approx(8.0, rel=1e-12)
    assert est.max_hyperbolic_gradient <= 0.5
    with pytest.raises(ValueError):
        hyperbolic_energy(circle_field("circle-degree:k=1"), 100, seed=0)


def test_hyperbolic_energy_is_seeded():
    f = circle_field("circle-degree:k=2")
    a, b = hyperbolic_energy(f, 10_000, seed=3), hyperbolic_energy(f, 10_000, seed=3)
    assert a == b


@pytest.mark.parametrize("E, n, expected", [(4 * np.pi**2, 1, 4.0), (16 * np.pi**2, 2, 256.0 ** (1 / 3))])
def test_explicit_distance_bound_values(E, n, expected):
    assert explicit_distance_bound(E, n) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("desc", ["circle-degree:k=1", "circle-degree:k=3", "bubble:k=1:a=0.9,0"])
def test_distance_to_range_respects_distance_bound(rng, desc):
    f = circle_field(desc)
    bound = explicit_distance_bound(gagliardo_seminorm(circle_map(desc)).value, 1)
    x = uniform_ball_sample(rng, 500, 2, 0.99)
    assert np.all(distance_to_range(f, x) <= bound)


@pytest.mark.parametrize("y", [[1.0, 0.0], [0.6, -0.8]])
def test_nontangential_limit(y):
    rep = nontangential_check(circle_field("circle-degree:k=2"), y)
    assert rep.tail_decreasing
    assert rep.deviations[-1] < 1e-3
    # the deviation halves with the distance to the boundary
    ratios = rep.deviations[1:] / rep.deviations[:-1]
    assert np.allclose(ratios, 0.5, atol=0.05)
