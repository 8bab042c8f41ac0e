import numpy as np
import pytest

from hyperext.hyperbolic import HyperbolicBall, hyperbolic_distance
from hyperext.radial import (
    CompositeField,
    ImprovementError,
    InequalityRow,
    RadialRedirect,
    RemovableSingularityError,
    SingularitySet,
    annulus_energy_identity_check,
    annulus_factor,
    ball_energy,
    improve_on_ball,
    improvement_factor,
    log_factor_by_quadrature,
    sphere_energy,
    weak_factor,
    weak_type_check,
)

from conftest import circle_field, sphere_field

ANNULI = [(1.0, 0.25), (0.5, 0.1)]


@pytest.mark.parametrize("rho, delta", ANNULI)
def test_annulus_factor_against_oracle(oracles, rho, delta):
    ref = oracles["closed_forms"]["annulus"][f"{rho!r}/{delta!r}"]
    assert annulus_factor(rho, delta) == pytest.approx(ref["factor"], rel=1e-12)
    assert log_factor_by_quadrature(rho, delta) == pytest.approx(ref["log_factor"], rel=1e-11)


@pytest.mark.parametrize("rho", [0.25, 0.5, 1.0, 2.0])
def test_improvement_and_weak_factors_against_oracle(oracles, rho):
    row = oracles["closed_forms"]["scales"]["1"][repr(rho)]
    assert improvement_factor(rho, row["delta"]) == pytest.approx(row["kappa"], rel=1e-11)
    assert weak_factor(rho, 1) == pytest.approx(row["eta"] / 2, rel=1e-12)


@pytest.mark.parametrize("desc", ["circle-degree:k=1", "circle-degree:k=2", "bubble:k=1:a=0.5,0"])
@pytest.mark.parametrize("rho, delta", ANNULI)
def test_annulus_identity_on_circle(desc, rho, delta):
    rep = annulus_energy_identity_check(circle_field(desc), np.array([0.1, -0.2]), rho, delta)
    assert rep.passed
    assert rep.rel_error < 1e-8
    assert rep.boundary_energy > 0


def test_annulus_identity_on_sphere():
    rep = annulus_energy_identity_check(sphere_field("sphere-degree:k=1", 24), np.array([0.1, 0.0, 0.2]), 1.0, 0.25)
    assert rep.rel_error < 1e-8


def test_identity_for_constant_map():
    rep = annulus_energy_identity_check(circle_field("constant:c=1,0", 128), np.zeros(2), 1.0, 0.25)
    assert rep.passed and rep.rel_error == 0.0


@pytest.mark.parametrize("desc", ["circle-degree:k=1", "bubble:k=1:a=0.5,0"])
def test_weak_type_bound(desc):
    rep = weak_type_check(circle_field(desc), np.array([0.1, -0.2]), 1.0, samples=1 << 15)
    assert rep.passed
    assert rep.lambdas[-1] / rep.lambdas[0] == pytest.approx(1e4)


def test_sphere_energy_of_degree_one_about_origin():
    # tangential hyperbolic gradient of h(x) = x on the circle of radius r about 0 is (1-s^2)/2, s = tanh(r/2),
    # i.e. 1/(2 cosh^2(r/2)); its square times sinh(r) integrated over the circle
    f = circle_field("circle-degree:k=1")
    for r in (0.5, 1.0, 2.0):
        exact = 2 * np.pi * np.sinh(r) / (4 * np.cosh(r / 2) ** 4)
        assert sphere_energy(f, np.zeros(2), r) == pytest.approx(exact, rel=1e-10)


def test_ball_energy_matches_euclidean_area():
    # in the plane the hyperbolic 2-energy equals the Euclidean Dirichlet energy, here area of the disc
    f = circle_field("circle-degree:k=1")
    assert ball_energy(f, np.zeros(2), 0.0, 2.0) == pytest.approx(np.pi * np.tanh(1.0) ** 2, rel=1e-8)


class TestCompositeField:
    @pytest.fixture
    def pair(self):
        U = CompositeField(circle_field("circle-degree:k=2"))
        V = U.with_redirect(RadialRedirect(HyperbolicBall(np.array([0.2, 0.1]), 0.8)))
        return U, V

    def test_inside_points_take_sphere_values(self, pair, rng):
        U, V = pair
        a = np.array([0.2, 0.1])
        x = a + 0.05 * rng.normal(size=(20, 2))
        x = x[hyperbolic_distance(x, a) < 0.8]
        c, R = HyperbolicBall(a, 0.8).euclidean_sphere()
        # the radial redirect sends x to the sphere point on the geodesic ray from a, so values lie in U(sphere)
        sphere_vals = U.evaluate(c + R * np.stack([np.cos(t := np.linspace(0, 2 * np.pi, 4001)), np.sin(t)], -1))
        d = np.min(np.linalg.norm(V.evaluate(x)[:, None] - sphere_vals[None], axis=-1), axis=1)
        assert np.all(d < 1e-3)

    def test_outside_points_unchanged(self, pair, rng):
        U, V = pair
        x = rng.uniform(-0.9, 0.9, size=(200, 2))
        x = x[np.linalg.norm(x, axis=1) < 0.95]
        x = x[hyperbolic_distance(x, np.array([0.2, 0.1])) > 0.8]
        assert np.array_equal(V.evaluate(x), U.evaluate(x))
        assert not V.inside_any(x).any()

    def test_centre_is_removable_singularity(self, pair):
        with pytest.raises(RemovableSingularityError):
            pair[1].evaluate(np.array([[0.2, 0.1]]))

    def test_derivative_matches_finite_differences(self, pair, rng):
        V = pair[1]
        x = np.array([0.2, 0.1]) + 0.1 * rng.normal(size=(15, 2))
        h = 1e-6
        fd = np.stack([(V.evaluate(x + h * e) - V.evaluate(x - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
        assert np.allclose(V.derivative(x), fd, atol=1e-5)
        assert np.allclose(V.jacobian(x), np.swapaxes(fd, 1, 2), atol=1e-5)

    def test_projection_lands_on_target(self, pair, rng):
        W = pair[1].projected()
        x = rng.uniform(-0.6, 0.6, size=(50, 2))
        assert np.allclose(np.linalg.norm(W.evaluate(x), axis=1), 1.0, atol=1e-12)

    def test_nesting_by_wrapping_refused(self, pair):
        with pytest.raises(TypeError):
            CompositeField(pair[1])


def test_singularity_set_geometry():
    S = SingularitySet(np.array([[0.0, 0.0], [0.5, 0.0], [0.0, -0.5]]), 0.1)
    assert len(S) == 3
    d = 2 * np.arctanh(0.5)
    assert S.count_within(np.zeros(2), d + 1e-9) == 3
    assert S.count_within(np.zeros(2), d - 1e-9) == 1
    assert S.min_separation() == pytest.approx(d, rel=1e-12)
    assert S.check_separation(2 * d)
    assert not S.check_separation(2 * d + 0.01)
    assert len(SingularitySet.empty(2, 0.1)) == 0
    assert SingularitySet(np.array([0.3, 0.0]), 0.1).points.shape == (1, 2)


@pytest.fixture(scope="module")
def improved():
    f = circle_field("circle-degree:k=1")
    return improve_on_ball(f, np.zeros(2), 1.2, 0.1, SingularitySet.empty(2, 0.1), 0.5)


def test_improvement_on_good_ball(improved):
    V, erased, S, rep = improved
    assert rep.passed
    assert 1.2 < rep.rho_star < 2.4
    assert len(erased) == 0
    assert np.allclose(S.points, [[0.0, 0.0]])
    assert rep.bad_fraction == 0.0
    assert all(rep.flags.values()) and len(rep.flags) == 4
    assert [r.name for r in rep.rows] == ["averaging bound", "weak bound in B_delta(a)", "energy growth"]


def test_improvement_erases_enclosed_singularities():
    f = circle_field("circle-degree:k=1")
    S = SingularitySet(np.array([[0.1, 0.0], [0.0, 0.99]]), 0.05)
    _, erased, new_S, rep = improve_on_ball(f, np.zeros(2), 1.2, 0.05, S, 0.5, verify=False)
    assert np.allclose(erased, [[0.1, 0.0]])
    assert np.allclose(new_S.points, [[0.0, 0.99], [0.0, 0.0]])
    # chosen sphere keeps clear of the surviving delta-ball
    assert abs(hyperbolic_distance(np.array([0.0, 0.99]), np.zeros(2)) - rep.rho_star) >= 0.05


def test_improvement_refuses_bad_ball():
    f = circle_field("circle-degree:k=1")
    with pytest.raises(ImprovementError) as err:
        improve_on_ball(f, np.zeros(2), 0.5, 0.1, SingularitySet.empty(2, 0.1), 0.5, verify=False)
    assert err.value.diagnostics["bad_fraction"] > 0.25


def test_inequality_row():
    row = InequalityRow("x", 1.0, 2.0)
    assert row.passed and row.slack == 2.0
    assert not InequalityRow("x", 2.1, 2.0, tolerance=0.02).passed
    assert InequalityRow("x", 2.1, 2.0, std_error=0.05).passed
    assert InequalityRow("x", 0.0, 1.0).as_dict()["slack"] is None
