import numpy as np
import pytest

from hyperext.hyperbolic import MobiusTransform, random_mobius, sphere_area
from hyperext.spheremap import (
    CIRCLE_CORPUS,
    SPHERE_CORPUS,
    EllipseTarget,
    MapDescriptor,
    SphereGrid,
    SphereMap,
    UnitSphereTarget,
    gagliardo_seminorm,
    make_target,
    make_test_map,
    w1n_energy,
)

from conftest import circle_map, sphere_map


@pytest.mark.parametrize("grid", [SphereGrid.circle(64), SphereGrid.circle(512), SphereGrid.sphere(12), SphereGrid.sphere(48)])
def test_grid_exactness(grid):
    assert grid.integrate(np.ones(grid.size)) == pytest.approx(sphere_area(grid.dim), abs=1e-8)
    assert np.allclose(grid.integrate(grid.nodes), 0.0, atol=1e-8)
    assert np.allclose(np.linalg.norm(grid.nodes, axis=1), 1.0, atol=1e-12)


def test_grid_rejects_higher_spheres():
    with pytest.raises(ValueError):
        SphereGrid.make(3, 10)


@pytest.mark.parametrize("text", ["circle-degree:k=2", "bubble:k=1:a=0.9,0.0", "constant:c=1.0,0.0", "ellipse:k=1"])
def test_descriptor_round_trip(text):
    d = MapDescriptor.parse(text)
    assert MapDescriptor.parse(str(d)) == d


@pytest.mark.parametrize("bad", ["", "circle-degree:k", "circle-degree:q=2"])
def test_descriptor_errors(bad):
    with pytest.raises(ValueError):
        MapDescriptor.parse(bad)


def test_unknown_map_kind():
    with pytest.raises(ValueError, match="unknown map kind"):
        make_test_map("spiral:k=1", SphereGrid.circle(32))


def test_constant_map_nodes():
    u = make_test_map("constant:c=0.6,0.8", SphereGrid.circle(128))
    assert np.all(u.values == np.array([0.6, 0.8]))
    assert gagliardo_seminorm(u).value == 0.0
    assert w1n_energy(u) == 0.0


def test_coarse_grid_warns_about_diagonal_exclusion():
    with pytest.warns(RuntimeWarning, match="near-diagonal"):
        gagliardo_seminorm(circle_map("circle-degree:k=1", 32))


def test_circle_degree_two_at_node():
    u = circle_map("circle-degree:k=2", 64)
    th = 2 * np.pi * np.arange(64) / 64
    assert np.allclose(u.values, np.stack([np.cos(2 * th), np.sin(2 * th)], -1), atol=1e-13)


def test_values_must_lie_on_target():
    grid = SphereGrid.circle(16)
    with pytest.raises(ValueError, match="leave the target"):
        SphereMap(grid, 2.0 * grid.nodes, UnitSphereTarget(1))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_circle_seminorm_against_closed_form(oracles, k):
    exact = oracles["closed_forms"]["circle_seminorm"][str(k)]
    errs = []
    for m in (128, 256, 512):
        est = gagliardo_seminorm(circle_map(f"circle-degree:k={k}", m))
        errs.append(abs(est.value - exact) / exact)
        # the skipped near-diagonal pairs carry roughly k times their mass fraction
        assert errs[-1] <= 1.5 * k * est.excluded_mass
    assert errs[0] > errs[1] > errs[2]


def test_sphere_identity_seminorm(oracles):
    exact = oracles["closed_forms"]["sphere_identity_seminorm"]
    vals = [gagliardo_seminorm(sphere_map("sphere-degree:k=1", lat)).value for lat in (12, 24, 48)]
    errs = [abs(v - exact) / exact for v in vals]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.06


@pytest.mark.parametrize("k", [1, 2, 3])
def test_circle_w1n_energy(oracles, k):
    u = circle_map(f"circle-degree:k={k}", 256)
    assert w1n_energy(u) == pytest.approx(oracles["closed_forms"]["circle_w1n_energy"][str(k)], rel=1e-12)


def test_sphere_identity_w1n_energy(oracles):
    u = sphere_map("sphere-degree:k=1", 24)
    # operator norm 1 everywhere, so the energy is the area; Frobenius squared is 2
    assert w1n_energy(u) == pytest.approx(4 * np.pi, rel=1e-10)
    frob = w1n_energy(u, norm="frobenius")
    assert frob == pytest.approx(oracles["closed_forms"]["sphere_identity_w1n_energy"], rel=1e-10)
    with pytest.raises(ValueError):
        w1n_energy(u, norm="nuclear")


def test_seminorm_mobius_invariance(rng):
    u = circle_map("circle-degree:k=2", 512)
    base = gagliardo_seminorm(u).value
    for _ in range(5):
        T = random_mobius(rng, 2, 0.5)
        moved = gagliardo_seminorm(u.compose_mobius(T)).value
        assert moved / base == pytest.approx(1.0, abs=0.02)


@pytest.mark.parametrize("a", [0.5, 0.8])
def test_bubble_seminorm_converges_to_unmoved_value(oracles, a):
    exact = oracles["closed_forms"]["circle_seminorm"]["1"]
    errs = [abs(gagliardo_seminorm(circle_map(f"bubble:k=1:a={a},0", m)).value - exact) / exact
            for m in (512, 2048)]
    assert errs[1] < 0.5 * errs[0]
    assert errs[1] < 0.01


def test_bubble_concentrates():
    # the preimage of the half-circle facing a/|a| shrinks as |a| grows
    spreads = [np.mean(circle_map(f"bubble:k=1:a={a},0", 512).values[:, 0] > 0) for a in (0.0, 0.5, 0.8)]
    assert spreads[0] > spreads[1] > spreads[2]


def test_compose_mobius_derivative_matches_finite_differences(rng):
    u = circle_map("circle-degree:k=2", 64)
    v = u.compose_mobius(MobiusTransform.translation([0.4, -0.2]))
    y = u.grid.nodes[::7]
    fd = SphereMap(u.grid, None, u.target, v.evaluator, None)
    assert np.allclose(v.jacobian(y), fd.jacobian(y), atol=1e-6)


@pytest.mark.parametrize("name", ["circle", "sphere", "ellipse"])
def test_retraction_is_projection(name, rng):
    tgt = make_target(name)
    pts = tgt.sample(50, rng)
    assert np.allclose(tgt.retract(pts), pts, atol=1e-9)
    off = pts + 0.2 * tgt.tube_radius * rng.normal(size=pts.shape) / np.sqrt(pts.shape[1])
    once = tgt.retract(off)
    assert np.allclose(tgt.retract(once), once, atol=1e-9)
    assert np.all(tgt.distance_to(once) < 1e-9)


def test_ellipse_closest_point_is_nearest(rng):
    tgt = EllipseTarget()
    y = tgt.sample(20, rng) * 1.1
    p = tgt.closest_point(y)
    t = np.linspace(0, 2 * np.pi, 20001)
    curve = tgt.point(t)
    brute = np.min(np.linalg.norm(y[:, None, :] - curve[None], axis=-1), axis=1)
    assert np.allclose(np.linalg.norm(y - p, axis=1), brute, atol=1e-6)


def test_unknown_target():
    with pytest.raises(ValueError):
        make_target("torus")


@pytest.mark.parametrize("desc", CIRCLE_CORPUS)
def test_circle_corpus_builds(desc):
    u = circle_map(desc, 128)
    assert u.values.shape == (128, 2)


@pytest.mark.parametrize("desc", SPHERE_CORPUS)
def test_sphere_corpus_builds(desc):
    u = sphere_map(desc, 12)
    assert u.values.shape == (12 * 24, 3)
