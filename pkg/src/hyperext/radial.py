"""Radial extension inside hyperbolic balls and the single-ball improvement step.

A redirect replaces a field inside B_rho*(a) by its values on the boundary
sphere, pulled back along geodesics from a.  In the frame where a sits at
the origin this is x -> R x/|x| with R = tanh(rho*/2).

Energies are hyperbolic: |DU|_H = (1-|x|^2)/2 |DU|, measured by
dmu_H = sinh(r)^n dr domega in polar coordinates about the ball centre.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import roots_legendre

from ._rng import substream
from .hyperbolic import (
    HyperbolicBall,
    MobiusTransform,
    _sqnorm,
    _translate,
    _translate_jacobian,
    as_array,
    hyperbolic_distance,
    sphere_area,
)
from .scanner import sphere_sup
from .spheremap import SphereGrid

# a point closer than this (relative) to a redirect sphere has no derivative
SPHERE_GUARD = 1e-12
EXCLUSION_MARGIN = 1e-9
ENERGY_FLOOR = 1e-20  # both sides below this are round-off from a constant map


class RemovableSingularityError(ValueError):
    pass


class ImprovementError(RuntimeError):
    """No admissible radius, or the hypotheses of the improvement fail."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class RadialRedirect:
    ball: HyperbolicBall
    applied_at_stage: int = 0

    @property
    def center(self) -> np.ndarray:
        return self.ball.center

    @property
    def radius(self) -> float:
        return self.ball.radius

    @property
    def frame_radius(self) -> float:
        return self.ball.frame_radius


@dataclass(frozen=True)
class SingularitySet:
    points: np.ndarray
    delta: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(0, pts.shape[0]) if pts.size == 0 else pts[None, :]
        object.__setattr__(self, "points", pts)

    @classmethod
    def empty(cls, dim: int, delta: float) -> "SingularitySet":
        return cls(np.zeros((0, dim)), delta)

    def __len__(self):
        return self.points.shape[0]

    def count_within(self, a, radius: float) -> int:
        if len(self) == 0:
            return 0
        return int(np.sum(hyperbolic_distance(self.points, as_array(a)) < radius))

    def min_separation(self) -> float:
        if len(self) < 2:
            return np.inf
        d = hyperbolic_distance(self.points[:, None, :], self.points[None, :, :])
        d[np.diag_indices(len(self))] = np.inf
        return float(d.min())

    def check_separation(self, rho: float) -> bool:
        return self.min_separation() >= rho / 2.0 - 1e-12


# -- the composite field -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CompositeField:
    """Base extension followed by an ordered stack of radial redirects."""

    base: object
    redirects: tuple = ()
    target: object = None
    final_projection: bool = False

    def __post_init__(self):
        if isinstance(self.base, CompositeField):
            raise TypeError("nest redirects with with_redirect, not by wrapping")
        if self.target is None:
            object.__setattr__(self, "target", self.base.target)

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def boundary_map(self):
        return self.base.boundary_map

    @property
    def value_dim(self) -> int:
        return self.base.value_dim

    def with_redirect(self, redirect: RadialRedirect) -> "CompositeField":
        return replace(self, redirects=self.redirects + (redirect,))

    def projected(self, flag: bool = True) -> "CompositeField":
        return replace(self, final_projection=flag)

    def _walk(self, x, with_jacobian):
        """Move points through the redirect stack, latest first."""
        x = np.array(x, dtype=float)
        m = x.shape[-1]
        jac = np.broadcast_to(np.eye(m), x.shape[:-1] + (m, m)).copy() if with_jacobian else None
        for red in reversed(self.redirects):
            a = red.center
            R = red.frame_radius
            local = _translate(a, x)
            s = np.sqrt(_sqnorm(local))
            inside = s < R
            if not np.any(inside):
                continue
            if np.any(inside & (s == 0.0)):
                raise RemovableSingularityError(
                    f"evaluation at the centre {a.tolist()} of a radial redirect; the removable "
                    "singularity has no pointwise value"
                )
            if with_jacobian and np.any(np.abs(s - R) < SPHERE_GUARD * R):
                raise ValueError("derivative requested on a redirect sphere (measure-zero set)")
            idx = np.nonzero(inside)
            loc = local[idx]
            ss = s[idx][:, None]
            proj = R * loc / ss
            new = _translate(-a, proj)
            if with_jacobian:
                dir_ = loc / ss
                tang = np.eye(m) - dir_[:, :, None] * dir_[:, None, :]
                step = np.einsum(
                    "pij,pjk,pkl->pil",
                    _translate_jacobian(-a, proj),
                    (R / ss)[:, :, None] * tang,
                    _translate_jacobian(a, x[idx]),
                )
                jac[idx] = np.einsum("pij,pjk->pik", step, jac[idx])
            x[idx] = new
        return x, jac

    def evaluate(self, x):
        pts, _ = self._walk(x, False)
        vals = self.base.evaluate(pts)
        if self.final_projection:
            vals = self.target.retract(vals)
        return vals

    def value_and_derivative(self, x):
        """Values and gradient-layout derivative (..., n+1, nu)."""
        pts, walk = self._walk(x, True)
        vals, grad = self.base.value_and_derivative(pts)
        std = np.einsum("...ji,...jk->...ik", grad, walk)  # (..., nu, m)
        if self.final_projection:
            rj = self.target.retraction_jacobian(vals)
            vals = self.target.retract(vals)
            std = np.einsum("...ij,...jk->...ik", rj, std)
        return vals, np.swapaxes(std, -1, -2)

    def derivative(self, x):
        return self.value_and_derivative(x)[1]

    def jacobian(self, x):
        """Standard layout (..., nu, n+1)."""
        return np.swapaxes(self.derivative(x), -1, -2)

    def inside_any(self, x) -> np.ndarray:
        x = as_array(x)
        out = np.zeros(x.shape[:-1], bool)
        for red in self.redirects:
            out |= np.sqrt(_sqnorm(_translate(red.center, x))) < red.frame_radius
        return out


def as_composite(field) -> CompositeField:
    return field if isinstance(field, CompositeField) else CompositeField(field)


def radial_evaluate(field: CompositeField, x):
    return field.evaluate(x)


def radial_jacobian(field: CompositeField, x):
    """Gradient layout (..., n+1, nu)."""
    return field.derivative(x)


# -- quadrature in hyperbolic polar coordinates ----------------------------------------


def _frame_sphere(n: int, resolution: int) -> SphereGrid:
    return SphereGrid.make(n, resolution)


def default_sphere_resolution(n: int) -> int:
    return 512 if n == 1 else 24


def polar_points(a, r, omega: SphereGrid):
    """Points of the hyperbolic sphere of radius r about a, one per direction node."""
    a = as_array(a)
    return _translate(-a, np.tanh(np.asarray(r, dtype=float) / 2.0)[..., None, None] * omega.nodes)


def _hyperbolic_norm(x, derivative, tangent_normal=None):
    """(1-|x|^2)/2 times the operator norm, optionally restricted to a tangent plane."""
    d = np.swapaxes(derivative, -1, -2)  # (..., nu, m)
    if tangent_normal is not None:
        m = d.shape[-1]
        proj = np.eye(m) - tangent_normal[..., :, None] * tangent_normal[..., None, :]
        d = np.einsum("...ij,...jk->...ik", d, proj)
    op = np.linalg.norm(d, ord=2, axis=(-2, -1))
    return 0.5 * (1.0 - _sqnorm(x)) * op


def _excluded(x, exclusions):
    mask = np.zeros(x.shape[:-1], bool)
    for c, rad in exclusions:
        mask |= hyperbolic_distance(x, c) < rad
    return mask


def sphere_energy(field, a, r: float, omega: SphereGrid | None = None, tangential: bool = True,
                  exclusions=()) -> float:
    """Integral of |DU|_H^(n+1) over the hyperbolic sphere of radius r about a.

    `tangential` restricts DU to the sphere's tangent plane; `exclusions`
    lists (centre, radius) hyperbolic balls left out of the integral.
    """
    a = as_array(a)
    n = a.shape[0] - 1
    omega = _frame_sphere(n, default_sphere_resolution(n)) if omega is None else omega
    x = polar_points(a, r, omega)
    _, der = field.value_and_derivative(x)
    normal = None
    if tangential:
        c, R = HyperbolicBall(a, r).euclidean_sphere()
        normal = (x - c) / R
    h = _hyperbolic_norm(x, der, normal)
    integrand = np.where(_excluded(x, exclusions), 0.0, h ** (n + 1))
    return float(np.sinh(r) ** n * omega.integrate(integrand))


def _radial_nodes(lo: float, hi: float, panels: int, order: int):
    t, w = roots_legendre(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def ball_energy(field, a, r_lo: float, r_hi: float, exclusions=(), omega: SphereGrid | None = None,
                panels: int = 12, order: int = 4) -> float:
    """Integral of |DU|_H^(n+1) over the shell r_lo < d(x, a) < r_hi minus exclusions."""
    a = as_array(a)
    n = a.shape[0] - 1
    omega = _frame_sphere(n, default_sphere_resolution(n) // (2 if n == 1 else 1)) if omega is None else omega
    rs, ws = _radial_nodes(r_lo, r_hi, panels, order)
    x = polar_points(a, rs, omega)  # (K, N, m)
    _, der = field.value_and_derivative(x)
    h = _hyperbolic_norm(x, der)
    integrand = np.where(_excluded(x, exclusions), 0.0, h ** (n + 1))
    per_sphere = np.sinh(rs) ** n * (integrand @ omega.weights)
    return float(ws @ per_sphere)


# -- the exact annulus identity ---------------------------------------------


def annulus_factor(rho: float, delta: float) -> float:
    """sinh(rho) ln(tanh(rho/2)/tanh(delta/2))."""
    return float(np.sinh(rho) * np.log(np.tanh(rho / 2.0) / np.tanh(delta / 2.0)))


@dataclass(frozen=True)
class IdentityReport:
    lhs: float
    rhs: float
    rel_error: float
    passed: bool
    factor: float
    boundary_energy: float


def annulus_energy_identity_check(boundary_field, a, rho_star: float, delta: float,
                                  resolution: int | None = None, radial_order: int = 16,
                                  tolerance: float = 0.01) -> IdentityReport:
    """Both sides of the annulus energy identity for the radial extension.

    Left: the energy of the redirected field over delta < d(x, a) < rho*, by a
    product rule in log|x| and direction in the frame of a, with the
    Jacobian of the frame change.  Right: the closed-form factor times the
    boundary energy on the hyperbolic sphere.
    """
    a = as_array(a)
    n = a.shape[0] - 1
    m = n + 1
    resolution = default_sphere_resolution(n) if resolution is None else resolution
    omega = _frame_sphere(n, resolution)
    U = as_composite(boundary_field)
    V = U.with_redirect(RadialRedirect(HyperbolicBall(a, rho_star)))
    R = np.tanh(rho_star / 2.0)
    s0 = np.tanh(delta / 2.0)
    t, w = roots_legendre(radial_order)
    lo, hi = np.log(s0), np.log(R)
    logs = 0.5 * (hi - lo) * t + 0.5 * (hi + lo)
    ws = 0.5 * (hi - lo) * w
    s = np.exp(logs)
    frame = s[:, None, None] * omega.nodes[None, :, :]
    back = MobiusTransform.translation(-a)
    x = back.apply_unchecked(frame)
    _, der = V.value_and_derivative(x)
    op = np.linalg.norm(der, ord=2, axis=(-2, -1))
    jac_factor = back.conformal_factor(frame)
    # Euclidean energy is conformally invariant in dimension n+1
    integrand = (op * jac_factor) ** m  # (K, N)
    lhs = float(np.sum(ws * s**m * (integrand @ omega.weights)))
    boundary = sphere_energy(U, a, rho_star, omega)
    factor = annulus_factor(rho_star, delta)
    rhs = factor * boundary
    if max(lhs, rhs) <= ENERGY_FLOOR:
        rel = 0.0
    elif rhs == 0.0:
        rel = np.inf
    else:
        rel = abs(lhs - rhs) / rhs
    return IdentityReport(lhs, rhs, float(rel), bool(rel <= tolerance), factor, boundary)


def log_factor_by_quadrature(rho: float, delta: float) -> float:
    """Integral of 1/sinh(r) over (delta, rho), which equals ln(tanh(rho/2)/tanh(delta/2))."""
    from scipy.integrate import quad

    val, _ = quad(lambda r: 1.0 / np.sinh(r), delta, rho, epsabs=0.0, epsrel=1e-13)
    return float(val)


# -- weak-type profile -------------------------------------------------------


@dataclass(frozen=True)
class WeakTypeReport:
    lambdas: np.ndarray
    lhs: np.ndarray  # lambda^(n+1) times the superlevel hyperbolic measure
    std_error: np.ndarray
    rhs: float
    passed: bool
    peak_ratio: float
    peak_lambda: float


def superlevel_profile(field, a, region_radius: float, lambdas, samples: int, rng,
                       decades: float = 9.0):
    """lambda^(n+1) mu_H{x in B_region(a): |DU|_H > lambda}, with standard errors.

    Importance sampling in the frame of a: direction uniform, log|x|
    uniform over `decades` decades below tanh(region/2), which resolves the
    small superlevel sets around a point singularity at a.
    """
    a = as_array(a)
    n = a.shape[0] - 1
    m = n + 1
    S = np.tanh(region_radius / 2.0)
    span = decades * np.log(10.0)
    t = np.log(S) - span * rng.random(samples)
    s = np.exp(t)
    d = rng.normal(size=(samples, m))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    frame = s[:, None] * d
    x = _translate(-a, frame)
    _, der = field.value_and_derivative(x)
    h = _hyperbolic_norm(x, der)
    # dmu_H = (2/(1-s^2))^m s^n ds domega and ds = s dt
    weight = sphere_area(n) * span * (2.0 / (1.0 - s**2)) ** m * s**m
    lambdas = np.asarray(lambdas, dtype=float)
    ind = h[None, :] > lambdas[:, None]
    vals = weight[None, :] * ind
    mean = vals.mean(axis=1)
    se = vals.std(axis=1, ddof=1) / np.sqrt(samples)
    return lambdas**m * mean, lambdas**m * se


def boundary_scale(field, a, rho_star: float) -> float:
    """Largest hyperbolic tangential derivative on the sphere, a natural lambda unit."""
    a = as_array(a)
    n = a.shape[0] - 1
    omega = _frame_sphere(n, 64 if n == 1 else 12)
    x = polar_points(a, rho_star, omega)
    _, der = field.value_and_derivative(x)
    c, R = HyperbolicBall(a, rho_star).euclidean_sphere()
    return float(_hyperbolic_norm(x, der, (x - c) / R).max())


def weak_type_check(boundary_field, a, rho_star: float, lambda_grid=None, samples: int = 1 << 17,
                    seed=0, n_sigma: float = 3.0) -> WeakTypeReport:
    """Superlevel profile of the radial extension against sinh(rho*)/(n+1) times the boundary energy."""
    a = as_array(a)
    n = a.shape[0] - 1
    U = as_composite(boundary_field)
    V = U.with_redirect(RadialRedirect(HyperbolicBall(a, rho_star)))
    rhs = np.sinh(rho_star) / (n + 1) * sphere_energy(U, a, rho_star)
    if lambda_grid is None:
        ref = boundary_scale(U, a, rho_star)
        if ref == 0.0:
            ref = 1.0
        lambda_grid = ref * np.logspace(-1.0, 3.0, 25)
    rng = substream(seed, "weak-type")
    lhs, se = superlevel_profile(V, a, rho_star, lambda_grid, samples, rng)
    ok = bool(np.all(lhs - n_sigma * se <= rhs * (1 + 1e-12)))
    ratio = lhs / rhs if rhs > 0 else np.zeros_like(lhs)
    k = int(np.argmax(ratio))
    return WeakTypeReport(np.asarray(lambda_grid), lhs, se, float(rhs), ok, float(ratio[k]),
                          float(np.asarray(lambda_grid)[k]))


# -- the improvement step ------------------------------------------------------


@dataclass(frozen=True)
class InequalityRow:
    name: str
    lhs: float
    rhs: float
    std_error: float = 0.0
    tolerance: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.lhs - 3.0 * self.std_error <= self.rhs * (1.0 + self.tolerance) + 1e-14)

    @property
    def slack(self) -> float:
        if self.lhs == 0.0:
            return np.inf
        return float(self.rhs / self.lhs)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "slack": self.slack if np.isfinite(self.slack) else None,
            "std_error": self.std_error,
            "passed": self.passed,
        }


@dataclass(frozen=True)
class ImprovementReport:
    center: np.ndarray
    rho: float
    delta: float
    rho_star: float
    admissible_fraction: float
    bad_fraction: float
    nearby_singularities: int
    boundary_energy: float
    annulus_energy: float
    erased: np.ndarray
    rows: tuple = ()
    flags: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows) and all(self.flags.values())


def _ball_samples(rng, a, radius, count, inner=0.0):
    """Points with hyperbolic distance from a in (inner, radius), Euclidean-uniform in the frame."""
    a = as_array(a)
    m = a.shape[0]
    lo, hi = np.tanh(inner / 2.0) ** m, np.tanh(radius / 2.0) ** m
    s = (lo + (hi - lo) * rng.random(count)) ** (1.0 / m)
    d = rng.normal(size=(count, m))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return _translate(-a, s[:, None] * d)


def improvement_factor(rho: float, delta: float) -> float:
    """1 + (4 sinh(2 rho)/rho) ln(tanh(rho)/tanh(delta/2))."""
    return float(1.0 + 4.0 * np.sinh(2.0 * rho) / rho * np.log(np.tanh(rho) / np.tanh(delta / 2.0)))


def weak_factor(rho: float, n: int) -> float:
    return float(4.0 * np.sinh(2.0 * rho) / ((n + 1) * rho))


def improve_on_ball(U, a, rho: float, delta: float, S: SingularitySet, iota: float, margin: float = 0.0,
                    candidates: int = 64, seed=0, stage: int = 0, strict: bool = True,
                    verify: bool = True, mc_samples: int = 1 << 14, ball: int = 0):
    """Radially extend U inside a good sphere about a with radius in (rho, 2 rho).

    Returns (V, erased, new singularity set, report).  `iota` is the radius of
    the neighbourhood N; admissible spheres must have certified sup
    distance to the map's range below iota - margin and avoid every
    delta-ball of S (strictly, with a small hyperbolic margin).
    """
    U = as_composite(U)
    a = as_array(a).astype(float)
    n = a.shape[0] - 1
    rng = substream(seed, f"improve-{stage}-{ball}")
    radii = rho + rho * (np.arange(candidates) + rng.random(candidates)) / candidates
    dists = hyperbolic_distance(S.points, a) if len(S) else np.zeros(0)
    nearby = S.count_within(a, 3.0 * rho)
    iota_eff = iota - margin
    avoid = np.array([np.all(np.abs(dists - r) >= delta + EXCLUSION_MARGIN) for r in radii])
    good = np.array([
        sphere_sup(U, a, float(r), resolve=0.1 * iota_eff, threshold=iota_eff).bound < iota_eff for r in radii
    ])
    admissible = avoid & good
    bad_fraction = float(1.0 - good.mean())
    diag = {
        "center": a.tolist(),
        "rho": rho,
        "delta": delta,
        "bad_fraction": bad_fraction,
        "admissible_fraction": float(admissible.mean()),
        "nearby_singularities": nearby,
        "allowed_singularities": rho / (4.0 * delta),
    }
    if strict and (nearby > rho / (4.0 * delta) or bad_fraction > 0.25):
        raise ImprovementError("improvement hypotheses fail on this ball", diag)
    if not admissible.any():
        raise ImprovementError(
            f"no admissible radius among {candidates} samples (bad fraction {bad_fraction:.3f})", diag
        )
    omega = _frame_sphere(n, default_sphere_resolution(n) // 2)
    energies = np.full(candidates, np.inf)
    for i in np.nonzero(admissible)[0]:
        energies[i] = sphere_energy(U, a, float(radii[i]), omega)
    best = int(np.argmin(energies))
    rho_star = float(radii[best])
    redirect = RadialRedirect(HyperbolicBall(a, rho_star), stage)
    V = U.with_redirect(redirect)
    erased_mask = dists + delta < rho_star
    erased = S.points[erased_mask]
    survivors = S.points[~erased_mask]
    new_S = SingularitySet(np.vstack([survivors, a[None, :]]), delta)

    rows = []
    flags = {}
    annulus = float("nan")
    if verify:
        excl_S = [(b, delta) for b in S.points]
        annulus = ball_energy(U, a, 0.0, 2.0 * rho, excl_S)
        rows.append(InequalityRow("averaging bound", energies[best], 4.0 / rho * annulus, tolerance=0.02))
        flags["erased balls inside B_2rho(a)"] = bool(np.all(dists[erased_mask] + delta <= 2.0 * rho + 1e-12))
        vrng = substream(seed, f"improve-verify-{stage}-{ball}")
        far = _ball_samples(vrng, a, 3.0 * rho, 256, inner=2.0 * rho)
        far = far[np.sqrt(_sqnorm(far)) < 1.0 - 1e-6]
        flags["unchanged outside B_2rho(a)"] = bool(np.array_equal(V.evaluate(far), U.evaluate(far)))
        same = True
        for b in survivors:
            pts = _ball_samples(vrng, b, delta, 32, inner=1e-3 * delta)
            same &= bool(np.array_equal(V.evaluate(pts), U.evaluate(pts)))
        flags["surviving singular balls unchanged"] = same
        pts = _ball_samples(vrng, a, 2.0 * rho, 1024, inner=1e-6)
        pts = pts[np.sqrt(_sqnorm(pts)) < 1.0 - 1e-6]
        target = U.target
        in_u = target.distance_to(U.evaluate(pts)) < iota
        in_v = target.distance_to(V.evaluate(pts)) < iota
        inner = hyperbolic_distance(pts, a) < rho
        flags["good set grows"] = bool(np.all(in_v[in_u | inner]))
        weak = weak_factor(rho, n) * annulus
        lam_ref = boundary_scale(U, a, rho_star) or 1.0
        lams = lam_ref * np.logspace(-1.0, 3.0, 9)
        prof, se = superlevel_profile(V, a, delta, lams, mc_samples, vrng)
        k = int(np.argmax(prof))
        rows.append(InequalityRow("weak bound in B_delta(a)", float(prof[k]), weak, float(se[k])))
        excl_V = [(b, delta) for b in survivors]
        energy_v = ball_energy(V, a, delta, 2.0 * rho, excl_V)
        rows.append(
            InequalityRow("energy growth", energy_v, improvement_factor(rho, delta) * annulus, tolerance=0.02)
        )
    report = ImprovementReport(
        a.copy(), float(rho), float(delta), rho_star, float(admissible.mean()), bad_fraction, nearby,
        float(energies[best]), float(annulus), erased, tuple(rows), flags,
    )
    return V, erased, new_S, report


__all__ = [
    "RadialRedirect",
    "CompositeField",
    "SingularitySet",
    "RemovableSingularityError",
    "ImprovementError",
    "radial_evaluate",
    "radial_jacobian",
    "sphere_energy",
    "ball_energy",
    "annulus_factor",
    "annulus_energy_identity_check",
    "log_factor_by_quadrature",
    "weak_type_check",
    "superlevel_profile",
    "improve_on_ball",
    "improvement_factor",
    "weak_factor",
    "InequalityRow",
    "ImprovementReport",
    "IdentityReport",
    "WeakTypeReport",
]
