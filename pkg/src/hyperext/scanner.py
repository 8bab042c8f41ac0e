"""Good and bad spheres: sup-distance scans, density of good radii, scale choice.

A point x is good when dist(h u(x), u(S^n)) < iota.  Spheres are sampled
uniformly in the Euclidean picture: the image of a hyperbolic sphere is a
Euclidean sphere, and the extension varies on the Euclidean scale of the
boundary map, so Euclidean-uniform samples resolve it evenly.

Every sampled sup carries a certificate: with `gap` the largest distance
from a sphere point to the nearest sample and `lip` a bound on |Dh| over
the samples, max + lip * gap bounds the sup on the whole sphere.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from ._rng import substream
from .extension import EVAL_LIMIT, NearBoundaryError, explicit_distance_bound
from .hyperbolic import BallPoint, HyperbolicBall, as_array, hyperbolic_distance

LIP_SAFETY = 1.25
MAX_SAMPLES = 1 << 15
PROBE_TOLERANCE = 0.05
MAX_EVAL_RADIUS = 2.0 * float(np.arctanh(EVAL_LIMIT))


def default_samples(n: int) -> int:
    return 256 if n == 1 else 512


# -- sampling spheres -------------------------------------------------------


def _fibonacci(m: int) -> np.ndarray:
    k = np.arange(m) + 0.5
    z = 1.0 - 2.0 * k / m
    phi = np.pi * (1.0 + np.sqrt(5.0)) * k
    s = np.sqrt(1.0 - z**2)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)


@lru_cache(maxsize=64)
def _fibonacci_gap(m: int) -> float:
    # covering radius of the Fibonacci lattice, probed once per size
    probe = np.random.default_rng(0).normal(size=(20000, 3))
    probe /= np.linalg.norm(probe, axis=-1, keepdims=True)
    d, _ = cKDTree(_fibonacci(m)).query(probe)
    return 1.1 * float(d.max())


def unit_sphere_samples(dim: int, m: int) -> tuple[np.ndarray, float]:
    """m quasi-uniform points on the unit sphere in R^dim and their covering gap."""
    if dim == 2:
        t = 2.0 * np.pi * (np.arange(m) + 0.5) / m
        return np.stack([np.cos(t), np.sin(t)], axis=-1), float(np.pi / m)
    if dim == 3:
        return _fibonacci(m), _fibonacci_gap(m)
    raise ValueError("spheres in R^2 and R^3 only")


def max_evaluable_radius(center) -> float:
    """Largest hyperbolic r whose sphere about `center` stays evaluable."""
    d0 = float(hyperbolic_distance(as_array(center), np.zeros_like(as_array(center))))
    return MAX_EVAL_RADIUS - d0


def sphere_points(center, radius: float, m: int) -> tuple[np.ndarray, float]:
    """Euclidean-uniform samples on the hyperbolic sphere and their covering gap."""
    center = as_array(center)
    limit = max_evaluable_radius(center)
    if radius > limit:
        raise NearBoundaryError(
            f"sphere of radius {radius:.4g} about |a| = {np.linalg.norm(center):.4g} leaves the "
            f"evaluable region; the largest usable radius here is {limit:.4g}"
        )
    unit, gap = unit_sphere_samples(center.shape[0], m)
    if radius == 0.0:
        return center[None, :].copy(), 0.0
    c, R = HyperbolicBall(center, radius).euclidean_sphere()
    return c + R * unit, R * gap


# -- sup over one sphere ------------------------------------------------------


@dataclass(frozen=True)
class SphereSup:
    radius: float
    value: float  # max over samples
    bound: float  # value + lip * gap
    samples: int
    probe_change: float | None = None
    argmax: np.ndarray | None = None


def _sup_on_points(field, pts, gap, with_bound):
    boundary = field.boundary_map if hasattr(field, "boundary_map") else field.base.boundary_map
    if with_bound:
        vals, der = field.value_and_derivative(pts)
        lip = LIP_SAFETY * float(np.max(np.linalg.norm(der, ord=2, axis=(-2, -1))))
    else:
        vals, lip = field.evaluate(pts), 0.0
    d = boundary.distance_to_range(vals)
    k = int(np.argmax(d))
    return float(d[k]), float(d[k] + lip * gap), lip, pts[k]


def sphere_sup(field, a, r: float, m: int | None = None, resolve: float | None = None,
               probe: bool = False, threshold: float | None = None) -> SphereSup:
    """Sampled sup of dist(h u, u-range) on the sphere of radius r about a.

    With `resolve` set, the sample count grows until lip * gap <= resolve,
    or, given `threshold`, until the sphere is certainly good (bound below
    it) or certainly bad (a sample at or above it).
    With `probe`, the count is doubled once and the relative change stored.
    """
    a = as_array(a)
    n = a.shape[0] - 1
    m = default_samples(n) if m is None else int(m)
    with_bound = resolve is not None
    while True:
        pts, gap = sphere_points(a, r, m)
        value, bound, lip, where = _sup_on_points(field, pts, gap, with_bound)
        if not with_bound or lip * gap <= resolve or m >= MAX_SAMPLES or r == 0.0:
            break
        if threshold is not None and (bound < threshold or value >= threshold):
            break
        m = min(MAX_SAMPLES, 2 * m)
    change = None
    if probe and r > 0.0:
        pts2, _ = sphere_points(a, r, 2 * m)
        v2 = float(field.boundary_map.distance_to_range(field.evaluate(pts2)).max())
        change = abs(v2 - value) / max(v2, 1e-300)
    return SphereSup(float(r), value, bound if with_bound else value, m, change, where)


def sup_distance_on_sphere(field, a, r: float, m: int | None = None) -> float:
    """Max of dist(h u, u-range) over m samples of the sphere of radius r about a."""
    return sphere_sup(field, a, r, m).value


# -- scans ----------------------------------------------------------------


@dataclass(frozen=True)
class SphereScan:
    center: np.ndarray
    radii: np.ndarray
    sup_dist: np.ndarray
    samples_per_sphere: int
    bounds: np.ndarray | None = None

    def __post_init__(self):
        if np.any(np.diff(self.radii) <= 0):
            raise ValueError("radii must increase")
        if np.any(self.sup_dist < 0):
            raise ValueError("negative distance")

    def explicit_bound_violations(self, seminorm: float) -> int:
        n = self.center.shape[0] - 1
        return int(np.sum(self.sup_dist > explicit_distance_bound(seminorm, n) * (1 + 1e-12)))

    def integral(self, upto: float) -> float:
        """Trapezoid integral of sup_dist over (0, upto), on the scanned radii."""
        keep = self.radii <= upto + 1e-12
        return float(np.trapezoid(self.sup_dist[keep], self.radii[keep]))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["radius_hyperbolic", "sup_dist_euclidean", "certified_bound"])
            bounds = self.bounds if self.bounds is not None else self.sup_dist
            for r, s, b in zip(self.radii, self.sup_dist, bounds):
                w.writerow([f"{r:.6f}", f"{s:.12e}", f"{b:.12e}"])


def scan_spheres(field, a, radii, m: int | None = None, resolve: float | None = None) -> SphereScan:
    a = as_array(a)
    n = a.shape[0] - 1
    m = default_samples(n) if m is None else m
    sups = [sphere_sup(field, a, float(r), m, resolve) for r in radii]
    return SphereScan(
        a.copy(),
        np.asarray(radii, dtype=float),
        np.array([s.value for s in sups]),
        int(max(s.samples for s in sups)),
        np.array([s.bound for s in sups]),
    )


def radius_grid(upto: float, step: float) -> np.ndarray:
    count = int(round(upto / step))
    return step * np.arange(count + 1)


# -- density of good spheres ------------------------------------------------------


@dataclass(frozen=True)
class DensityReport:
    center: np.ndarray
    rhos: np.ndarray
    averages: np.ndarray  # (1/rho) * integral of sup_dist over (0, rho)
    constants: np.ndarray  # averages * (1 + rho^(1/(n+1))) / seminorm^(1/(n+1))
    seminorm: float
    scan: SphereScan

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.constants)))

    @property
    def variation(self) -> float:
        c = self.constants
        if np.all(c == 0):
            return 1.0
        return float(c.max() / c.min())


def good_sphere_density_check(field, seminorm: float, a=None, rhos=(1.0, 2.0, 4.0, 8.0),
                              step: float = 0.05, m: int | None = None) -> DensityReport:
    """Average sup-distance over (0, rho) against seminorm^(1/(n+1)) / (1 + rho^(1/(n+1)))."""
    rhos = np.asarray(rhos, dtype=float)
    if rhos.min() < 1.0:
        raise ValueError("radii below 1 are outside the checked range")
    n = field.n
    a = np.zeros(n + 1) if a is None else as_array(a)
    scan = scan_spheres(field, a, radius_grid(rhos.max(), step), m)
    avg = np.array([scan.integral(r) / r for r in rhos])
    p = 1.0 / (n + 1)
    if seminorm > 0:
        const = avg * (1.0 + rhos**p) / seminorm**p
    else:
        # a constant map leaves only round-off in the averages
        const = np.where(avg <= 1e-12, 0.0, np.inf)
    return DensityReport(a, rhos, avg, const, float(seminorm), scan)


@dataclass(frozen=True)
class W1nReport:
    rhos: np.ndarray
    integrals: np.ndarray
    energy: float
    constants: np.ndarray  # integral / (energy^(1/n) rho^(1-1/n))
    rho_independent_rhs: bool


def w1n_good_radius_check(field, energy: float, a=None, rhos=(1.0, 2.0, 4.0, 8.0),
                          step: float = 0.05, m: int | None = None) -> W1nReport:
    """Integral of the sup-distance over (0, rho) against energy^(1/n) rho^(1-1/n).

    `energy` is the integral of |Du|^n over S^n.  For n = 1 the right side
    does not depend on rho, so the integral must stay bounded in rho.
    """
    n = field.n
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    rhos = np.asarray(rhos, dtype=float)
    a = np.zeros(n + 1) if a is None else as_array(a)
    scan = scan_spheres(field, a, radius_grid(rhos.max(), step), m)
    ints = np.array([scan.integral(r) for r in rhos])
    rhs = energy ** (1.0 / n) * rhos ** (1.0 - 1.0 / n)
    with np.errstate(divide="ignore", invalid="ignore"):
        const = np.where(ints == 0, 0.0, ints / rhs)
    return W1nReport(rhos, ints, float(energy), const, n == 1)


def calibrate_density_constant(reports) -> float:
    """Largest empirical density constant over a set of reports."""
    vals = np.concatenate([r.constants for r in reports])
    vals = vals[np.isfinite(vals)]
    return float(vals.max()) if vals.size else 0.0


# -- bad radii and the enclosing radius ---------------------------------------------


@dataclass(frozen=True)
class BadRadiusReport:
    iota: float
    bad_measure: float
    rho: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bad_radii: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not (0.0 <= self.bad_measure <= self.rho + 1e-12):
            raise ValueError("bad measure outside [0, rho]")

    @property
    def fraction(self) -> float:
        return self.bad_measure / self.rho


def bad_measure(field, a, rho: float, iota: float, rho_bar: float | None = None,
                step: float | None = None, m: int | None = None, hull=None) -> BadRadiusReport:
    """Measure of the radii r in (rho, 2 rho) whose sphere about a is bad.

    Midpoint rule on cells of width `step`; a cell counts as bad when the
    certified sup bound at its midpoint reaches `iota`.  When `rho_bar` is
    known, spheres with r > d(0, a) + rho_bar miss the bad ball and are good;
    likewise for spheres that miss or enclose a given bad hull.
    """
    a = as_array(a)
    step = min(0.05, rho / 20.0) if step is None else step
    cells = max(1, int(np.ceil(rho / step)))
    width = rho / cells
    mids = rho + width * (np.arange(cells) + 0.5)
    d0 = float(hyperbolic_distance(a, np.zeros_like(a)))
    dw = None if hull is None else float(hyperbolic_distance(a, hull.center))
    bad = []
    for r in mids:
        if rho_bar is not None and r > d0 + rho_bar:
            continue
        if hull is not None and abs(r - dw) > hull.radius:
            continue
        s = sphere_sup(field, a, float(r), m, resolve=0.1 * iota, threshold=iota)
        if s.bound >= iota:
            bad.append(r)
    bad = np.array(bad)
    return BadRadiusReport(float(iota), float(width * bad.size), float(rho), a.copy(), bad)


@dataclass(frozen=True)
class EnclosingRadius:
    rho_bar: float
    scan: SphereScan
    iota: float
    tail_max: float
    tail_slope: float
    worst_point: np.ndarray | None = None  # sample with the largest distance on a bad sphere

    @property
    def center(self) -> np.ndarray:
        return self.scan.center


def enclosing_bad_radius(field, iota: float, step: float = 0.1, extra: float = 4.0,
                         m: int | None = None, center=None) -> EnclosingRadius:
    """Smallest scanned radius beyond which every scanned sphere about `center` is good.

    The centre defaults to the origin.  The scan continues to rho_bar + extra;
    failing to get there inside the evaluable region means the map is too
    rough for the grids in use.
    """
    if iota <= 0:
        raise ValueError("iota must be positive")
    n = field.n
    origin = np.zeros(n + 1) if center is None else as_array(center).astype(float)
    limit = max_evaluable_radius(origin)
    radii, sups, bounds = [], [], []
    last_bad = -1
    worst, worst_value = None, -np.inf
    k = 0
    while True:
        r = k * step
        rho_bar = (last_bad + 1) * step
        if r > rho_bar + extra + 1e-9:
            break
        if r > limit:
            raise NearBoundaryError(
                f"bad spheres persist up to r = {rho_bar:.2f}; no enclosing radius within the "
                f"evaluable region (r <= {limit:.2f}). Use larger grids: the map is "
                "too rough for the current resolution"
            )
        s = sphere_sup(field, origin, r, m, resolve=0.1 * iota, threshold=iota)
        radii.append(r)
        sups.append(s.value)
        bounds.append(s.bound)
        if s.bound >= iota:
            last_bad = k
            if s.value > worst_value:
                worst, worst_value = s.argmax, s.value
        k += 1
    rho_bar = (last_bad + 1) * step
    scan = SphereScan(origin, np.array(radii), np.array(sups), default_samples(n) if m is None else m,
                      np.array(bounds))
    tail = scan.radii >= rho_bar - 1e-12
    tail_vals = scan.sup_dist[tail]
    slope = float(np.polyfit(scan.radii[tail], tail_vals, 1)[0]) if tail.sum() > 1 else 0.0
    return EnclosingRadius(float(rho_bar), scan, float(iota), float(tail_vals.max()), slope,
                           None if worst is None else np.asarray(worst, dtype=float))


@dataclass(frozen=True)
class BadHull:
    """A hyperbolic ball certified to contain every bad point of the field."""

    center: np.ndarray
    radius: float
    scan: EnclosingRadius


def bad_hull(field, iota: float, enclosing: EnclosingRadius | None = None, step: float = 0.1) -> BadHull | None:
    """Tight enclosing ball of the bad set, centred at the worst sample found about the origin.

    Returns None when no bad sphere was found (the field is good everywhere).
    """
    enclosing = enclosing_bad_radius(field, iota, step) if enclosing is None else enclosing
    if enclosing.worst_point is None:
        return None
    w = enclosing.worst_point
    if float(np.linalg.norm(w)) == 0.0:
        return BadHull(w, enclosing.rho_bar, enclosing)
    about = enclosing_bad_radius(field, iota, step, center=w)
    return BadHull(w, about.rho_bar, about)


# -- the scale rho ----------------------------------------------------------


def formula_rho(seminorm: float, iota: float, c1: float, n: int) -> float:
    """rho = (1/2) (8 c1 / iota)^(n+1) * seminorm, c1 the good-sphere density constant."""
    if seminorm < 0 or iota <= 0 or c1 <= 0:
        raise ValueError("need seminorm >= 0, iota > 0, c1 > 0")
    return 0.5 * (8.0 * c1 / iota) ** (n + 1) * seminorm


def sample_centers(rng: np.random.Generator, n: int, region: float, count: int = 8, around=None) -> np.ndarray:
    """The origin plus count-1 points at hyperbolic distance uniform in [0, region] from `around`.

    `around` defaults to the origin; otherwise it is included as a centre too.
    """
    dirs = rng.normal(size=(count - 1, n + 1))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    dist = region * rng.random(count - 1)
    pts = np.tanh(dist / 2.0)[:, None] * dirs
    if around is None or float(np.linalg.norm(around)) == 0.0:
        return np.vstack([np.zeros(n + 1), pts])
    around = as_array(around)
    from .hyperbolic import _translate

    moved = _translate(-around, pts[1:]) if count > 2 else np.zeros((0, n + 1))
    return np.vstack([np.zeros(n + 1), around[None, :], moved])


@dataclass(frozen=True)
class RhoChoice:
    formula: float
    working: float
    doublings: int
    halvings: int
    reports: tuple
    levels: tuple  # (rho, passed) for every level tried; passed is None when not evaluable


def verify_rho(field, rho: float, iota: float, rho_bar: float, centers, hull=None) -> tuple[bool, list]:
    reports = []
    for c in centers:
        rep = bad_measure(field, c, rho, iota, rho_bar=rho_bar, hull=hull)
        reports.append(rep)
        if rep.bad_measure > rho / 4.0:
            return False, reports
    return True, reports


def choose_rho(seminorm: float, iota: float, calibrated_c1: float, field=None, rho_bar: float = 0.0,
               seed=0, count: int = 8, descend: bool = True, max_doublings: int = 8,
               hull: BadHull | None = None, formula: float | None = None,
               min_rho: float = 0.0) -> RhoChoice:
    """Formula scale, then a verified working scale.

    The working scale is the smallest dyadic fraction rho_f 2^-j (not below
    `min_rho`) whose bad-radius measure on (rho, 2 rho) stays <= rho / 4 at
    the test centres.  Test centres are the origin plus seeded points: around
    the bad hull when one is given (hull centre included), otherwise in
    B_{rho_bar + rho}(0).  If the formula value itself fails it is doubled
    until it passes.  `formula` overrides the seminorm formula value.
    """
    if field is None:
        rho_f = formula_rho(seminorm, iota, calibrated_c1, 1) if formula is None else formula
        return RhoChoice(rho_f, 0.0, 0, 0, (), ())
    n = field.n
    rho_f = formula_rho(seminorm, iota, calibrated_c1, n) if formula is None else float(formula)
    if rho_f == 0.0:
        return RhoChoice(0.0, 0.0, 0, 0, (), ())
    rng = substream(seed, "rho-centers")
    levels = []

    def check(rho):
        if hull is not None:
            centers = sample_centers(rng, n, hull.radius, count, around=hull.center)
            spread = float(hyperbolic_distance(hull.center, np.zeros(n + 1))) + hull.radius
        else:
            centers = sample_centers(rng, n, rho_bar + rho, count)
            spread = rho_bar + rho
        # every center and sphere must be evaluable before the level counts
        reach = spread + 2.0 * rho
        if reach > MAX_EVAL_RADIUS or rho < min_rho:
            levels.append((rho, None))
            return None, []
        ok, reps = verify_rho(field, rho, iota, rho_bar, centers, hull)
        levels.append((rho, ok))
        return ok, reps

    rho = rho_f
    ok, reps = check(rho)
    doublings = 0
    while ok is False and doublings < max_doublings:
        rho *= 2.0
        doublings += 1
        ok, reps = check(rho)
    best, best_reps, halvings = (rho, reps, 0) if ok else (None, [], 0)
    if descend and doublings == 0:
        j = 0
        trial = rho_f
        while trial > max(min_rho, 1e-3):
            j += 1
            trial = rho_f * 2.0**-j
            ok_t, reps_t = check(trial)
            if ok_t is None:
                continue
            if not ok_t:
                break
            best, best_reps, halvings = trial, reps_t, j
    if best is None:
        raise RuntimeError(f"no verified scale found; levels tried: {levels}")
    return RhoChoice(float(rho_f), float(best), doublings, halvings, tuple(best_reps), tuple(levels))


__all__ = [
    "SphereScan",
    "SphereSup",
    "BadRadiusReport",
    "DensityReport",
    "W1nReport",
    "EnclosingRadius",
    "BadHull",
    "bad_hull",
    "RhoChoice",
    "sphere_points",
    "sphere_sup",
    "sup_distance_on_sphere",
    "scan_spheres",
    "good_sphere_density_check",
    "w1n_good_radius_check",
    "calibrate_density_constant",
    "bad_measure",
    "enclosing_bad_radius",
    "formula_rho",
    "choose_rho",
    "verify_rho",
    "max_evaluable_radius",
]
