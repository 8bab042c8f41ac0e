"""Hyperharmonic extension of sphere maps into the ball.

The kernel (1-|x|^2)^n / |y-x|^(2n) / |S^n| has unit mass; the discrete
extension divides by the discrete kernel mass so that constants are
reproduced exactly and values stay in the convex hull of the data.

Two quadrature routes are used:

* kernel route: the kernel weighted node sum, on the map grid for
  |x| <= 0.9 and on a 4x refined grid beyond;
* pullback route: for points so deep that the kernel peak is narrower
  than a few grid cells.  Covariance gives h u(x) = h(u o T_{-c})(T_c x);
  with c on the ray through x at half its hyperbolic distance from 0, both
  the kernel peak at T_c x and the features of u o T_{-c} have width about
  sqrt(1-|x|), which the refined grid resolves.  Needs off-node evaluation
  of u.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hyperbolic import (
    MobiusTransform,
    _sqnorm,
    _translate,
    _translate_jacobian,
    dual_norm_factor,
    hyperbolic_distance,
    sphere_area,
)
from .spheremap import SphereGrid, SphereMap

EVAL_LIMIT = 1.0 - 1e-6
REFINE_RADIUS = 0.9
REFINE_FACTOR = 4
DEEP_NODES = 16384
# kernel route is trusted while 1 - |x| spans this many grid spacings
RESOLVED_CELLS = 5.0
CHUNK = 2_000_000


class NearBoundaryError(ValueError):
    pass


def kernel_weights(x, grid: SphereGrid) -> np.ndarray:
    """Unnormalised quadrature weights w_j (1-|x|^2)^n / |y_j-x|^(2n) / |S^n|."""
    x = np.asarray(x, dtype=float)
    n = grid.dim
    d2 = ((x[..., None, :] - grid.nodes) ** 2).sum(-1)
    return grid.weights * ((1.0 - _sqnorm(x))[..., None] ** n) / d2**n / sphere_area(n)


def kernel_mass(x, grid: SphereGrid) -> np.ndarray:
    """Discrete kernel mass at x; equals 1 up to quadrature error."""
    return kernel_weights(x, grid).sum(-1)


def _chunks(count: int, per_item: int):
    step = max(1, CHUNK // max(per_item, 1))
    for start in range(0, count, step):
        yield slice(start, min(start + step, count))


@dataclass(eq=False)
class HyperharmonicField:
    """Lazily evaluated extension of `boundary_map` into B^{n+1}."""

    boundary_map: SphereMap
    kernel_grid: SphereGrid | None = None
    fine_grid: SphereGrid | None = None
    allow_pullback: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kernel_grid is None:
            self.kernel_grid = self.boundary_map.grid
        if self.fine_grid is None:
            self.fine_grid = self.kernel_grid.refine(REFINE_FACTOR)
        self._deep_grids = {}

    @property
    def n(self) -> int:
        return self.boundary_map.dim

    @property
    def target(self):
        return self.boundary_map.target

    @property
    def value_dim(self) -> int:
        return self.boundary_map.value_dim

    def _values_on(self, grid: SphereGrid) -> np.ndarray:
        key = id(grid)
        if key not in self._cache:
            if grid is self.boundary_map.grid:
                vals = self.boundary_map.values
            else:
                vals = self.boundary_map.evaluate(grid.nodes)
            self._cache[key] = (grid, vals)
        return self._cache[key][1]

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(_sqnorm(x))
        if np.any(r > EVAL_LIMIT):
            raise NearBoundaryError(
                f"|x| = {r.max():.10f} exceeds the evaluation limit {EVAL_LIMIT}; "
                "use nontangential_check for boundary behaviour"
            )
        return x, r

    def routes(self, r):
        """0 = coarse kernel grid, 1 = refined kernel grid, 2 = pullback."""
        route = np.where(r > REFINE_RADIUS, 1, 0)
        if self.allow_pullback:
            deep = (1.0 - r) < RESOLVED_CELLS * self.fine_grid.spacing
            route = np.where(deep, 2, route)
        return route

    def evaluate(self, x, route: str = "auto") -> np.ndarray:
        """Extension values, shape (..., nu)."""
        return self._evaluate(x, route, with_derivative=False)[0]

    def derivative(self, x, route: str = "auto") -> np.ndarray:
        """Gradient-layout derivative, shape (..., n+1, nu)."""
        return self._evaluate(x, route, with_derivative=True)[1]

    def value_and_derivative(self, x, route: str = "auto"):
        return self._evaluate(x, route, with_derivative=True)

    def jacobian(self, x, route: str = "auto") -> np.ndarray:
        """Standard-layout Jacobian (..., nu, n+1)."""
        return np.swapaxes(self.derivative(x, route), -1, -2)

    def _evaluate(self, x, route, with_derivative):
        x, r = self._check(x)
        shape = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1])
        rf = r.reshape(-1)
        if route == "auto":
            codes = self.routes(rf)
        elif route == "kernel":
            codes = np.where(rf > REFINE_RADIUS, 1, 0)
        elif route == "coarse":
            codes = np.zeros_like(rf, dtype=int)
        elif route == "fine":
            codes = np.ones_like(rf, dtype=int)
        elif route == "pullback":
            codes = np.full(rf.shape, 2)
        else:
            raise ValueError(f"unknown route {route!r}")
        nu = self.value_dim
        m = x.shape[-1]
        vals = np.empty((flat.shape[0], nu))
        ders = np.empty((flat.shape[0], m, nu)) if with_derivative else None
        for code in (0, 1, 2):
            idx = np.nonzero(codes == code)[0]
            if idx.size == 0:
                continue
            if code == 2:
                fn = self._pullback
                groups = self._deep_groups(rf[idx])
            else:
                fn = self._kernel
                groups = [(self.kernel_grid if code == 0 else self.fine_grid, np.ones(idx.size, bool))]
            for grid, mask in groups:
                part = idx[mask]
                for sl in _chunks(part.size, grid.size):
                    sel = part[sl]
                    v, d = fn(flat[sel], grid, with_derivative)
                    vals[sel] = v
                    if with_derivative:
                        ders[sel] = d
        vals = vals.reshape(shape + (nu,))
        if with_derivative:
            ders = ders.reshape(shape + (m, nu))
        return vals, ders

    def _deep_groups(self, r):
        """Pullback grids sized so the halfway point is resolved; circle only."""
        if self.n != 1:
            return [(self.fine_grid, np.ones(r.shape, bool))]
        half = np.tanh(0.5 * np.arctanh(r))
        need = 2.0 * np.pi * RESOLVED_CELLS / (1.0 - half)
        size = 2.0 ** np.ceil(np.log2(np.maximum(need, 1.0)))
        size = np.clip(size, self.fine_grid.size, max(DEEP_NODES, self.fine_grid.size)).astype(int)
        out = []
        for m in np.unique(size):
            if m not in self._deep_grids:
                self._deep_grids[m] = self.fine_grid if m == self.fine_grid.size else SphereGrid.circle(int(m))
            out.append((self._deep_grids[m], size == m))
        return out

    def _kernel(self, x, grid, with_derivative, u=None):
        """Self-normalised kernel sum; `u` may hold per-point node values (P, N, nu)."""
        n = grid.dim
        shared = u is None
        if shared:
            u = self._values_on(grid)
        diff = grid.nodes[None, :, :] - x[:, None, :]
        d2 = np.einsum("pji,pji->pj", diff, diff)
        # routes keep |y - x| above a few grid cells, so plain powers cannot overflow;
        # the constant factor (1-|x|^2)^n / |S^n| cancels in the normalisation
        k = grid.weights / (d2 if n == 1 else d2 * d2)
        mass = k.sum(1)
        if shared:
            vals = (k @ u) / mass[:, None]
        else:
            vals = np.matmul(k[:, None, :], u)[:, 0, :] / mass[:, None]
        if not with_derivative:
            return vals, None
        # d log K / dx = -2n x/(1-|x|^2) + 2n (y-x)/|y-x|^2; the first term
        # drops out against the normalisation
        weighted = (k / d2)[:, :, None] * diff
        p, m = x.shape
        wt = np.swapaxes(weighted, 1, 2)
        if shared:
            moment = (wt.reshape(p * m, -1) @ u).reshape(p, m, -1)
        else:
            moment = np.matmul(wt, u)
        ders = 2.0 * n * (moment - weighted.sum(1)[:, :, None] * vals[:, None, :]) / mass[:, None, None]
        return vals, ders

    def _pullback(self, x, grid, with_derivative):
        m = x.shape[-1]
        r = np.sqrt(_sqnorm(x))
        # halfway point c on the ray through x; T_c x lies on the same ray at |c|
        s = np.tanh(0.5 * np.arctanh(r))
        c = (s / r)[:, None] * x
        inner = s[:, None] * x / r[:, None]
        # T_{-c} on unit vectors z: ((1-|c|^2)(z+c) + d c) / d with d = |z+c|^2
        c2 = _sqnorm(c)[:, None, None]
        d = (1.0 + c2[:, :, 0] + 2.0 * (c @ grid.nodes.T))[:, :, None]
        pts = ((1.0 - c2) * (grid.nodes[None, :, :] + c[:, None, :]) + d * c[:, None, :]) / d
        pts /= np.linalg.norm(pts, axis=-1, keepdims=True)
        u = self.boundary_map.evaluate(pts.reshape(-1, m)).reshape(x.shape[0], grid.size, -1)
        vals, d_inner = self._kernel(inner, grid, with_derivative, u)
        if not with_derivative:
            return vals, None
        # chain rule: gradient layout, d/dx = J_c(x)^T d/dx'
        jac = np.stack([_translate_jacobian(c[i], x[i]) for i in range(x.shape[0])])
        return vals, np.einsum("pji,pjk->pik", jac, d_inner)

    def with_map(self, boundary_map: SphereMap) -> "HyperharmonicField":
        return HyperharmonicField(boundary_map, self.kernel_grid, self.fine_grid, self.allow_pullback)


def hyperharmonic_extension(u: SphereMap, refine: int = REFINE_FACTOR) -> HyperharmonicField:
    return HyperharmonicField(u, u.grid, u.grid.refine(refine))


# -- checks ------------------------------------------------------------------


def covariance_defect(field: HyperharmonicField, T: MobiusTransform, sample, route: str = "kernel") -> float:
    """max |h(u o T)(x) - h(u)(T x)| over the sample."""
    sample = np.asarray(sample, dtype=float)
    pulled = field.boundary_map.compose_mobius(T)
    other = field.with_map(pulled)
    lhs = other.evaluate(sample, route=route)
    rhs = field.evaluate(T(sample), route=route)
    return float(np.max(np.linalg.norm(lhs - rhs, axis=-1)))


def uniform_ball_sample(rng: np.random.Generator, count: int, dim: int, radius: float = 1.0) -> np.ndarray:
    d = rng.normal(size=(count, dim))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d * radius * rng.random(count)[:, None] ** (1.0 / dim)


def ball_volume(dim: int, radius: float = 1.0) -> float:
    return sphere_area(dim - 1) / dim * radius**dim


@dataclass(frozen=True)
class EnergyEstimate:
    value: float
    std_error: float
    truncation_radius: float
    samples: int
    max_hyperbolic_gradient: float


def hyperbolic_energy(
    field: HyperharmonicField,
    mc_samples: int,
    seed: int | np.random.Generator,
    truncation_radius: float = 8.0,
) -> EnergyEstimate:
    """Monte Carlo estimate of the hyperbolic (n+1)-energy on B^H_R(0).

    Points are uniform in the Euclidean ball of radius tanh(R/2) and the
    integrand |Dh|_H^(n+1) is weighted by the density of the hyperbolic
    measure.
    """
    if mc_samples < 10_000:
        raise ValueError("use at least 1e4 samples")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = field.n + 1
    radius = min(float(np.tanh(truncation_radius / 2.0)), EVAL_LIMIT)
    x = uniform_ball_sample(rng, mc_samples, m, radius)
    jac = field.derivative(x)
    op = np.linalg.norm(jac, ord=2, axis=(-2, -1))
    hyp = dual_norm_factor(x) * op
    density = (2.0 / (1.0 - _sqnorm(x))) ** m
    vals = hyp**m * density * ball_volume(m, radius)
    return EnergyEstimate(
        float(vals.mean()),
        float(vals.std(ddof=1) / np.sqrt(mc_samples)),
        float(2.0 * np.arctanh(radius)),
        mc_samples,
        float(hyp.max()),
    )


def explicit_distance_bound(seminorm: float, n: int) -> float:
    """Explicit bound on dist(h u(x), u(S^n)) in terms of the seminorm."""
    return (4.0 ** (2 * n) * seminorm / sphere_area(n) ** 2) ** (1.0 / (n + 1))


@dataclass(frozen=True)
class NontangentialReport:
    point: np.ndarray
    alpha: float
    steps: np.ndarray
    deviations: np.ndarray
    tail_decreasing: bool


def _tangent(y, rng=None):
    y = np.asarray(y, dtype=float)
    if y.shape[0] == 2:
        return np.array([-y[1], y[0]])
    trial = np.eye(3)[np.argmin(np.abs(y))]
    t = trial - y * (trial @ y)
    return t / np.linalg.norm(t)


def nontangential_check(
    field,
    y,
    alpha: float = 0.5,
    steps=range(4, 15),
    floor: float = 1e-12,
    tail: int = 4,
) -> NontangentialReport:
    """Sample h u along x_j = (1-2^-j) normalise(y + alpha 2^-j t), t tangent at y."""
    y = np.asarray(y, dtype=float)
    y = y / np.linalg.norm(y)
    t = _tangent(y)
    js = np.asarray(list(steps))
    eps = 2.0 ** (-js.astype(float))
    dirs = y[None, :] + alpha * eps[:, None] * t[None, :]
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    pts = (1.0 - eps)[:, None] * dirs
    boundary = field.boundary_map if hasattr(field, "boundary_map") else field.base.boundary_map
    target_value = boundary.evaluate(y[None, :])[0]
    dev = np.linalg.norm(field.evaluate(pts) - target_value, axis=-1)
    last = dev[-tail:]
    ok = bool(np.all((np.diff(last) <= 1e-12 + 1e-9 * last[:-1]) | (last[1:] < floor)))
    return NontangentialReport(y, alpha, js, dev, ok)


def distance_to_range(field: HyperharmonicField, x) -> np.ndarray:
    return field.boundary_map.distance_to_range(field.evaluate(x))


__all__ = [
    "HyperharmonicField",
    "hyperharmonic_extension",
    "kernel_weights",
    "kernel_mass",
    "covariance_defect",
    "hyperbolic_energy",
    "EnergyEstimate",
    "nontangential_check",
    "NontangentialReport",
    "explicit_distance_bound",
    "uniform_ball_sample",
    "ball_volume",
    "hyperbolic_distance",
    "NearBoundaryError",
    "distance_to_range",
]
