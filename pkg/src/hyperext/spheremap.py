"""Sphere grids, sampled sphere maps, target manifolds and seminorm estimators."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import special
from scipy.spatial import cKDTree

from .hyperbolic import MobiusTransform, sphere_area

EXCLUDED_MASS_WARN = 0.05


# -- grids ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SphereGrid:
    """Quadrature nodes and weights on S^n, n in {1, 2}.

    n = 1: m equally spaced angles with equal weights.
    n = 2: Gauss-Legendre in cos(latitude) times equally spaced longitudes.
    """

    dim: int
    nodes: np.ndarray
    weights: np.ndarray
    shape: tuple  # (m,) for circles, (n_lat, n_lon) for spheres

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("only S^1 and S^2 grids are supported")
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)

    @classmethod
    def circle(cls, m: int) -> "SphereGrid":
        theta = 2.0 * np.pi * np.arange(m) / m
        nodes = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        return cls(1, nodes, np.full(m, 2.0 * np.pi / m), (m,))

    @classmethod
    def sphere(cls, n_lat: int, n_lon: int | None = None) -> "SphereGrid":
        n_lon = 2 * n_lat if n_lon is None else n_lon
        t, w = special.roots_legendre(n_lat)
        phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
        st = np.sqrt(1.0 - t**2)
        nodes = np.stack(
            [np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)), np.outer(t, np.ones(n_lon))],
            axis=-1,
        ).reshape(-1, 3)
        weights = np.outer(w, np.full(n_lon, 2.0 * np.pi / n_lon)).reshape(-1)
        return cls(2, nodes, weights, (n_lat, n_lon))

    @classmethod
    def make(cls, dim: int, resolution: int) -> "SphereGrid":
        """resolution = node count on S^1, latitude count on S^2."""
        if dim == 1:
            return cls.circle(resolution)
        if dim == 2:
            return cls.sphere(resolution)
        raise ValueError(f"unsupported sphere dimension {dim} (only 1 and 2)")

    @property
    def resolution(self) -> int:
        return self.shape[0]

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def spacing(self) -> float:
        """Largest angular gap between neighbouring nodes."""
        if self.dim == 1:
            return 2.0 * np.pi / self.shape[0]
        n_lat, n_lon = self.shape
        return max(np.pi / n_lat, 2.0 * np.pi / n_lon)

    def refine(self, factor: int) -> "SphereGrid":
        return SphereGrid.make(self.dim, self.resolution * factor)

    def integrate(self, values) -> np.ndarray:
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))

    def neighbour_pairs(self) -> np.ndarray:
        """Index pairs (i, j), i != j, at grid distance one."""
        if self.dim == 1:
            m = self.shape[0]
            i = np.arange(m)
            return np.stack([i, (i + 1) % m], axis=-1)
        n_lat, n_lon = self.shape
        idx = np.arange(n_lat * n_lon).reshape(n_lat, n_lon)
        pairs = [np.stack([idx.ravel(), np.roll(idx, -1, axis=1).ravel()], -1)]
        pairs.append(np.stack([idx[:-1].ravel(), idx[1:].ravel()], -1))
        pairs.append(np.stack([idx[:-1].ravel(), np.roll(idx, -1, axis=1)[1:].ravel()], -1))
        pairs.append(np.stack([idx[:-1].ravel(), np.roll(idx, 1, axis=1)[1:].ravel()], -1))
        return np.concatenate(pairs)

    def near_diagonal_mask(self, rows: np.ndarray) -> np.ndarray:
        """Boolean (len(rows), size) mask of node pairs at grid distance <= 1."""
        if self.dim == 1:
            m = self.shape[0]
            d = np.abs(rows[:, None] - np.arange(m)[None, :])
            d = np.minimum(d, m - d)
            return d <= 1
        n_lat, n_lon = self.shape
        li, lj = np.divmod(rows, n_lon)
        all_i, all_j = np.divmod(np.arange(self.size), n_lon)
        di = np.abs(li[:, None] - all_i[None, :])
        dj = np.abs(lj[:, None] - all_j[None, :])
        dj = np.minimum(dj, n_lon - dj)
        return (di <= 1) & (dj <= 1)


# -- targets ----------------------------------------------------------------


class ManifoldTarget:
    """Compact target M in R^nu with a retraction defined on its iota-tube."""

    name = "target"
    ambient_dim: int
    tube_radius: float
    lipschitz_bound: float

    def closest_point(self, y):
        raise NotImplementedError

    def distance_to(self, y):
        y = np.asarray(y, dtype=float)
        return np.linalg.norm(y - self.closest_point(y), axis=-1)

    def retract(self, y):
        return self.closest_point(y)

    def retraction_jacobian(self, y, h: float = 1e-6):
        """Standard-layout Jacobian (..., nu, nu) of the retraction."""
        y = np.asarray(y, dtype=float)
        cols = []
        for k in range(self.ambient_dim):
            e = np.zeros(self.ambient_dim)
            e[k] = h
            cols.append((self.retract(y + e) - self.retract(y - e)) / (2 * h))
        return np.stack(cols, axis=-1)

    def sample(self, count: int, rng: np.random.Generator):
        raise NotImplementedError

    def describe(self) -> dict:
        return {
            "name": self.name,
            "ambient_dim": self.ambient_dim,
            "tube_radius": self.tube_radius,
            "lipschitz_bound": self.lipschitz_bound,
        }


class UnitSphereTarget(ManifoldTarget):
    """Unit sphere S^k in R^(k+1); the retraction y/|y| is smooth off 0."""

    def __init__(self, k: int, tube_radius: float = 0.5):
        if not 0 < tube_radius < 1:
            raise ValueError("tube radius of a unit sphere must lie in (0, 1)")
        self.k = k
        self.ambient_dim = k + 1
        self.tube_radius = float(tube_radius)
        self.name = f"S{k}"

    @property
    def lipschitz_bound(self) -> float:
        return 1.0 / (1.0 - self.tube_radius)

    def with_tube(self, tube_radius: float) -> "UnitSphereTarget":
        return UnitSphereTarget(self.k, tube_radius)

    def closest_point(self, y):
        y = np.asarray(y, dtype=float)
        return y / np.linalg.norm(y, axis=-1, keepdims=True)

    def distance_to(self, y):
        return np.abs(np.linalg.norm(np.asarray(y, dtype=float), axis=-1) - 1.0)

    def retraction_jacobian(self, y, h=None):
        y = np.asarray(y, dtype=float)
        r = np.linalg.norm(y, axis=-1)
        yh = y / r[..., None]
        eye = np.eye(self.ambient_dim)
        return (eye - np.einsum("...i,...j->...ij", yh, yh)) / r[..., None, None]

    def sample(self, count, rng):
        y = rng.normal(size=(count, self.ambient_dim))
        return y / np.linalg.norm(y, axis=-1, keepdims=True)


class EllipseTarget(ManifoldTarget):
    """Planar ellipse with semi-axes (major, minor) along the coordinate axes."""

    name = "ellipse"

    def __init__(self, major: float = 1.5, minor: float = 1.0, tube_radius: float | None = None, seed: int = 0):
        if not major >= minor > 0:
            raise ValueError("need major >= minor > 0")
        self.major = float(major)
        self.minor = float(minor)
        self.ambient_dim = 2
        # the evolute is closest at the major vertices, at distance minor^2/major
        focal = self.minor**2 / self.major
        self.tube_radius = 0.5 * focal if tube_radius is None else float(tube_radius)
        if self.tube_radius >= focal:
            raise ValueError("tube radius must stay below the focal distance")
        self.lipschitz_bound = self._estimate_lipschitz(np.random.default_rng(seed))

    def point(self, t):
        return np.stack([self.major * np.cos(t), self.minor * np.sin(t)], axis=-1)

    def closest_parameter(self, y):
        y = np.asarray(y, dtype=float)
        flat = y.reshape(-1, 2)
        A, B = self.major, self.minor
        grid = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        pts = self.point(grid)
        d2 = ((flat[:, None, :] - pts[None]) ** 2).sum(-1)
        t = grid[np.argmin(d2, axis=1)]
        for _ in range(30):
            s, c = np.sin(t), np.cos(t)
            f = (A * A - B * B) * s * c - flat[:, 0] * A * s + flat[:, 1] * B * c
            fp = (A * A - B * B) * (c * c - s * s) - flat[:, 0] * A * c - flat[:, 1] * B * s
            step = f / np.where(np.abs(fp) > 1e-14, fp, 1e-14)
            t = t - np.clip(step, -0.5, 0.5)
            if np.max(np.abs(step)) < 1e-15:
                break
        return t.reshape(y.shape[:-1])

    def closest_point(self, y):
        return self.point(self.closest_parameter(y))

    def sample(self, count, rng):
        return self.point(rng.uniform(0, 2 * np.pi, size=count))

    def _estimate_lipschitz(self, rng, count: int = 20000) -> float:
        base = self.sample(count, rng)
        t = self.closest_parameter(base)
        normal = np.stack([self.minor * np.cos(t), self.major * np.sin(t)], -1)
        normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
        y = base + normal * rng.uniform(-self.tube_radius, self.tube_radius, size=(count, 1)) * 0.999
        z = y + rng.normal(scale=1e-3, size=y.shape)
        keep = self.distance_to(z) < self.tube_radius
        ratio = np.linalg.norm(self.retract(y[keep]) - self.retract(z[keep]), axis=-1) / np.linalg.norm(
            y[keep] - z[keep], axis=-1
        )
        return float(max(1.0, ratio.max()))

    def describe(self):
        d = super().describe()
        d.update(major=self.major, minor=self.minor)
        return d


def make_target(name: str, tube_radius: float | None = None) -> ManifoldTarget:
    key = name.lower()
    if key in ("s1", "circle"):
        return UnitSphereTarget(1, 0.5 if tube_radius is None else tube_radius)
    if key in ("s2", "sphere"):
        return UnitSphereTarget(2, 0.5 if tube_radius is None else tube_radius)
    if key == "ellipse":
        return EllipseTarget(tube_radius=tube_radius)
    raise ValueError(f"unknown target {name!r}")


# -- maps -------------------------------------------------------------------


def tangent_projector(y):
    y = np.asarray(y, dtype=float)
    m = y.shape[-1]
    return np.eye(m) - np.einsum("...i,...j->...ij", y, y)


def _angles(y):
    """(theta, phi) with theta the polar angle, or the circle angle for n = 1."""
    if y.shape[-1] == 2:
        return np.arctan2(y[..., 1], y[..., 0])
    return np.arccos(np.clip(y[..., 2], -1, 1)), np.arctan2(y[..., 1], y[..., 0])


class SphereMap:
    """Map u: S^n -> R^nu known at grid nodes and, optionally, everywhere.

    `evaluator(y)` returns u at unit vectors y; `derivative(y)` returns the
    standard-layout Jacobian (..., nu, n+1) of the degree-zero extension
    y -> u(y/|y|), i.e. the tangential derivative composed with the
    tangent projector.
    """

    def __init__(
        self,
        grid: SphereGrid,
        values=None,
        target: ManifoldTarget | None = None,
        evaluator: Callable | None = None,
        derivative: Callable | None = None,
        name: str = "map",
        target_valued: bool = True,
    ):
        self.grid = grid
        self.evaluator = evaluator
        self.derivative = derivative
        self.target = target
        self.name = name
        if values is None:
            if evaluator is None:
                raise ValueError("need node values or an evaluator")
            values = evaluator(grid.nodes)
        self.values = np.array(values, dtype=float)
        self.values.setflags(write=False)
        if self.values.shape[0] != grid.size:
            raise ValueError("one value per grid node expected")
        if target is not None and target_valued:
            off = np.max(target.distance_to(self.values))
            if off > 1e-9:
                raise ValueError(f"map values leave the target (max distance {off:.3e})")

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def value_dim(self) -> int:
        return self.values.shape[1]

    def with_grid(self, grid: SphereGrid) -> "SphereMap":
        if self.evaluator is None:
            raise ValueError("regridding requires a closed-form evaluator")
        return SphereMap(grid, None, self.target, self.evaluator, self.derivative, self.name)

    def evaluate(self, y):
        """Values at arbitrary unit vectors (closed form or interpolation)."""
        y = np.asarray(y, dtype=float)
        if self.evaluator is not None:
            return self.evaluator(y)
        return self._interpolate(y)

    def _interpolate(self, y):
        g = self.grid
        if g.dim == 1:
            m = g.shape[0]
            s = (np.mod(_angles(y), 2 * np.pi)) * m / (2 * np.pi)
            i0 = np.floor(s).astype(int) % m
            f = (s - np.floor(s))[..., None]
            return (1 - f) * self.values[i0] + f * self.values[(i0 + 1) % m]
        n_lat, n_lon = g.shape
        theta, phi = _angles(y)
        lat = np.arccos(np.clip(g.nodes[::n_lon, 2], -1, 1))  # decreasing cos -> increasing theta
        order = np.argsort(lat)
        lat_sorted = lat[order]
        vals = self.values.reshape(n_lat, n_lon, -1)[order]
        s = np.mod(phi, 2 * np.pi) * n_lon / (2 * np.pi)
        j0 = np.floor(s).astype(int) % n_lon
        fj = (s - np.floor(s))[..., None]
        i1 = np.clip(np.searchsorted(lat_sorted, theta), 1, n_lat - 1)
        i0 = i1 - 1
        fi = np.clip((theta - lat_sorted[i0]) / (lat_sorted[i1] - lat_sorted[i0]), 0, 1)[..., None]
        row0 = (1 - fj) * vals[i0, j0] + fj * vals[i0, (j0 + 1) % n_lon]
        row1 = (1 - fj) * vals[i1, j0] + fj * vals[i1, (j0 + 1) % n_lon]
        return (1 - fi) * row0 + fi * row1

    def jacobian(self, y, h: float = 1e-6):
        """Jacobian of the degree-zero extension at unit vectors y."""
        y = np.asarray(y, dtype=float)
        if self.derivative is not None:
            return self.derivative(y)
        if self.evaluator is None and self.grid is None:
            raise ValueError("map carries no derivative information")
        m = y.shape[-1]
        cols = []
        for k in range(m):
            e = np.zeros(m)
            e[k] = h
            yp = y + e
            ym = y - e
            yp /= np.linalg.norm(yp, axis=-1, keepdims=True)
            ym /= np.linalg.norm(ym, axis=-1, keepdims=True)
            cols.append((self.evaluate(yp) - self.evaluate(ym)) / (2 * h))
        return np.stack(cols, axis=-1)

    def compose_mobius(self, T: MobiusTransform, grid: SphereGrid | None = None) -> "SphereMap":
        """The map y -> u(T(y)) on the sphere."""
        base = self
        grid = self.grid if grid is None else grid

        def evaluator(y):
            return base.evaluate(T.apply_unchecked(y))

        def derivative(y):
            y = np.asarray(y, dtype=float)
            ty = T.apply_unchecked(y)
            inner = np.einsum("...ij,...jk->...ik", T.jacobian(y), tangent_projector(y))
            return np.einsum("...ij,...jk->...ik", base.jacobian(ty), inner)

        return SphereMap(grid, None, self.target, evaluator, derivative, f"{self.name}*mobius")

    @cached_property
    def value_tree(self) -> cKDTree:
        return cKDTree(self.values)

    def distance_to_range(self, v):
        """Distance from points of R^nu to the node values of u."""
        v = np.asarray(v, dtype=float)
        d, _ = self.value_tree.query(v.reshape(-1, self.value_dim))
        return d.reshape(v.shape[:-1])

    def node_oscillation(self) -> float:
        """Half the largest jump of u between neighbouring nodes."""
        pairs = self.grid.neighbour_pairs()
        jumps = np.linalg.norm(self.values[pairs[:, 0]] - self.values[pairs[:, 1]], axis=-1)
        return 0.5 * float(jumps.max())

    def lipschitz_estimate(self) -> float:
        """Largest operator norm of the tangential derivative over the nodes."""
        jac = self.jacobian(self.grid.nodes)
        return float(np.max(np.linalg.norm(jac, ord=2, axis=(-2, -1))))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            m = self.grid.nodes.shape[1]
            w.writerow([f"y{i}" for i in range(m)] + [f"u{i}" for i in range(self.value_dim)] + ["weight"])
            for y, v, wt in zip(self.grid.nodes, self.values, self.grid.weights):
                w.writerow([f"{c:.17g}" for c in (*y, *v, wt)])


# -- test corpus -------------------------------------------------------------

CIRCLE_CORPUS = (
    "constant:c=1,0",
    "circle-degree:k=1",
    "circle-degree:k=2",
    "circle-degree:k=3",
    "bubble:k=1:a=0.5,0",
    "bubble:k=1:a=0.9,0",
    "ellipse:k=1",
)
SPHERE_CORPUS = (
    "constant:c=0,0,1",
    "sphere-degree:k=1",
    "bubble:k=1:a=0.5,0,0",
)


def _circle_degree(k: int):
    def evaluator(y):
        th = _angles(np.asarray(y, dtype=float))
        return np.stack([np.cos(k * th), np.sin(k * th)], axis=-1)

    def derivative(y):
        y = np.asarray(y, dtype=float)
        th = _angles(y)
        du = k * np.stack([-np.sin(k * th), np.cos(k * th)], axis=-1)
        e_th = np.stack([-np.sin(th), np.cos(th)], axis=-1)
        r = np.linalg.norm(y, axis=-1)[..., None, None]
        return np.einsum("...i,...j->...ij", du, e_th) / r

    return evaluator, derivative


def _sphere_degree(k: int):
    def evaluator(y):
        th, ph = _angles(np.asarray(y, dtype=float))
        st = np.sin(th)
        return np.stack([st * np.cos(k * ph), st * np.sin(k * ph), np.cos(th)], axis=-1)

    def derivative(y):
        y = np.asarray(y, dtype=float)
        th, ph = _angles(y)
        st, ct = np.sin(th), np.cos(th)
        du_th = np.stack([ct * np.cos(k * ph), ct * np.sin(k * ph), -st], axis=-1)
        du_ph_over_st = k * np.stack([-np.sin(k * ph), np.cos(k * ph), np.zeros_like(ph)], axis=-1)
        e_th = np.stack([ct * np.cos(ph), ct * np.sin(ph), -st], axis=-1)
        e_ph = np.stack([-np.sin(ph), np.cos(ph), np.zeros_like(ph)], axis=-1)
        r = np.linalg.norm(y, axis=-1)[..., None, None]
        jac = np.einsum("...i,...j->...ij", du_th, e_th) + np.einsum("...i,...j->...ij", du_ph_over_st, e_ph)
        return jac / r

    return evaluator, derivative


def _ellipse_degree(k: int, target: EllipseTarget):
    A, B = target.major, target.minor

    def evaluator(y):
        th = _angles(np.asarray(y, dtype=float))
        return np.stack([A * np.cos(k * th), B * np.sin(k * th)], axis=-1)

    def derivative(y):
        y = np.asarray(y, dtype=float)
        th = _angles(y)
        du = k * np.stack([-A * np.sin(k * th), B * np.cos(k * th)], axis=-1)
        e_th = np.stack([-np.sin(th), np.cos(th)], axis=-1)
        r = np.linalg.norm(y, axis=-1)[..., None, None]
        return np.einsum("...i,...j->...ij", du, e_th) / r

    return evaluator, derivative


@dataclass(frozen=True)
class MapDescriptor:
    """Corpus entry: kind in {constant, circle-degree, sphere-degree, bubble, ellipse}."""

    kind: str
    dim: int = 1
    degree: int = 1
    value: tuple = ()
    center: tuple = ()
    params: dict = field(default_factory=dict, compare=False, hash=False)

    @classmethod
    def parse(cls, text: str, dim: int = 1) -> "MapDescriptor":
        """Parse e.g. "circle-degree:k=2", "bubble:k=1:a=0.9,0", "constant:c=1,0"."""
        parts = [p.strip() for p in text.strip().split(":") if p.strip()]
        if not parts:
            raise ValueError("empty map descriptor")
        kind = parts[0]
        kw: dict = {}
        for p in parts[1:]:
            if "=" not in p:
                raise ValueError(f"bad map descriptor field {p!r} (expected key=value)")
            key, val = p.split("=", 1)
            kw[key.strip()] = val.strip()
        degree = int(kw.pop("k", 1))
        value = tuple(float(v) for v in kw.pop("c").split(",")) if "c" in kw else ()
        center = tuple(float(v) for v in kw.pop("a").split(",")) if "a" in kw else ()
        if kw:
            raise ValueError(f"unknown map descriptor keys {sorted(kw)}")
        return cls(kind, dim, degree, value, center)

    def __str__(self):
        out = [self.kind]
        if self.kind != "constant":
            out.append(f"k={self.degree}")
        if self.value:
            out.append("c=" + ",".join(repr(v) for v in self.value))
        if self.center:
            out.append("a=" + ",".join(repr(v) for v in self.center))
        return ":".join(out)


def make_test_map(desc, grid: SphereGrid, target: ManifoldTarget | None = None) -> SphereMap:
    """Build a corpus map on `grid` from a descriptor or descriptor string."""
    if isinstance(desc, str):
        desc = MapDescriptor.parse(desc, grid.dim)
    n = grid.dim
    kind = desc.kind
    if kind == "constant":
        default = np.eye(n + 1)[0]
        c = np.array(desc.value if desc.value else default, dtype=float)
        tgt = target if target is not None else UnitSphereTarget(len(c) - 1)
        return SphereMap(
            grid,
            np.tile(c, (grid.size, 1)),
            tgt,
            lambda y: np.broadcast_to(c, np.asarray(y).shape[:-1] + c.shape).copy(),
            lambda y: np.zeros(np.asarray(y).shape[:-1] + (len(c), n + 1)),
            name=str(desc),
        )
    if kind == "circle-degree":
        if n != 1:
            raise ValueError("circle-degree maps live on S^1")
        ev, dv = _circle_degree(desc.degree)
        return SphereMap(grid, None, target or UnitSphereTarget(1), ev, dv, str(desc))
    if kind == "sphere-degree":
        if n != 2:
            raise ValueError("sphere-degree maps live on S^2")
        ev, dv = _sphere_degree(desc.degree)
        return SphereMap(grid, None, target or UnitSphereTarget(2), ev, dv, str(desc))
    if kind == "ellipse":
        if n != 1:
            raise ValueError("ellipse maps live on S^1")
        tgt = target if isinstance(target, EllipseTarget) else EllipseTarget()
        ev, dv = _ellipse_degree(desc.degree, tgt)
        return SphereMap(grid, None, tgt, ev, dv, str(desc))
    if kind == "bubble":
        base_kind = "circle-degree" if n == 1 else "sphere-degree"
        base = make_test_map(MapDescriptor(base_kind, n, desc.degree), grid, target)
        center = np.zeros(n + 1)
        center[: len(desc.center)] = desc.center
        out = base.compose_mobius(MobiusTransform.translation(center))
        out.name = str(desc)
        return out
    raise ValueError(f"unknown map kind {kind!r}")


# -- seminorms ----------------------------------------------------------------


@dataclass(frozen=True)
class GagliardoEstimate:
    value: float
    grid_resolution: int
    diagonal_cutoff: float
    excluded_mass: float  # fraction of (sum of weights)^2 skipped near the diagonal


def gagliardo_seminorm(u: SphereMap, block: int = 512) -> GagliardoEstimate:
    """Double sum of |u(y)-u(z)|^(n+1)/|y-z|^(2n) over node pairs.

    Pairs at grid distance <= 1 (including y = z) are skipped; the skipped
    weight mass is recorded and a warning is issued above 5%.
    """
    g = u.grid
    n = g.dim
    if n >= 3:
        raise ValueError("seminorm estimation supports n = 1, 2 only")
    if g.size < 16:
        raise ValueError("need at least 16 nodes")
    y, w, v = g.nodes, g.weights, u.values
    total = 0.0
    excluded = 0.0
    cutoff = 0.0
    for start in range(0, g.size, block):
        rows = np.arange(start, min(start + block, g.size))
        d2 = ((y[rows, None, :] - y[None, :, :]) ** 2).sum(-1)
        du = (np.abs(v[rows, None, :] - v[None, :, :]) ** 2).sum(-1)
        near = g.near_diagonal_mask(rows)
        ww = w[rows, None] * w[None, :]
        safe = np.where(near, 1.0, d2)
        term = np.where(near, 0.0, du ** ((n + 1) / 2) / safe**n)
        total += float((ww * term).sum())
        excluded += float((ww * near).sum())
        cutoff = max(cutoff, float(np.sqrt(np.max(np.where(near, d2, 0.0)))))
    frac = excluded / float(w.sum()) ** 2
    if frac > EXCLUDED_MASS_WARN:
        warnings.warn(f"near-diagonal exclusion removes {100 * frac:.1f}% of the pair mass", RuntimeWarning)
    return GagliardoEstimate(total, g.resolution, cutoff, frac)


def w1n_energy(u: SphereMap, norm: str = "operator") -> float:
    """Integral of |Du|^n over S^n; norm is 'operator' or 'frobenius'."""
    if u.derivative is None and u.evaluator is None:
        raise ValueError("W^{1,n} energy needs derivative information")
    jac = u.jacobian(u.grid.nodes)
    if norm == "operator":
        mag = np.linalg.norm(jac, ord=2, axis=(-2, -1))
    elif norm == "frobenius":
        mag = np.linalg.norm(jac, axis=(-2, -1))
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return float(u.grid.integrate(mag**u.dim))


def sphere_mean(u: SphereMap) -> np.ndarray:
    return u.grid.integrate(u.values) / sphere_area(u.dim)
