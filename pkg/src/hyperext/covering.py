"""Packings and coverings of hyperbolic balls, and their colour classes.

Centres form a maximal rho-separated family in B_region(0): the rho/2-balls
are disjoint and the rho-balls cover the region.  Colour classes are sets
of centres at mutual distance > 4 rho, so their 2 rho-balls are disjoint and
improvements inside one class do not interact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

from ._rng import substream
from .hyperbolic import _sqnorm, as_array, hyperbolic_distance, sinh_power_integral

MAX_REGION_RADIUS = 12.0
MAX_CENTERS = 200_000
STOP_AFTER_REJECTIONS = 4096
COVERAGE_SAMPLES = 4096


def volume_ratio(outer: float, inner: float, n: int) -> float:
    """Ratio of hyperbolic ball volumes, I(outer)/I(inner) with I(t) = int_0^t sinh^n."""
    return sinh_power_integral(outer, n) / sinh_power_integral(inner, n)


def multiplicity_bound(sigma: float, rho: float, n: int) -> float:
    """Bound on the number of centres in a sigma-ball: I(sigma + rho/2) / I(rho/2)."""
    return volume_ratio(sigma + rho / 2.0, rho / 2.0, n)


def colour_count_bound(rho: float, n: int) -> float:
    """Bound on the number of colour classes: I(9 rho/2) / I(rho/2)."""
    return volume_ratio(4.5 * rho, 0.5 * rho, n)


def projected_center_count(region_radius: float, rho: float, n: int) -> float:
    return volume_ratio(region_radius + rho / 2.0, rho / 2.0, n)


def _sinh_power_primitive(r, n: int):
    if n == 1:
        # cosh r - 1 written without cancellation
        return 2.0 * np.sinh(np.asarray(r, dtype=float) / 2.0) ** 2
    if n == 2:
        r = np.asarray(r, dtype=float)
        # the closed form cancels catastrophically near 0, so use the series there
        series = r**3 / 3.0 + r**5 / 15.0 + 2.0 * r**7 / 315.0
        return np.where(r < 1e-2, series, 0.5 * (np.sinh(r) * np.cosh(r) - r))
    raise ValueError("n must be 1 or 2")


def radius_quantile(u, radius: float, n: int) -> np.ndarray:
    """Inverse CDF of the hyperbolic distance from 0 for points uniform in B_radius(0)."""
    u = np.asarray(u, dtype=float)
    target = u * _sinh_power_primitive(radius, n)
    if n == 1:
        return 2.0 * np.arcsinh(np.sqrt(target / 2.0))
    # the primitive is convex and at least r^3/3, so both guesses sit right of
    # the root and Newton decreases monotonically onto it
    grid = np.linspace(0.0, radius, 2049)
    upper = grid[np.clip(np.searchsorted(_sinh_power_primitive(grid, n), target), 0, grid.size - 1)]
    r = np.minimum(upper, np.cbrt(3.0 * target))
    for _ in range(60):
        f = _sinh_power_primitive(r, n) - target
        step = np.where(r > 0, f / np.maximum(np.sinh(r) ** n, 1e-300), 0.0)
        r = np.clip(r - step, 0.0, radius)
        if np.all(np.abs(step) <= 1e-15 * np.maximum(r, 1e-300)):
            break
    return r


def _sphere_directions(cube: np.ndarray) -> np.ndarray:
    """Area-preserving map from [0,1)^(dim-1) to the unit sphere in R^dim."""
    if cube.shape[1] == 1:
        t = 2.0 * np.pi * cube[:, 0]
        return np.stack([np.cos(t), np.sin(t)], axis=-1)
    z = 2.0 * cube[:, 0] - 1.0
    t = 2.0 * np.pi * cube[:, 1]
    s = np.sqrt(1.0 - z**2)
    return np.stack([s * np.cos(t), s * np.sin(t), z], axis=-1)


def _from_unit_cube(cube: np.ndarray, radius: float) -> np.ndarray:
    n = cube.shape[1] - 1
    r = radius_quantile(cube[:, 0], radius, n)
    return np.tanh(r / 2.0)[:, None] * _sphere_directions(cube[:, 1:])


def hyperbolic_uniform(rng: np.random.Generator, count: int, dim: int, radius: float) -> np.ndarray:
    """Points distributed by hyperbolic volume in B_radius(0)."""
    return _from_unit_cube(rng.random((count, dim)), radius)


def _sobol_candidates(seed, dim: int, radius: float, count: int) -> np.ndarray:
    """Scrambled Sobol points pushed to the hyperbolic-uniform law on B_radius(0)."""
    sob = qmc.Sobol(d=dim, scramble=True, seed=substream(seed, "covering"))
    return _from_unit_cube(sob.random(count), radius)


@dataclass(frozen=True)
class HyperbolicCovering:
    centers: np.ndarray
    rho: float
    region_radius: float
    color_classes: tuple  # tuple of index arrays
    coverage_additions: int = 0
    candidates_used: int = 0

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def n(self) -> int:
        return self.dim - 1

    @property
    def Q(self) -> int:
        return len(self.color_classes)

    def __len__(self):
        return self.centers.shape[0]

    def pairwise(self) -> np.ndarray:
        c = self.centers
        d = hyperbolic_distance(c[:, None, :], c[None, :, :])
        d[np.diag_indices(len(self))] = np.inf
        return d

    def packing_ok(self) -> bool:
        return len(self) < 2 or bool(self.pairwise().min() >= self.rho * (1.0 - 1e-12))

    def separation_ok(self) -> bool:
        d = self.pairwise()
        for cls in self.color_classes:
            if len(cls) > 1 and d[np.ix_(cls, cls)].min() <= 4.0 * self.rho:
                return False
        return True

    def partition_ok(self) -> bool:
        idx = np.sort(np.concatenate([np.asarray(c) for c in self.color_classes]))
        return bool(np.array_equal(idx, np.arange(len(self))))

    def uncovered(self, points) -> np.ndarray:
        d = hyperbolic_distance(as_array(points)[:, None, :], self.centers[None, :, :])
        return d.min(axis=1) >= self.rho

    def coverage_ok(self, seed=0, samples: int = COVERAGE_SAMPLES) -> bool:
        rng = substream(seed, "coverage-audit")
        pts = hyperbolic_uniform(rng, samples, self.dim, self.region_radius)
        return not bool(self.uncovered(pts).any())

    def multiplicity_violations(self, sigmas=None) -> dict:
        sigmas = (self.rho, 2 * self.rho, 4 * self.rho) if sigmas is None else sigmas
        out = {}
        d = self.pairwise()
        np.fill_diagonal(d, 0.0)
        for s in sigmas:
            counts = (d < s).sum(axis=1)
            out[float(s)] = int(np.sum(counts > multiplicity_bound(s, self.rho, self.n) + 1e-9))
        return out

    def q_bound(self) -> float:
        return colour_count_bound(self.rho, self.n)

    def classes_ordered(self):
        """Colour classes in ascending index, each as an array of centres."""
        return [self.centers[np.asarray(c)] for c in self.color_classes]

    def to_csv(self, path):
        colour = np.empty(len(self), int)
        for q, cls in enumerate(self.color_classes):
            colour[np.asarray(cls)] = q
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.dim)] + ["distance_from_origin", "colour_class"])
            dist0 = hyperbolic_distance(self.centers, np.zeros(self.dim))
            for c, d0, q in zip(self.centers, dist0, colour):
                w.writerow([f"{v:.17g}" for v in c] + [f"{d0:.12g}", int(q)])


def _colour(centers: np.ndarray, rho: float) -> tuple:
    k = centers.shape[0]
    graph = nx.Graph()
    graph.add_nodes_from(range(k))
    if k > 1:
        d = hyperbolic_distance(centers[:, None, :], centers[None, :, :])
        i, j = np.nonzero(np.triu(d <= 4.0 * rho, 1))
        graph.add_edges_from(zip(i.tolist(), j.tolist()))
    order = np.argsort(hyperbolic_distance(centers, np.zeros(centers.shape[1])), kind="stable").tolist()
    colouring = nx.greedy_color(graph, strategy=lambda g, c: iter(order))
    q = max(colouring.values()) + 1 if colouring else 0
    return tuple(np.array(sorted(i for i, col in colouring.items() if col == c), dtype=int) for c in range(q))


def euclidean_image(x, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean centre and radius of the hyperbolic ball B_rho(x), batched over x."""
    x = np.asarray(x, dtype=float)
    t2 = np.tanh(rho / 2.0) ** 2
    x2 = _sqnorm(x)
    den = 1.0 - t2 * x2
    return x * ((1.0 - t2) / den)[..., None], np.sqrt(t2) * (1.0 - x2) / den


class _CenterIndex:
    """Exact 'some centre within rho' queries through a Euclidean k-d tree.

    A hyperbolic ball is a Euclidean ball, so one nearest-neighbour query
    settles each point.  Centres added since the last rebuild are checked by
    brute force.
    """
    REBUILD_EVERY = 64

    def __init__(self, first: np.ndarray, rho: float):
        self.rho = rho
        self._arr = np.empty((1024, first.shape[0]))
        self._arr[0] = first
        self.count = 1
        self._rebuild()

    @property
    def centers(self) -> np.ndarray:
        return self._arr[: self.count]

    def _rebuild(self):
        self._tree = cKDTree(self.centers.copy())
        self._tree_size = self.count

    def add(self, x):
        if self.count == self._arr.shape[0]:
            self._arr = np.concatenate([self._arr, np.empty_like(self._arr)])
        self._arr[self.count] = x
        self.count += 1
        if self.count - self._tree_size > self.REBUILD_EVERY:
            self._rebuild()

    def covered(self, pts) -> np.ndarray:
        """True where some centre lies in the open hyperbolic rho-ball about the point."""
        pts = np.atleast_2d(pts)
        if len(pts) > self.REBUILD_EVERY and self.count > self._tree_size:
            self._rebuild()
        mid, radius = euclidean_image(pts, self.rho)
        dist, _ = self._tree.query(mid, k=1)
        out = dist < radius
        pending = self.centers[self._tree_size :]
        if len(pending):
            gap = np.sqrt(_sqnorm(mid[:, None, :] - pending[None, :, :])).min(axis=1)
            out |= gap < radius
        return out


def build_covering(region_radius: float, rho: float, seed=0, dim: int = 2,
                   max_centers: int = MAX_CENTERS, clean_rounds: int = 8) -> HyperbolicCovering:
    """Greedy maximal rho-separated family in B_region(0), then colour classes.

    Candidates are scrambled Sobol points thinned to the hyperbolic volume;
    the greedy pass stops after 4096 consecutive rejections.  A completion
    pass then samples the region in rounds of 65536 points, promoting any
    uncovered sample to a centre, until `clean_rounds` rounds in a row find
    nothing uncovered.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    n = dim - 1
    projected = projected_center_count(region_radius, rho, n)
    if region_radius >= MAX_REGION_RADIUS or projected > max_centers:
        raise ValueError(
            f"covering of radius {region_radius:.3g} with rho = {rho:.3g} would need up to "
            f"{projected:.3g} centres (limits: radius < {MAX_REGION_RADIUS}, {max_centers} centres)"
        )
    origin = np.zeros(dim)
    if region_radius < rho:
        return HyperbolicCovering(origin[None, :], float(rho), float(region_radius), (np.array([0]),))
    index = _CenterIndex(origin, rho)

    def promote(points, flags):
        # points already covered stay covered; the rest are rechecked in order
        added = 0
        for x, hit in zip(points, flags):
            if hit or index.covered(x[None, :])[0]:
                yield False
            else:
                index.add(x)
                added += 1
                yield True

    rejected = 0
    used = 0
    size = 4096
    while rejected < STOP_AFTER_REJECTIONS and size <= 1 << 24:
        cand = _sobol_candidates(seed, dim, region_radius, size)[used:]
        size *= 2
        for start in range(0, len(cand), 256):
            batch = cand[start : start + 256]
            for took in promote(batch, index.covered(batch)):
                used += 1
                rejected = 0 if took else rejected + 1
                if rejected >= STOP_AFTER_REJECTIONS:
                    break
            if rejected >= STOP_AFTER_REJECTIONS:
                break
    rng = substream(seed, "coverage")
    before = index.count
    clean = 0
    while clean < clean_rounds:
        pts = hyperbolic_uniform(rng, 1 << 16, dim, region_radius)
        flags = index.covered(pts)
        clean = clean + 1 if flags.all() else 0
        gaps = ~flags
        for _ in promote(pts[gaps], flags[gaps]):
            pass
    arr = index.centers.copy()
    classes = _colour(arr, rho)
    return HyperbolicCovering(arr, float(rho), float(region_radius), classes, index.count - before, used)


def count_in_ball(covering: HyperbolicCovering, a, sigma: float) -> int:
    """Number of centres strictly inside B_sigma(a)."""
    return int(np.sum(hyperbolic_distance(covering.centers, as_array(a)) < sigma))


__all__ = [
    "HyperbolicCovering",
    "build_covering",
    "count_in_ball",
    "multiplicity_bound",
    "colour_count_bound",
    "volume_ratio",
    "projected_center_count",
    "hyperbolic_uniform",
    "euclidean_image",
]
