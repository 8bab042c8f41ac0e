"""Poincare ball geometry: distance, measure, dual norm and the Mobius group.

Points of the ball are plain numpy arrays whose last axis holds the
Euclidean coordinates; every function broadcasts over leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, linalg, special

# points closer than this to the unit sphere are rejected by constructors
BOUNDARY_GUARD = 1e-12
ORTHOGONALITY_TOL = 1e-12


def sphere_area(n: int) -> float:
    """Area of the unit sphere S^n sitting in R^(n+1)."""
    return float(2.0 * np.pi ** ((n + 1) / 2) / special.gamma((n + 1) / 2))


def _sqnorm(x):
    return np.einsum("...i,...i->...", x, x)


def check_inside(x, guard: float = BOUNDARY_GUARD) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    r = np.sqrt(_sqnorm(x))
    if np.any(~np.isfinite(r)) or np.any(r > 1.0 - guard):
        raise ValueError(
            f"point outside the open ball (max |x| = {np.max(r):.15g}, "
            f"limit 1 - {guard:g})"
        )
    return x


@dataclass(frozen=True)
class BallPoint:
    """A point of the open unit ball B^{n+1}."""

    x: np.ndarray

    def __post_init__(self):
        arr = np.array(self.x, dtype=float).reshape(-1)
        check_inside(arr)
        object.__setattr__(self, "x", arr)

    @property
    def dim(self) -> int:
        return self.x.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.x if dtype is None else self.x.astype(dtype)


def as_array(x) -> np.ndarray:
    if isinstance(x, BallPoint):
        return x.x
    return np.asarray(x, dtype=float)


def hyperbolic_distance(x, y) -> np.ndarray:
    """Distance of the metric 4|dx|^2/(1-|x|^2)^2.

    Evaluated as 2 asinh(sqrt(s)) with s = |x-y|^2/((1-|x|^2)(1-|y|^2)),
    which equals acosh(1 + 2s) but keeps full precision for nearby points.
    """
    x, y = as_array(x), as_array(y)
    s = _sqnorm(x - y) / ((1.0 - _sqnorm(x)) * (1.0 - _sqnorm(y)))
    return 2.0 * np.arcsinh(np.sqrt(s))


def euclidean_radius(rho):
    """Euclidean radius of the hyperbolic ball of radius rho centred at 0."""
    return np.tanh(np.asarray(rho, dtype=float) / 2.0)


def hyperbolic_radius(r):
    return 2.0 * np.arctanh(np.asarray(r, dtype=float))


def hyperbolic_measure_density(x) -> np.ndarray:
    x = as_array(x)
    m = x.shape[-1]
    return (2.0 / (1.0 - _sqnorm(x))) ** m


def dual_norm_factor(x) -> np.ndarray:
    """Factor turning a Euclidean covector norm into the hyperbolic one."""
    return (1.0 - _sqnorm(as_array(x))) / 2.0


@lru_cache(maxsize=4096)
def _sinh_power_integral(t: float, n: int) -> float:
    if t <= 0.0:
        return 0.0
    if t < 1e-3:
        # sinh r ~ r (1 + r^2/6), integrate the series to avoid underflow of quad tolerances
        return t ** (n + 1) / (n + 1) * (1.0 + n * (n + 1) * t**2 / (6.0 * (n + 3)))
    val, _ = integrate.quad(lambda r: np.sinh(r) ** n, 0.0, t, epsabs=0.0, epsrel=1e-13, limit=200)
    return float(val)


def sinh_power_integral(t: float, n: int) -> float:
    """Integral of sinh(r)^n over (0, t)."""
    return _sinh_power_integral(float(t), int(n))


def hyperbolic_ball_volume(radius: float, n: int) -> float:
    """Hyperbolic volume of a ball of the given radius in H^{n+1}."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    return sphere_area(n) * sinh_power_integral(radius, n)


# -- Mobius group -----------------------------------------------------------


def _translate(a, x):
    """T_a(x) = ((1-|a|^2)(x-a) - |x-a|^2 a) / (1 + |x|^2|a|^2 - 2<x,a>).

    Accepts points on the closed ball, which the sphere maps need.
    """
    a2 = _sqnorm(a)[..., None]
    x2 = _sqnorm(x)[..., None]
    diff = x - a
    num = (1.0 - a2) * diff - _sqnorm(diff)[..., None] * a
    den = 1.0 + x2 * a2 - 2.0 * np.einsum("...i,...i->...", x, a)[..., None]
    return num / den


def _translate_jacobian(a, x):
    """Standard-layout Jacobian d T_a(x)/dx with shape (..., m, m)."""
    a2 = _sqnorm(a)
    x2 = _sqnorm(x)
    diff = x - a
    m = x.shape[-1]
    num = (1.0 - a2) * diff - _sqnorm(diff)[..., None] * a
    den = 1.0 + x2 * a2 - 2.0 * np.einsum("...i,...i->...", x, a)
    dnum = (1.0 - a2) * np.eye(m) - 2.0 * np.einsum("...i,...j->...ij", np.broadcast_to(a, diff.shape), diff)
    dden = 2.0 * a2 * x - 2.0 * a
    jac = dnum / den[..., None, None] - np.einsum("...i,...j->...ij", num, dden) / (den**2)[..., None, None]
    return jac


class MobiusTransform:
    """Element x -> R T_a(x) of the Mobius group of the ball."""

    def __init__(self, rotation=None, center=None, dim: int | None = None):
        if center is None:
            if dim is None:
                dim = np.asarray(rotation).shape[0]
            center = np.zeros(dim)
        center = np.array(as_array(center), dtype=float).reshape(-1)
        check_inside(center)
        m = center.shape[0]
        rotation = np.eye(m) if rotation is None else np.array(rotation, dtype=float)
        if rotation.shape != (m, m):
            raise ValueError(f"rotation must be {m}x{m}")
        if np.max(np.abs(rotation.T @ rotation - np.eye(m))) > ORTHOGONALITY_TOL:
            raise ValueError("rotation is not orthogonal")
        self.rotation = rotation
        self.center = center
        self.rotation.setflags(write=False)
        self.center.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "MobiusTransform":
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def translation(cls, center) -> "MobiusTransform":
        return cls(None, center)

    def __call__(self, x):
        return self.apply_unchecked(check_inside(as_array(x)))

    def apply_unchecked(self, x):
        """Action on points of the closed ball (used for sphere maps)."""
        y = _translate(self.center, np.asarray(x, dtype=float))
        return y @ self.rotation.T

    def jacobian(self, x):
        """Standard-layout Jacobian (..., m, m) at points of the closed ball."""
        jac = _translate_jacobian(self.center, np.asarray(x, dtype=float))
        return np.einsum("ij,...jk->...ik", self.rotation, jac)

    def conformal_factor(self, x):
        """|DT(x)|, equal to (1-|T(x)|^2)/(1-|x|^2) inside the ball."""
        x = np.asarray(as_array(x), dtype=float)
        a2 = _sqnorm(self.center)
        den = 1.0 + _sqnorm(x) * a2 - 2.0 * np.einsum("...i,i->...", x, self.center)
        return (1.0 - a2) / den

    def inverse(self) -> "MobiusTransform":
        # R T_a(x) = y  <=>  x = T_{-a}(R^T y) = R^T T_{-Ra}(y)
        return MobiusTransform(self.rotation.T.copy(), -(self.rotation @ self.center))

    def compose(self, other: "MobiusTransform") -> "MobiusTransform":
        """The transform x -> self(other(x)), refit in (R, a) form."""
        return compose(self, other)

    def __matmul__(self, other: "MobiusTransform") -> "MobiusTransform":
        return compose(self, other)

    def __repr__(self):
        return f"MobiusTransform(center={self.center.tolist()}, rotation={self.rotation.tolist()})"


def mobius_apply(T: MobiusTransform, x):
    return T(x)


def mobius_inverse(T: MobiusTransform) -> MobiusTransform:
    return T.inverse()


def mobius_conformal_factor(T: MobiusTransform, x):
    return T.conformal_factor(check_inside(as_array(x)))


def compose(outer: MobiusTransform, inner: MobiusTransform) -> MobiusTransform:
    m = outer.dim
    # the composite sends its centre to 0
    center = inner.inverse().apply_unchecked(outer.inverse().apply_unchecked(np.zeros(m)))
    frame = 0.5 * np.eye(m)
    pre = _translate(-center, frame)  # T_center^{-1}(frame)
    image = outer.apply_unchecked(inner.apply_unchecked(pre))
    # image = frame @ R^T; orthogonal Procrustes recovers R
    rot_t, _ = linalg.orthogonal_procrustes(frame, image)
    rotation = rot_t.T
    # project back onto O(m) exactly to pass the orthogonality check
    u, _, vt = np.linalg.svd(rotation)
    return MobiusTransform(u @ vt, center)


def random_mobius(rng: np.random.Generator, dim: int, max_center: float = 0.9) -> MobiusTransform:
    """Random rotation (Haar) and a centre with |a| uniform in [0, max_center)."""
    from scipy.stats import special_ortho_group

    rot = special_ortho_group.rvs(dim, random_state=rng) if dim > 1 else np.eye(1)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    center = direction * max_center * rng.random()
    return MobiusTransform(rot, center)


@dataclass(frozen=True)
class HyperbolicBall:
    """Hyperbolic ball B^H_radius(center)."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.array(as_array(self.center), dtype=float).reshape(-1)
        check_inside(c)
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def frame_radius(self) -> float:
        """Euclidean radius of the ball once its centre is moved to 0."""
        return float(np.tanh(self.radius / 2.0))

    @property
    def to_origin(self) -> MobiusTransform:
        return MobiusTransform.translation(self.center)

    @property
    def from_origin(self) -> MobiusTransform:
        return MobiusTransform.translation(-self.center)

    def frame_coordinates(self, x):
        return _translate(self.center, np.asarray(x, dtype=float))

    def contains(self, x):
        """Strict membership, via the distance to the centre."""
        return hyperbolic_distance(as_array(x), self.center) < self.radius

    def contains_frame(self, x):
        """Strict membership, via the translated Euclidean picture."""
        y = self.frame_coordinates(x)
        return np.sqrt(_sqnorm(y)) < self.frame_radius

    def euclidean_sphere(self) -> tuple[np.ndarray, float]:
        """Euclidean centre and radius of the boundary sphere."""
        m = self.dim
        a = self.center
        na = np.linalg.norm(a)
        axis = a / na if na > 0 else np.eye(m)[0]
        ends = _translate(-a, np.stack([self.frame_radius * axis, -self.frame_radius * axis]))
        return 0.5 * (ends[0] + ends[1]), 0.5 * float(np.linalg.norm(ends[0] - ends[1]))
