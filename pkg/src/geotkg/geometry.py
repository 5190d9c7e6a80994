"""Distances, squared-distance gradients and relation transports on the three
constant-curvature spaces (Euclidean, Poincare ball, unit sphere).

The array functions (`distance`, `distance_grad`, `sq_distance_grad`,
`mobius_add`, `Transport.__call__`) broadcast over leading axes with
coordinates on the last axis; they never raise on singular inputs and are
what the trainer uses.  The `Point`-level wrappers validate their inputs and
refuse singular configurations.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.stats import ortho_group, special_ortho_group

from .config import DomainBounds
from .errors import DomainError, SingularityError

EUCLIDEAN = "euclidean"
HYPERBOLIC = "hyperbolic"
SPHERICAL = "spherical"
KINDS = (EUCLIDEAN, HYPERBOLIC, SPHERICAL)

CLAMP_SHRINK = 1e-7
COINCIDENCE_TOL = 1e-7
UNIT_TOL = 1e-9


class ClampWarning(UserWarning):
    """A point was radially clamped back into its admissible ball."""


@dataclass(frozen=True)
class ManifoldKind:
    tag: str
    dim: int

    def __post_init__(self):
        if self.tag not in KINDS:
            raise DomainError(f"unknown manifold tag {self.tag!r}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise DomainError(f"dim must be a positive integer, got {self.dim}")

    @property
    def ambient_dim(self) -> int:
        return self.dim + 1 if self.tag == SPHERICAL else self.dim


@dataclass(frozen=True, eq=False)
class Point:
    kind: ManifoldKind
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.shape != (self.kind.ambient_dim,):
            raise DomainError(f"{self.kind.tag} point needs {self.kind.ambient_dim} coordinates, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise DomainError("non-finite coordinates")
        object.__setattr__(self, "coords", c)

    def validate(self, bounds: DomainBounds | None = None, antipodes=()) -> None:
        """Check the bounded-domain invariants; raises DomainError."""
        r = float(np.linalg.norm(self.coords))
        tag = self.kind.tag
        if tag == HYPERBOLIC and r >= 1.0:
            raise DomainError(f"hyperbolic point outside the open unit ball (norm {r})")
        if tag == SPHERICAL and abs(r - 1.0) > UNIT_TOL:
            raise DomainError(f"spherical point off the unit sphere (norm {r})")
        if bounds is None:
            return
        if tag == EUCLIDEAN and r > bounds.R_E:
            raise DomainError(f"euclidean point norm {r} exceeds R_E={bounds.R_E}")
        if tag == HYPERBOLIC and r > bounds.R_H:
            raise DomainError(f"hyperbolic point norm {r} exceeds R_H={bounds.R_H}")
        if tag == SPHERICAL:
            for a in antipodes:
                if distance(SPHERICAL, self.coords, -np.asarray(a, dtype=float)) < bounds.delta_S:
                    raise DomainError("spherical point within delta_S of a designated antipode")


def _check_same_kind(x: Point, y: Point) -> str:
    if x.kind != y.kind:
        raise DomainError(f"mismatched manifold kinds {x.kind} vs {y.kind}")
    if x.kind.tag == HYPERBOLIC:
        for p in (x, y):
            if np.dot(p.coords, p.coords) >= 1.0:
                raise DomainError("hyperbolic point on or outside the unit sphere")
    return x.kind.tag


# ---------------------------------------------------------------------------
# array-level math


def _sqnorm(x):
    return np.einsum("...i,...i->...", x, x)


def arcosh1p(z):
    """arcosh(1 + z) for z >= 0, accurate for small z."""
    z = np.maximum(z, 0.0)
    return np.log1p(z + np.sqrt(z * (z + 2.0)))


def _unit(x):
    return x / np.sqrt(_sqnorm(x))[..., None]


def mobius_add(a, x):
    """Mobius addition a (+) x on the Poincare ball (curvature -1)."""
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    ax = np.einsum("...i,...i->...", a, x)[..., None]
    a2 = _sqnorm(a)[..., None]
    x2 = _sqnorm(x)[..., None]
    num = (1.0 + 2.0 * ax + x2) * a + (1.0 - a2) * x
    den = 1.0 + 2.0 * ax + a2 * x2
    return num / den


def mobius_add_jacobian_a(a, x):
    """d(a (+) x)/da for single vectors; shape (d, d)."""
    ax = a @ x
    a2 = a @ a
    x2 = x @ x
    c = 1.0 + 2.0 * ax + x2
    num = c * a + (1.0 - a2) * x
    den = 1.0 + 2.0 * ax + a2 * x2
    dnum = c * np.eye(len(a)) + 2.0 * np.outer(a, x) - 2.0 * np.outer(x, a)
    dden = 2.0 * x + 2.0 * x2 * a
    return dnum / den - np.outer(num, dden) / den**2


def distance(tag: str, x, y):
    """Geodesic distance; broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if tag == EUCLIDEAN:
        return np.sqrt(_sqnorm(x - y))
    if tag == HYPERBOLIC:
        u = _sqnorm(x - y)
        ab = (1.0 - _sqnorm(x)) * (1.0 - _sqnorm(y))
        return arcosh1p(2.0 * u / ab)
    if tag == SPHERICAL:
        # equals arccos(<x,y>) for unit vectors, without its cancellation near 0 and pi
        xu, yu = _unit(x), _unit(y)
        return 2.0 * np.arctan2(np.sqrt(_sqnorm(xu - yu)), np.sqrt(_sqnorm(xu + yu)))
    raise DomainError(f"unknown manifold tag {tag!r}")


def _sinc_ratio(d):
    # d / sin(d), continuous at 0
    return 1.0 / np.sinc(d / np.pi)


def sq_distance_grad(tag: str, x, y):
    """Gradient of d(x, y)^2 with respect to x.

    Spherical gradients are tangent at x (the distance is a function of
    x/|x|), so they agree with the projected formula on the sphere.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if tag == EUCLIDEAN:
        return 2.0 * (x - y)
    if tag == HYPERBOLIC:
        a = (1.0 - _sqnorm(x))[..., None]
        b = (1.0 - _sqnorm(y))[..., None]
        u = _sqnorm(x - y)[..., None]
        ab = a * b
        eps = 2.0 * u / ab  # z - 1
        root = np.sqrt(eps * (eps + 2.0))  # sqrt(z^2 - 1)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(eps > 1e-14, arcosh1p(eps) / np.where(root > 0, root, 1.0), 1.0 - eps / 3.0)
        dz = (4.0 * ab * (x - y) + 4.0 * u * b * x) / ab**2
        return 2.0 * ratio * dz
    if tag == SPHERICAL:
        nx = np.sqrt(_sqnorm(x))[..., None]
        xu, yu = x / nx, _unit(y)
        d = distance(SPHERICAL, xu, yu)[..., None]
        c = np.einsum("...i,...i->...", xu, yu)[..., None]
        tangent = yu - c * xu
        return -2.0 * _sinc_ratio(d) * tangent / nx
    raise DomainError(f"unknown manifold tag {tag!r}")


def distance_grad(tag: str, x, y):
    """(d(x, y), grad_x d(x, y)); the gradient is set to zero at coincidence."""
    d = distance(tag, x, y)
    g = sq_distance_grad(tag, x, y)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(d > 0, 0.5 / np.where(d > 0, d, 1.0), 0.0)
    return d, g * scale[..., None]


def hyperbolic_diameter(R_H: float) -> float:
    """Largest distance between two points of the closed Poincare ball of radius R_H."""
    if not 0.0 < R_H < 1.0:
        raise DomainError(f"R_H must lie in (0, 1), got {R_H}")
    return float(arcosh1p(8.0 * R_H**2 / (1.0 - R_H**2) ** 2))


def diameter(tag: str, bounds: DomainBounds) -> float:
    if tag == EUCLIDEAN:
        return 2.0 * bounds.R_E
    if tag == HYPERBOLIC:
        return hyperbolic_diameter(bounds.R_H)
    return math.pi


def clamp_norm(X, radius):
    """Radially clamp rows of X into the closed ball of `radius`; returns (X', mask)."""
    X = np.asarray(X, dtype=float)
    r = np.linalg.norm(X, axis=-1, keepdims=True)
    over = r > radius
    scale = np.where(over, radius / np.where(over, r, 1.0), 1.0)
    return X * scale, over[..., 0]


def project(tag: str, X, bounds: DomainBounds):
    """Retraction onto the admissible set; returns (X', clamped_mask)."""
    if tag == EUCLIDEAN:
        return clamp_norm(X, bounds.R_E)
    if tag == HYPERBOLIC:
        return clamp_norm(X, bounds.R_H * (1.0 - CLAMP_SHRINK))
    X = np.asarray(X, dtype=float)
    return _unit(X), np.zeros(X.shape[:-1], dtype=bool)


def sample_points(tag: str, n: int, dim: int, rng, radius: float | None = None, bounds: DomainBounds | None = None):
    """Uniform samples: in the ball (E, H) of `radius`, or on the sphere."""
    bounds = bounds or DomainBounds()
    if tag == SPHERICAL:
        return _unit(rng.standard_normal((n, dim + 1)))
    if radius is None:
        radius = bounds.R_E if tag == EUCLIDEAN else bounds.R_H
    direction = _unit(rng.standard_normal((n, dim)))
    return direction * (radius * rng.random((n, 1)) ** (1.0 / dim))


# ---------------------------------------------------------------------------
# transports


def _great_circle(plane, angle):
    p, q = plane
    k = len(p)
    return (
        np.eye(k)
        + math.sin(angle) * (np.outer(q, p) - np.outer(p, q))
        + (math.cos(angle) - 1.0) * (np.outer(p, p) + np.outer(q, q))
    )


def _polar(R):
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


@dataclass(frozen=True, eq=False)
class Transport:
    """Relation isometry x -> U(T(x)).

    T is a translation (Euclidean, `translation` = v), a Mobius
    gyrotranslation (hyperbolic, `translation` = a) or a great-circle
    rotation (spherical, `plane` = two orthonormal ambient vectors, `angle`).
    """

    kind: ManifoldKind
    rotation: np.ndarray
    translation: np.ndarray | None = None
    plane: np.ndarray | None = None
    angle: float = 0.0
    _matrix: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        k = self.kind.ambient_dim
        R = np.asarray(self.rotation, dtype=float)
        if R.shape != (k, k):
            raise DomainError(f"rotation must be {k}x{k}")
        object.__setattr__(self, "rotation", R)
        if self.kind.tag == SPHERICAL:
            if self.translation is not None:
                raise DomainError("spherical transports use plane/angle, not a translation vector")
            if self.plane is not None:
                P = np.asarray(self.plane, dtype=float)
                if P.shape != (2, k):
                    raise DomainError(f"plane must have shape (2, {k})")
                object.__setattr__(self, "plane", P)
                M = R @ _great_circle(P, self.angle)
            else:
                M = R
            object.__setattr__(self, "_matrix", M)
        else:
            t = np.zeros(k) if self.translation is None else np.asarray(self.translation, dtype=float)
            if t.shape != (k,):
                raise DomainError(f"translation must have length {k}")
            if self.kind.tag == HYPERBOLIC and t @ t >= 1.0:
                raise DomainError("gyrotranslation vector must lie in the open unit ball")
            object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, kind: ManifoldKind) -> "Transport":
        return cls(kind, np.eye(kind.ambient_dim))

    @property
    def matrix(self) -> np.ndarray:
        """Full ambient rotation (spherical only)."""
        if self.kind.tag != SPHERICAL:
            raise DomainError("matrix is only defined for spherical transports")
        return self._matrix

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        tag = self.kind.tag
        if tag == EUCLIDEAN:
            return (X + self.translation) @ self.rotation.T
        if tag == HYPERBOLIC:
            return mobius_add(self.translation, X) @ self.rotation.T
        return _unit(X @ self._matrix.T)

    def inverse(self) -> "Transport":
        tag = self.kind.tag
        if tag == SPHERICAL:
            return Transport(self.kind, self._matrix.T)
        return Transport(self.kind, self.rotation.T, -self.rotation @ self.translation)

    def operator_norm(self) -> float:
        """sup of |phi(x)| over the unit ball (Euclidean 1+|v|; isometries of bounded models: 1)."""
        if self.kind.tag == EUCLIDEAN:
            return 1.0 + float(np.linalg.norm(self.translation))
        return 1.0

    def validate(self, bounds: DomainBounds | None = None, tol: float = 1e-10) -> None:
        R = self._matrix if self.kind.tag == SPHERICAL else self.rotation
        if np.max(np.abs(R.T @ R - np.eye(len(R)))) > tol:
            raise DomainError("rotation is not orthogonal")
        if self.kind.tag == SPHERICAL and np.linalg.det(R) < 0:
            raise DomainError("spherical rotation must be special orthogonal")
        if bounds is None:
            return
        if self.kind.tag == HYPERBOLIC and np.linalg.norm(self.translation) > bounds.R_H:
            raise DomainError("gyrotranslation exceeds R_H")
        if self.operator_norm() > bounds.B_phi:
            raise DomainError("transport operator norm exceeds B_phi")


def compose(t1: Transport, t2: Transport) -> Transport:
    """Canonical form of t1 o t2."""
    if t1.kind != t2.kind:
        raise DomainError("cannot compose transports of different kinds")
    kind = t1.kind
    if kind.tag == SPHERICAL:
        return Transport(kind, _polar(t1.matrix @ t2.matrix))
    if kind.tag == EUCLIDEAN:
        return Transport(kind, t1.rotation @ t2.rotation, t2.translation + t2.rotation.T @ t1.translation)
    # every ball isometry g has the form x -> R(a (+) x) with g(0) = R a, and
    # x -> (-g(0)) (+) g(x) is the orthogonal map R
    g = lambda X: t1(t2(X))  # noqa: E731
    c = g(np.zeros(kind.dim))
    s = 0.5
    cols = mobius_add(-c, g(s * np.eye(kind.dim))) / s
    R = _polar(cols.T)
    return Transport(kind, R, R.T @ c)


def conjugate(U: Transport, phi: Transport) -> Transport:
    """Gauge action U o phi o U^-1."""
    return compose(compose(U, phi), U.inverse())


def _small_rotation(k, rng, scale):
    A = rng.standard_normal((k, k)) * scale
    return expm(A - A.T)


def random_isometry(kind: ManifoldKind, seed=None, bounds: DomainBounds | None = None, scale: float | None = None) -> Transport:
    """Random admissible isometry.

    With `scale=None` the rotation is Haar-distributed and the translation is
    uniform in its admissible ball; a finite `scale` draws a perturbation of
    the identity of roughly that size (used to initialise relation transports).
    """
    bounds = bounds or DomainBounds()
    rng = np.random.default_rng(seed)
    k = kind.ambient_dim
    if scale is None:
        if kind.tag == SPHERICAL:
            R = special_ortho_group.rvs(k, random_state=rng) if k > 1 else np.eye(1)
        else:
            R = ortho_group.rvs(k, random_state=rng) if k > 1 else rng.choice([-1.0, 1.0]).reshape(1, 1)
    else:
        R = _small_rotation(k, rng, scale)
    R = np.atleast_2d(R)
    if kind.tag == SPHERICAL:
        Q, _ = np.linalg.qr(rng.standard_normal((k, 2)))
        angle = rng.uniform(-math.pi, math.pi) if scale is None else scale * rng.standard_normal()
        return Transport(kind, R, plane=Q.T, angle=float(angle))
    if kind.tag == EUCLIDEAN:
        radius = min(bounds.R_E, bounds.B_phi - 1.0)
    else:
        radius = bounds.R_H
    if scale is not None:
        radius = min(radius, scale)
    v = sample_points(EUCLIDEAN, 1, k, rng, radius=radius)[0]
    return Transport(kind, R, v)


# ---------------------------------------------------------------------------
# Point-level API


def geodesic_distance(x: Point, y: Point) -> float:
    tag = _check_same_kind(x, y)
    return float(distance(tag, x.coords, y.coords))


def grad_sq_distance(x: Point, y: Point, bounds: DomainBounds | None = None) -> np.ndarray:
    """Gradient of d(x, y)^2 in x; refuses configurations inside the singularity guard bands."""
    tag = _check_same_kind(x, y)
    bounds = bounds or DomainBounds()
    if tag == HYPERBOLIC and np.linalg.norm(x.coords - y.coords) < COINCIDENCE_TOL:
        raise SingularityError("hyperbolic points coincide within 1e-7")
    if tag == SPHERICAL and distance(tag, x.coords, y.coords) > math.pi - bounds.delta_S:
        raise SingularityError("spherical points within delta_S of antipodal")
    return sq_distance_grad(tag, x.coords, y.coords)


def apply_transport(t: Transport, x: Point, bounds: DomainBounds | None = None) -> Point:
    """Apply a transport to a point.

    Hyperbolic images leaving the R_H ball (when `bounds` is given) or
    numerically reaching the unit sphere are clamped radially and a
    ClampWarning is emitted.
    """
    if t.kind != x.kind:
        raise DomainError("transport and point kinds differ")
    y = t(x.coords)
    if t.kind.tag == HYPERBOLIC:
        radius = bounds.R_H * (1.0 - CLAMP_SHRINK) if bounds is not None else 1.0 - 1e-15
        y, over = clamp_norm(y, radius)
        if over:
            warnings.warn(f"hyperbolic transport image clamped to radius {radius}", ClampWarning, stacklevel=2)
    return Point(x.kind, y)
