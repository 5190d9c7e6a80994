"""Planted-geometry event generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import EUCLIDEAN, HYPERBOLIC, SPHERICAL, distance
from .graphstore import TemporalKG
from .temporal import simulate_bin_events


@dataclass(frozen=True)
class PlantedConfig:
    n_entities: int = 50
    geometries: tuple = (HYPERBOLIC, EUCLIDEAN)
    n_bins: int = 30
    dim: int = 2
    radius: tuple = (4.0, 3.0)  # per relation sampling radius for random layouts (ignored on the sphere)
    alpha: tuple = (2.5, 1.5)
    tau: tuple = (3.0, 3.0)
    bin_width: float = 1.0
    seed: int = 0
    shared_positions: bool = False
    layouts: tuple | None = ("tiling", "tiling")  # per relation: "random" or "tiling"; None means all random

    def __post_init__(self):
        R = len(self.geometries)
        for name in ("radius", "alpha", "tau"):
            if len(getattr(self, name)) != R:
                raise DomainError(f"{name} needs one entry per relation")
        for g in self.geometries:
            if g not in (EUCLIDEAN, HYPERBOLIC, SPHERICAL):
                raise DomainError(f"unknown geometry {g!r}")
        if self.n_entities < 0 or self.n_bins < 1 or not self.bin_width > 0:
            raise DomainError("invalid planted sizes")
        if self.layouts is not None:
            if len(self.layouts) != R:
                raise DomainError("layouts needs one entry per relation")
            for g, lay in zip(self.geometries, self.layouts):
                if lay not in ("random", "tiling"):
                    raise DomainError(f"unknown layout {lay!r}")
                if lay == "tiling" and g == SPHERICAL:
                    raise DomainError("no tiling layout for the sphere")

    def layout(self, r):
        return "random" if self.layouts is None else self.layouts[r]


def triangular_lattice(n):
    """The n lattice points of the unit triangular lattice closest to the origin (hop order)."""
    k = int(math.ceil(math.sqrt(n))) + 2
    a, b = np.meshgrid(np.arange(-k, k + 1), np.arange(-k, k + 1), indexing="ij")
    a, b = a.ravel(), b.ravel()
    hops = np.maximum.reduce([np.abs(a), np.abs(b), np.abs(a + b)])
    pts = np.column_stack([a + 0.5 * b, (math.sqrt(3) / 2) * b])
    order = np.lexsort((np.arctan2(pts[:, 1], pts[:, 0]), hops))
    return pts[order][:n]


def _to_origin(z, v):
    return (z - v) / (1 - np.conj(v) * z)


def _from_origin(z, v):
    return (z + v) / (1 + np.conj(v) * z)


def hyperbolic_triangulation(n, q=7):
    """The n vertices nearest the centre of the regular {3, q} triangulation of
    the Poincare disc (q >= 7), as (n, 2) coordinates, and its edge length."""
    if q < 7:
        raise DomainError("{3, q} is hyperbolic only for q >= 7")
    A = 2 * math.pi / q
    edge = math.acosh(math.cos(A) / (1 - math.cos(A)))
    r0 = math.tanh(edge / 2)
    verts = [0j] + [r0 * np.exp(1j * A * k) for k in range(q)]
    i = 1
    # grow ring by ring: the neighbours of v are a known neighbour rotated about v
    while len(verts) < 3 * n + q and i < len(verts):
        v = verts[i]
        arr = np.array(verts)
        dist = 2 * np.arctanh(np.abs(_to_origin(arr, v)))
        w = arr[np.flatnonzero(np.abs(dist - edge) < 1e-6)[0]]
        wz = _to_origin(w, v)
        for k in range(q):
            c = _from_origin(wz * np.exp(1j * A * k), v)
            if np.min(np.abs(np.array(verts) - c)) > 1e-9:
                verts.append(c)
        i += 1
    z = np.array(verts)
    radius = np.round(2 * np.arctanh(np.abs(z)), 6)
    order = np.lexsort((np.round(np.angle(z), 9), radius))
    z = z[order][:n]
    return np.column_stack([z.real, z.imag]), edge


def sample_planted_positions(geometry, n, dim, radius, rng):
    """Uniform-by-volume samples: a hyperbolic disc of the given geodesic radius
    (Poincare coordinates), a Euclidean disc, or the whole sphere."""
    if geometry == SPHERICAL:
        z = rng.standard_normal((n, dim + 1))
        return z / np.linalg.norm(z, axis=1, keepdims=True)
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    U = rng.uniform(size=n)
    if geometry == EUCLIDEAN:
        r = radius * U ** (1.0 / dim)
        return direction * r[:, None]
    if dim != 2:
        raise DomainError("hyperbolic planted sampling is implemented for dim = 2")
    rho = np.arccosh(1.0 + U * (math.cosh(radius) - 1.0))
    return direction * np.tanh(rho / 2.0)[:, None]


def generate_planted(cfg: PlantedConfig):
    """Events with score alpha_r - tau_r * d_r(z_h, z_t)^2 for every ordered pair h != t.

    Returns (kg, truth) where truth holds the planted geometry, positions and
    coefficients of every relation.
    """
    rng = np.random.default_rng(cfg.seed)
    n, R, U = cfg.n_entities, len(cfg.geometries), cfg.n_bins
    widths = {u: cfg.bin_width for u in range(U)}
    truth = dict(geometries=list(cfg.geometries), alpha=list(cfg.alpha), tau=list(cfg.tau), positions=[])
    if n == 0:
        return TemporalKG(0, R, np.zeros((0, 4), dtype=np.int64), widths), truth
    h, t = np.nonzero(~np.eye(n, dtype=bool))
    quads = []
    shared = None
    for r, geom in enumerate(cfg.geometries):
        if cfg.shared_positions and shared is not None and shared[0] == geom:
            Z = shared[1]
        elif cfg.layout(r) == "tiling":
            if cfg.dim != 2:
                raise DomainError("tiling layouts are two-dimensional")
            Z = triangular_lattice(n) if geom == EUCLIDEAN else hyperbolic_triangulation(n)[0]
            Z = Z[rng.permutation(n)]
            shared = (geom, Z)
        else:
            Z = sample_planted_positions(geom, n, cfg.dim, cfg.radius[r], rng)
            shared = (geom, Z)
        truth["positions"].append(Z.tolist())
        f = cfg.alpha[r] - cfg.tau[r] * distance(geom, Z[h], Z[t]) ** 2
        F = np.repeat(f[:, None], U, axis=1)
        Y = simulate_bin_events(F, np.full(U, cfg.bin_width), seed=rng.integers(2**63))
        ii, uu = np.nonzero(Y)
        quads.append(np.column_stack([h[ii], np.full(len(ii), r), t[ii], uu]))
    q = np.vstack(quads) if quads else np.zeros((0, 4), dtype=np.int64)
    return TemporalKG(n, R, q, widths), truth
