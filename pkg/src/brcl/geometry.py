"""Poisson site generation, Delaunay structure, and typical-cell samplers.

The observation square is C = (-1/2, 1/2]^2.  Poisson sites are simulated
on C enlarged by a guard band so that the Delaunay edges and triangles
anchored in C match the whole-plane triangulation up to a negligible
boundary event; edges and triangles are indexed by their lexicographically
smallest vertex.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _delaunay_core as core
from .rngs import as_generator, seed_record

__all__ = [
    "DegenerateInputError",
    "Point2",
    "Window",
    "PoissonSample",
    "Triangulation",
    "EdgeSet",
    "TripleSet",
    "TypicalCellSample",
    "TypicalEdgePair",
    "sample_poisson",
    "delaunay",
    "extract_edges",
    "extract_triples",
    "sample_typical_cell",
    "typical_edge_cdf",
    "typical_edge_mean_power",
    "sample_typical_edge_pair",
    "guard_margin_for",
    "MAX_INSCRIBED_AREA",
]

# Largest area of a triangle inscribed in the unit circle (equilateral);
# the rejection envelope for typical-cell directions.
MAX_INSCRIBED_AREA = 3.0 * np.sqrt(3.0) / 4.0


class DegenerateInputError(ValueError):
    """Fewer than 3 points, duplicate points, or all points collinear."""


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class Window:
    """Observation square C = (-half_side, half_side]^2 plus a guard band."""

    half_side: float = 0.5
    guard_margin: float = 0.0

    def __post_init__(self):
        if self.half_side <= 0:
            raise ValueError("half_side must be positive")
        if self.guard_margin < 0:
            raise ValueError("guard_margin must be nonnegative")

    @property
    def outer_half_side(self):
        return self.half_side + self.guard_margin

    @property
    def outer_area(self):
        return (2.0 * self.outer_half_side) ** 2

    def contains(self, points):
        """Membership in the half-open square C (vectorized)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        h = self.half_side
        return ((points[:, 0] > -h) & (points[:, 0] <= h)
                & (points[:, 1] > -h) & (points[:, 1] <= h))


def guard_margin_for(intensity):
    """Default guard band: max(0.1, 3 / sqrt(N)).

    A Delaunay neighbor of a point in C farther than the band requires an
    empty disk of comparable radius, whose probability decays like
    exp(-pi N m^2) <= exp(-9 pi); boundary bias is negligible at desk scale.
    """
    return max(0.1, 3.0 / np.sqrt(intensity))


@dataclass
class PoissonSample:
    intensity: float
    window: Window
    points: np.ndarray
    seed: dict = field(default_factory=dict)

    @property
    def count(self):
        return self.points.shape[0]

    def to_csv(self, path):
        np.savetxt(path, self.points, delimiter=",", header="x,y", comments="")
        return path


def sample_poisson(intensity, window: Window, seed) -> PoissonSample:
    """Homogeneous Poisson process on the guarded window."""
    if not (intensity > 0 and np.isfinite(intensity)):
        raise ValueError(f"intensity must be positive, got {intensity}")
    rng = as_generator(seed)
    mean = intensity * window.outer_area
    count = int(rng.poisson(mean))
    h = window.outer_half_side
    pts = rng.uniform(-h, h, size=(count, 2))
    # exact duplicates are a null event; redraw offenders to keep the
    # all-distinct invariant unconditional
    while count > 1:
        _, first = np.unique(pts, axis=0, return_index=True)
        if first.size == count:
            break
        dup = np.setdiff1d(np.arange(count), first)
        pts[dup] = rng.uniform(-h, h, size=(dup.size, 2))
    return PoissonSample(intensity=float(intensity), window=window, points=pts,
                         seed=seed_record(seed))


def _lex_sort(points):
    order = np.lexsort((points[:, 1], points[:, 0]))
    return points[order], order


@dataclass
class Triangulation:
    """Delaunay triangulation; vertices are stored lexicographically sorted.

    Every triangle's open circumdisk contains no vertex (up to the
    documented symbolic perturbation of exact co-circular ties).
    """

    vertices: np.ndarray
    triangles: np.ndarray  # (m, 3) vertex indices, each row ascending
    hull_size: int

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @property
    def edges(self):
        """Unique undirected edges, rows (i, j) with i < j, lexsorted."""
        tri = self.triangles
        e = np.concatenate([tri[:, [0, 1]], tri[:, [0, 2]], tri[:, [1, 2]]])
        e = np.unique(e, axis=0)
        return e

    def adjacency(self):
        adj = {}
        for i, j in self.edges:
            adj.setdefault(int(i), set()).add(int(j))
            adj.setdefault(int(j), set()).add(int(i))
        return {k: np.array(sorted(v)) for k, v in adj.items()}

    def export_csv(self, sites_path, edges_path, triangles_path):
        np.savetxt(sites_path, self.vertices, delimiter=",", header="x,y",
                   comments="")
        np.savetxt(edges_path, self.edges, fmt="%d", delimiter=",",
                   header="i,j", comments="")
        np.savetxt(triangles_path, self.triangles, fmt="%d", delimiter=",",
                   header="i,j,k", comments="")


def delaunay(points) -> Triangulation:
    """Delaunay triangulation of distinct, not-all-collinear points.

    Deterministic for a given point set: input order is removed by an
    internal canonical (lexicographic) sort, and exact co-circular ties are
    broken by symbolic perturbation in sorted-index order.
    """
    pts = np.ascontiguousarray(np.asarray(points, dtype=float))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an (n, 2) array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    if pts.shape[0] < 3:
        raise DegenerateInputError("need at least 3 points")
    spts, _ = _lex_sort(pts)
    if np.any((np.diff(spts[:, 0]) == 0.0) & (np.diff(spts[:, 1]) == 0.0)):
        raise DegenerateInputError("duplicate points in input")

    tri_v, tri_n, n_slots, status = core.build_kernel(spts)
    if status == core.STATUS_COLLINEAR:
        raise DegenerateInputError("all points are collinear")
    ghost = spts.shape[0]
    v = tri_v[:n_slots]
    alive = v[:, 0] != -2
    is_ghost = v[:, 2] == ghost
    real = np.sort(v[alive & ~is_ghost], axis=1)
    real = real[np.lexsort((real[:, 2], real[:, 1], real[:, 0]))]
    hull_size = int(np.count_nonzero(alive & is_ghost))
    return Triangulation(vertices=spts, triangles=real, hull_size=hull_size)


@dataclass
class EdgeSet:
    """Delaunay pairs (x1, x2), x1 lexicographically smaller and inside C."""

    indices: np.ndarray  # (m, 2) into vertices
    vertices: np.ndarray

    @property
    def count(self):
        return self.indices.shape[0]

    @property
    def x1(self):
        return self.vertices[self.indices[:, 0]]

    @property
    def x2(self):
        return self.vertices[self.indices[:, 1]]

    @property
    def lengths(self):
        d = self.x2 - self.x1
        return np.hypot(d[:, 0], d[:, 1])

    def pairs(self):
        return [(Point2(*self.x1[i]), Point2(*self.x2[i]))
                for i in range(self.count)]


@dataclass
class TripleSet:
    """Delaunay triangles (x1, x2, x3), x1 <= x2 <= x3 with x1 inside C."""

    indices: np.ndarray  # (m, 3) into vertices
    vertices: np.ndarray

    @property
    def count(self):
        return self.indices.shape[0]

    def coords(self, k):
        return self.vertices[self.indices[:, k]]

    @property
    def side_lengths(self):
        """(d12, d13, d23) arrays."""
        x1, x2, x3 = self.coords(0), self.coords(1), self.coords(2)
        d12 = np.hypot(*(x2 - x1).T)
        d13 = np.hypot(*(x3 - x1).T)
        d23 = np.hypot(*(x3 - x2).T)
        return d12, d13, d23


def extract_edges(tri: Triangulation, window: Window) -> EdgeSet:
    """Edges whose lexicographically smaller endpoint lies in C.

    Vertices are stored lex-sorted, so index order is lexicographic order.
    """
    edges = tri.edges
    keep = window.contains(tri.vertices[edges[:, 0]])
    return EdgeSet(indices=edges[keep], vertices=tri.vertices)


def extract_triples(tri: Triangulation, window: Window) -> TripleSet:
    """Triangles whose lexicographically smallest vertex lies in C."""
    t = tri.triangles
    keep = window.contains(tri.vertices[t[:, 0]])
    return TripleSet(indices=t[keep], vertices=tri.vertices)


# ---------------------------------------------------------------------------
# Typical cell and typical edge of the unit-intensity Poisson-Delaunay model
# ---------------------------------------------------------------------------


@dataclass
class TypicalCellSample:
    """Vectorized draws of the typical Delaunay cell.

    circumradius has density 2 pi^2 r^3 exp(-pi r^2); directions have
    density a(triangle(u1,u2,u3)) / (12 pi^2) on the torus; edge lengths
    satisfy D_i = R ||U_j - U_k|| for complementary (i, j, k).
    """

    radius: np.ndarray          # (n,)
    angles: np.ndarray          # (n, 3) direction angles
    edge_lengths: np.ndarray    # (n, 3): D_1 = R|U2-U3|, D_2 = R|U1-U3|, D_3 = R|U1-U2|
    acceptance_ratio: float

    @property
    def directions(self):
        return np.stack([np.cos(self.angles), np.sin(self.angles)], axis=-1)


def _inscribed_area(t1, t2, t3):
    """Area of the triangle with vertices at angles t_i on the unit circle."""
    u1 = np.stack([np.cos(t1), np.sin(t1)], axis=-1)
    u2 = np.stack([np.cos(t2), np.sin(t2)], axis=-1)
    u3 = np.stack([np.cos(t3), np.sin(t3)], axis=-1)
    v = u2 - u1
    w = u3 - u1
    return 0.5 * np.abs(v[..., 0] * w[..., 1] - v[..., 1] * w[..., 0])


def sample_typical_cell(seed, size=1) -> TypicalCellSample:
    """Exact sampler: R by inverse Gamma(2) transform, directions by
    rejection from the uniform torus with envelope constant 3 sqrt(3)/4."""
    rng = as_generator(seed)
    size = int(size)
    # pi R^2 ~ Gamma(2, 1)
    radius = np.sqrt(rng.gamma(2.0, 1.0, size=size) / np.pi)
    angles = np.empty((size, 3))
    need = np.arange(size)
    proposed = 0
    accepted = 0
    while need.size:
        cand = rng.uniform(0.0, 2.0 * np.pi, size=(need.size, 3))
        area = _inscribed_area(cand[:, 0], cand[:, 1], cand[:, 2])
        acc = rng.uniform(0.0, MAX_INSCRIBED_AREA, size=need.size) < area
        proposed += need.size
        accepted += int(acc.sum())
        angles[need[acc]] = cand[acc]
        need = need[~acc]
    u = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    d1 = radius * np.hypot(*(u[:, 1] - u[:, 2]).T)
    d2 = radius * np.hypot(*(u[:, 0] - u[:, 2]).T)
    d3 = radius * np.hypot(*(u[:, 0] - u[:, 1]).T)
    return TypicalCellSample(radius=radius, angles=angles,
                             edge_lengths=np.column_stack([d1, d2, d3]),
                             acceptance_ratio=accepted / max(proposed, 1))


class TypicalEdgePair(NamedTuple):
    """Lengths of two typical edges sharing a vertex and the angle between
    the corresponding directions; all fields are arrays."""

    d1: np.ndarray
    d2: np.ndarray
    theta: np.ndarray


def sample_typical_edge_pair(seed, size=1) -> TypicalEdgePair:
    """(D1, D2, Theta) = (R|U3-U2|, R|U2-U1|, arcsin(cos(zeta/2))).

    zeta is the angle from U1 to U2 taken in (0, 2 pi], which puts Theta in
    [-pi/2, pi/2).
    """
    cell = sample_typical_cell(seed, size=size)
    u = cell.directions
    d1 = cell.radius * np.hypot(*(u[:, 2] - u[:, 1]).T)
    d2 = cell.radius * np.hypot(*(u[:, 1] - u[:, 0]).T)
    zeta = np.mod(cell.angles[:, 1] - cell.angles[:, 0], 2.0 * np.pi)
    zeta[zeta == 0.0] = 2.0 * np.pi
    theta = np.arcsin(np.cos(zeta / 2.0))
    theta[theta == np.pi / 2] = -np.pi / 2  # zeta -> 0+ boundary convention
    return TypicalEdgePair(d1=d1, d2=d2, theta=theta)


# -- typical edge length distribution ---------------------------------------

_EDGE_TABLE = {}


def _edge_tables(n_theta=8192, n_delta=4096):
    """Cumulative angular weight for the typical-edge CDF integrand.

    A(delta) = int a(triangle(u(t), u(t+delta), e1)) dt on a delta grid;
    returns (delta grid, cumulative trapezoid of A, total integral of A).
    """
    key = (n_theta, n_delta)
    if key not in _EDGE_TABLE:
        t = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
        delta = np.linspace(0.0, 2.0 * np.pi, n_delta + 1)
        a_vals = np.empty(n_delta + 1)
        zero = np.zeros_like(t)
        for lo in range(0, n_delta + 1, 256):
            hi = min(lo + 256, n_delta + 1)
            block = delta[lo:hi, None]
            a_vals[lo:hi] = _inscribed_area(t[None, :], t[None, :] + block,
                                            zero[None, :]).mean(axis=1) * 2 * np.pi
        cum = np.concatenate([[0.0], np.cumsum(
            0.5 * (a_vals[1:] + a_vals[:-1]) * np.diff(delta))])
        _EDGE_TABLE[key] = (delta, cum, cum[-1])
    return _EDGE_TABLE[key]


def _angular_mass(s):
    """B(s) = integral of A over {delta : chord 2 sin(delta/2) <= s}."""
    delta, cum, total = _edge_tables()
    s = np.clip(np.asarray(s, dtype=float), 0.0, 2.0)
    dstar = 2.0 * np.arcsin(s / 2.0)
    # symmetric contribution from delta and 2 pi - delta
    return 2.0 * np.interp(dstar, delta, cum)


_GL64 = np.polynomial.legendre.leggauss(64)


def typical_edge_cdf(length):
    """P[D <= length] for the length of the typical Delaunay edge,
    by numerical integration of the cell-average representation.

    Negative lengths return 0.  Vectorized; absolute accuracy ~1e-6.
    """
    length = np.asarray(length, dtype=float)
    scalar = length.ndim == 0
    ell = np.atleast_1d(length).astype(float)
    out = np.zeros_like(ell)
    pos = ell > 0
    if np.any(pos):
        lp = ell[pos]
        _, _, total = _edge_tables()
        # r-integral in t = pi r^2: CDF = (1/(6 pi)) int t e^-t B(l sqrt(pi/t)) dt
        tstar = np.pi * lp ** 2 / 4.0  # below tstar the chord cap is inactive
        tmax = 60.0
        full = (1.0 - (1.0 + np.minimum(tstar, tmax)) * np.exp(-np.minimum(tstar, tmax)))
        acc = full * total  # B(2) = total angular mass for t < tstar
        xg, wg = _GL64
        lo = np.minimum(tstar, tmax)
        half = 0.5 * (tmax - lo)
        mid = 0.5 * (tmax + lo)
        tg = mid[:, None] + half[:, None] * xg[None, :]
        bg = _angular_mass(lp[:, None] * np.sqrt(np.pi / tg))
        acc += half * np.sum(wg[None, :] * tg * np.exp(-tg) * bg, axis=1)
        out[pos] = acc / (6.0 * np.pi)
    np.clip(out, 0.0, 1.0, out=out)
    return float(out[0]) if scalar else out.reshape(length.shape)


def typical_edge_mean_power(power, n_grid=4001, lmax=8.0):
    """E[D^power] for the typical edge length.

    Uses the tail formula in the transformed variable m = l^power,
    E[D^p] = int_0^inf P[D^p > m] dm, whose integrand is bounded at 0.
    """
    m = np.linspace(0.0, lmax ** power, n_grid)
    tail = 1.0 - typical_edge_cdf(m ** (1.0 / power))
    return float(np.trapezoid(tail, m))
