"""Squared-increment statistics, exact max-field decompositions, local
times, and the asymptotic constants of the scaled cross-term limits.

The pair statistic sums H2(U) = U^2 - 1 over Delaunay edges; the triple
statistic sums a whitened quadratic form over Delaunay triangles.  For the
pointwise maximum of two fields both statistics split exactly into the two
single-field parts plus a cross term built from the switching functionals
Psi (pairs) and Omega (triples); the cross terms converge, after scaling,
to multiples of the local time at 0 of the field difference.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from . import _kernels
from .gaussfield import FieldValues, ModelParams
from .geometry import (EdgeSet, TripleSet, sample_typical_cell,
                       typical_edge_mean_power)
from .likelihood import DEGENERACY_TOL, triple_correlations
from .rngs import as_generator

__all__ = [
    "IncrementStat",
    "DecompositionParts",
    "LocalTimeEstimate",
    "AsymptoticConstants",
    "edge_u_values",
    "triple_u_values",
    "v2_stat",
    "v3_stat",
    "psi_f",
    "omega",
    "decompose_v2",
    "decompose_v3",
    "local_time_zero",
    "br_local_time_sum",
    "compute_psi",
    "compute_c_v2",
    "compute_c_v3",
    "epsilon_schedule",
]

SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class IncrementStat:
    kind: str                # "pair" | "triple"
    value: float
    term_count: int
    skipped_degenerate: int = 0


@dataclass
class DecompositionParts:
    part1: float
    part2: float
    cross: float
    term_count: int
    skipped_degenerate: int = 0

    @property
    def total(self):
        return self.part1 + self.part2 + self.cross


@dataclass
class LocalTimeEstimate:
    level: float
    value: float
    epsilon: float
    grid_resolution: int
    node_count: int
    restricted_label: tuple | None = None
    empty_mask: bool = False


@dataclass
class AsymptoticConstants:
    alpha: float
    psi: float
    psi_error: float
    c_v2: float
    c_v2_error: float
    c_v3: float
    c_v3_error: float
    sigma2_v2_hat: float = np.nan
    sigma2_v3_hat: float = np.nan
    extras: dict = field(default_factory=dict)


def epsilon_schedule(intensity, alpha):
    """Kernel bandwidth for local-time estimation at intensity N.

    Proportional to N^(-(2 - alpha)/8); the 1/4 prefactor keeps the kernel
    below the spectral rank gaps when the estimate is restricted to
    top-two cells (wider kernels lose the tail mass that the cell boundary
    cuts off).  Guarded by the refinement stability gate.
    """
    return 0.25 * float(intensity) ** (-(2.0 - alpha) / 8.0)


# ---------------------------------------------------------------------------
# Increment extraction over index sets
# ---------------------------------------------------------------------------


def edge_u_values(values, edges: EdgeSet, params: ModelParams):
    """Normalized increments of a value array over the edge set."""
    values = np.asarray(values, dtype=float)
    i1 = edges.indices[:, 0]
    i2 = edges.indices[:, 1]
    return (values[i2] - values[i1]) / (params.sigma * edges.lengths ** (params.alpha / 2.0))


def triple_u_values(values, triples: TripleSet, params: ModelParams):
    """(U12, U13, R) arrays over the triple set."""
    values = np.asarray(values, dtype=float)
    d12, d13, d23 = triples.side_lengths
    i1, i2, i3 = triples.indices.T
    u12 = (values[i2] - values[i1]) / (params.sigma * d12 ** (params.alpha / 2.0))
    u13 = (values[i3] - values[i1]) / (params.sigma * d13 ** (params.alpha / 2.0))
    r = triple_correlations(d12, d13, d23, params.alpha)[0]
    return u12, u13, r


# ---------------------------------------------------------------------------
# The statistics
# ---------------------------------------------------------------------------


def v2_stat(u) -> IncrementStat:
    """(1 / sqrt(m)) sum (U^2 - 1) over m edges."""
    u = np.asarray(u, dtype=float)
    if u.size == 0:
        raise ValueError("empty increment list")
    value = float(np.sum(u * u - 1.0) / np.sqrt(u.size))
    return IncrementStat(kind="pair", value=value, term_count=u.size)


def quadratic_form_terms(u12, u13, r):
    """Per-triangle whitened quadratic form minus 2."""
    u12 = np.asarray(u12, dtype=float)
    u13 = np.asarray(u13, dtype=float)
    r = np.asarray(r, dtype=float)
    return (u12 * u12 - 2.0 * r * u12 * u13 + u13 * u13) / (1.0 - r * r) - 2.0


def v3_stat(u12, u13, r, skipped_degenerate=0) -> IncrementStat:
    """(1 / sqrt(m)) sum of quadratic forms over m triangles.

    Entries must satisfy |R| < 1; degenerate triangles are filtered (and
    counted) upstream.
    """
    r = np.asarray(r, dtype=float)
    if r.size == 0:
        raise ValueError("empty triple list")
    if np.any(np.abs(r) >= 1.0):
        raise ValueError("|R| >= 1 entry reached v3_stat")
    terms = quadratic_form_terms(u12, u13, r)
    value = float(np.sum(terms) / np.sqrt(r.size))
    return IncrementStat(kind="triple", value=value, term_count=r.size,
                         skipped_degenerate=skipped_degenerate)


# ---------------------------------------------------------------------------
# Switching functionals
# ---------------------------------------------------------------------------


def _h2(u):
    return u * u - 1.0


def psi_f(kind, x, y, w):
    """Switching correction Psi_f(x, y, w) for f = H2 ('h2') or f = I ('id').

    (f(y + w) - f(x)) I[x - y <= w <= 0] + (f(x - w) - f(y)) I[0 <= w <= x - y];
    vanishes whenever w lies outside [min(0, x - y), max(0, x - y)].
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if kind == "h2":
        f = _h2
    elif kind == "id":
        def f(u):
            return u
    else:
        raise ValueError(f"unknown kind {kind!r}; use 'h2' or 'id'")
    lower = (x - y <= w) & (w <= 0.0)
    upper = (0.0 <= w) & (w <= x - y)
    out = np.where(lower, f(y + w) - f(x), 0.0) \
        + np.where(upper, f(x - w) - f(y), 0.0)
    # both indicators fire only at w = 0, x = y, where each bracket is 0
    out = np.where(lower & upper, 0.0, out)
    return out if out.ndim else float(out)


def omega(u1, v1, u2, v2, w1, w2, r):
    """Triple switching correction Omega(u1, v1, u2, v2, w1, w2; R).

    (u1, v1) are the two fields' increments along the first edge and
    (u2, v2) along the second edge; w1, w2 are the anchor-value difference
    normalized by the two edge scales (same sign), R the increment
    correlation.
    """
    r = np.asarray(r, dtype=float)
    if np.any(np.abs(r) >= 1.0):
        raise ValueError("omega requires |R| < 1")
    u1 = np.asarray(u1, dtype=float)
    v1 = np.asarray(v1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    one_m = 1.0 - r * r
    psi_h_1 = psi_f("h2", u1, v1, w1)
    psi_h_2 = psi_f("h2", u2, v2, w2)
    psi_i_1 = psi_f("id", u1, v1, w1)
    psi_i_2 = psi_f("id", u2, v2, w2)
    out = (psi_h_1 + psi_h_2) / one_m
    out = out - 2.0 * r / one_m * psi_i_1 * psi_i_2
    out = out - 2.0 * r / one_m * np.where(
        w1 < 0.0, u1 * psi_i_2 + u2 * psi_i_1, 0.0)
    out = out - 2.0 * r / one_m * np.where(
        w1 > 0.0, v1 * psi_i_2 + v2 * psi_i_1, 0.0)
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# Exact decompositions of the max-field statistics
# ---------------------------------------------------------------------------


def _check_same_layout(fv1: FieldValues, fv2: FieldValues):
    if not np.array_equal(fv1.sites, fv2.sites) or fv1.params != fv2.params:
        raise ValueError("fields must share sites and parameters")


def decompose_v2(fv1: FieldValues, fv2: FieldValues, edges: EdgeSet,
                 params: ModelParams) -> DecompositionParts:
    """Exact split of the pair statistic of max(fv1, fv2).

    part1 + part2 + cross equals v2_stat of the pointwise maximum to
    machine precision, path by path.
    """
    _check_same_layout(fv1, fv2)
    u1 = edge_u_values(fv1.values, edges, params)
    u2 = edge_u_values(fv2.values, edges, params)
    scale = params.sigma * edges.lengths ** (params.alpha / 2.0)
    diff_anchor = fv2.values[edges.indices[:, 0]] - fv1.values[edges.indices[:, 0]]
    if np.any(diff_anchor == 0.0):
        raise ValueError("exact tie W2 - W1 = 0 at an edge anchor (null event)")
    w = diff_anchor / scale
    m = edges.count
    root = np.sqrt(m)
    if _kernels.NUMBA_ENABLED:
        p1, p2, cr = _kernels.v2_decompose_sums(u1, u2, w)
    else:
        p1 = np.sum(_h2(u1)[w < 0])
        p2 = np.sum(_h2(u2)[w > 0])
        cr = np.sum(psi_f("h2", u1, u2, w))
    return DecompositionParts(part1=float(p1 / root), part2=float(p2 / root),
                              cross=float(cr / root), term_count=m)


def triple_arrays_for_decomposition(fv1, fv2, triples: TripleSet,
                                    params: ModelParams,
                                    degeneracy_tol=DEGENERACY_TOL):
    """Per-triangle increments of both fields, anchor w's, R, and the
    non-degenerate mask shared by decompose_v3 and its identity check."""
    d12, d13, d23 = triples.side_lengths
    r = triple_correlations(d12, d13, d23, params.alpha)[0]
    keep = np.abs(r) < 1.0 - degeneracy_tol
    u12_1, u13_1, _ = triple_u_values(fv1.values, triples, params)
    u12_2, u13_2, _ = triple_u_values(fv2.values, triples, params)
    anchor = triples.indices[:, 0]
    diff = fv2.values[anchor] - fv1.values[anchor]
    w1 = diff / (params.sigma * d12 ** (params.alpha / 2.0))
    w2 = diff / (params.sigma * d13 ** (params.alpha / 2.0))
    return u12_1, u13_1, u12_2, u13_2, w1, w2, r, keep


def decompose_v3(fv1: FieldValues, fv2: FieldValues, triples: TripleSet,
                 params: ModelParams) -> DecompositionParts:
    """Exact split of the triple statistic of max(fv1, fv2)."""
    _check_same_layout(fv1, fv2)
    (u12_1, u13_1, u12_2, u13_2, w1, w2, r, keep) = \
        triple_arrays_for_decomposition(fv1, fv2, triples, params)
    skipped = int(np.count_nonzero(~keep))
    u12_1, u13_1 = u12_1[keep], u13_1[keep]
    u12_2, u13_2 = u12_2[keep], u13_2[keep]
    w1, w2, r = w1[keep], w2[keep], r[keep]
    if np.any(w1 == 0.0):
        raise ValueError("exact tie W2 - W1 = 0 at a triangle anchor (null event)")
    m = int(r.size)
    root = np.sqrt(m)
    if _kernels.NUMBA_ENABLED:
        p1, p2, cr = _kernels.v3_decompose_sums(u12_1, u13_1, u12_2, u13_2,
                                                w1, w2, r)
    else:
        neg = w1 < 0.0
        p1 = np.sum(quadratic_form_terms(u12_1, u13_1, r)[neg])
        p2 = np.sum(quadratic_form_terms(u12_2, u13_2, r)[~neg])
        cr = np.sum(omega(u12_1, u12_2, u13_1, u13_2, w1, w2, r))
    return DecompositionParts(part1=float(p1 / root), part2=float(p2 / root),
                              cross=float(cr / root), term_count=m,
                              skipped_degenerate=skipped)


# ---------------------------------------------------------------------------
# Local time at level 0
# ---------------------------------------------------------------------------


def local_time_zero(values, epsilon, node_area, mask=None,
                    grid_resolution=0, level=0.0,
                    restricted_label=None) -> LocalTimeEstimate:
    """Gaussian-kernel occupation-density estimate at the given level.

    Riemann sum of (2 pi eps)^(-1/2) exp(-(v - level)^2 / (2 eps)) over the
    masked grid nodes, times the node area.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    values = np.asarray(values, dtype=float).ravel()
    if mask is not None:
        values = values[np.asarray(mask, dtype=bool).ravel()]
    if values.size == 0:
        return LocalTimeEstimate(level=level, value=0.0, epsilon=epsilon,
                                 grid_resolution=grid_resolution, node_count=0,
                                 restricted_label=restricted_label,
                                 empty_mask=True)
    dev = values - level
    total = float(np.sum(np.exp(-0.5 * dev * dev / epsilon)))
    value = total * node_area / np.sqrt(2.0 * np.pi * epsilon)
    return LocalTimeEstimate(level=level, value=value, epsilon=epsilon,
                             grid_resolution=grid_resolution,
                             node_count=values.size,
                             restricted_label=restricted_label)


def br_local_time_sum(cover, spectral_values, epsilon):
    """Sum over top-two cells of the local time of Z_k - Z_j at 0.

    ``cover`` labels every grid node with its unordered top-two spectral
    indices; ``spectral_values`` is the (n_spectral, n_nodes) matrix of Z
    values on the grid.
    """
    spectral_values = np.asarray(spectral_values, dtype=float)
    labels = cover.cell_label
    node_area = cover.node_area
    total = 0.0
    for lo, hi in cover.distinct_labels():
        mask = (labels[:, 0] == lo) & (labels[:, 1] == hi)
        diff = spectral_values[hi, mask] - spectral_values[lo, mask]
        total += local_time_zero(diff, epsilon, node_area,
                                 grid_resolution=cover.resolution).value
    return total


# ---------------------------------------------------------------------------
# Asymptotic constants
# ---------------------------------------------------------------------------


def _psi_integrand(u):
    # u phi(u) [1/2 - Qbar(u)] - u^2 Qbar(u) Phi(u), division-free form
    phi = np.exp(-0.5 * u * u) / SQRT_2PI
    q = ndtr(-u)
    return u * phi * (0.5 - q) - u * u * q * ndtr(u)


def compute_psi():
    """The edge-expectation constant: integral of the top-two switching
    kernel over the positive half-line (about -0.094)."""
    value, err = integrate.quad(_psi_integrand, 0.0, 40.0, limit=200,
                                epsabs=1e-12, epsrel=1e-12)
    return value, err


def psi_monte_carlo(n_draws, seed):
    """Independent MC estimate of the same constant: half-normal average."""
    rng = as_generator(seed)
    z = np.abs(rng.standard_normal(int(n_draws)))
    phi = np.exp(-0.5 * z * z) / SQRT_2PI
    # psi = (1/2) E[ |Z| B(|Z|) ] under the half-normal law
    vals = 0.5 * (z * (0.5 - ndtr(-z)) - z * z * ndtr(-z) * ndtr(z) / phi)
    est = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / np.sqrt(len(vals)))
    return est, se


def psi_h2_w_integral(x, y):
    """Closed-form int over w of Psi_H2(x, y, w): the switching mass G(x, y).

    For x >= y: (x^3 - y^3)/3 - y^2 (x - y); symmetric in (x, y).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    hi = np.maximum(x, y)
    lo = np.minimum(x, y)
    return (hi ** 3 - lo ** 3) / 3.0 - lo ** 2 * (hi - lo)


def _mean_g_gaussian():
    """E[G(X, Y)] for iid standard normals.

    In rotated coordinates s = (x - y)/sqrt2, t = (x + y)/sqrt2 the
    switching mass is sqrt2 s^2 (3t - s)/3 on {s > 0} (mirror for s < 0),
    so the expectation reduces to a one-dimensional moment integral.
    """
    val, err = integrate.quad(
        lambda s: -2.0 * np.sqrt(2.0) / 3.0 * s ** 3
        * np.exp(-0.5 * s * s) / SQRT_2PI, 0.0, 40.0, epsabs=1e-14)
    return val, err


def compute_c_v2(alpha, edge_moment=None):
    """c_V2 = E[D^(alpha/2)] * E[G(X, Y)] (separable reduction).

    D is the typical Delaunay edge length, (X, Y) iid standard normal, and
    G the closed-form w-integral of Psi_H2.  Negative for every alpha.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    mean_g, err_g = _mean_g_gaussian()
    if edge_moment is None:
        edge_moment = typical_edge_mean_power(alpha / 2.0)
    value = edge_moment * mean_g
    return value, abs(edge_moment) * err_g + abs(mean_g) * 1e-6


def omega_z_integral(u1, v1, u2, v2, c1, c3, r, n_nodes=8):
    """int over z of Omega(u1, v1, u2, v2, z/c1, z/c3; R), vectorized.

    Piecewise Gauss-Legendre between the support breakpoints of the two
    switching ramps; the integrand is piecewise quadratic, so the rule is
    exact.
    """
    u1, v1, u2, v2, c1, c3, r = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (u1, v1, u2, v2, c1, c3, r)))
    b1 = c1 * (u1 - v1)
    b2 = c3 * (u2 - v2)
    pts = np.stack([np.zeros_like(b1), b1, b2], axis=-1)
    pts.sort(axis=-1)
    xg, wg = np.polynomial.legendre.leggauss(n_nodes)
    total = np.zeros_like(b1)
    for seg in range(2):
        lo = pts[..., seg]
        hi = pts[..., seg + 1]
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        z = mid[..., None] + half[..., None] * xg
        vals = omega(u1[..., None], v1[..., None], u2[..., None], v2[..., None],
                     z / c1[..., None], z / c3[..., None], r[..., None])
        total += half * np.sum(wg * vals, axis=-1)
    return total


def compute_c_v3(alpha, n_samples=200_000, seed=20240801):
    """c_V3 by Monte Carlo over typical Delaunay cells.

    For each cell, the two incident edges at the anchor vertex fix the
    increment correlation R; the two fields' increment pairs are drawn from
    N(0, [[1, R], [R, 1]]) and the inner z-integral of Omega is evaluated
    exactly.  Returns (value, standard_error, rejected_fraction).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    rng = as_generator(seed)
    cell = sample_typical_cell(rng, size=int(n_samples))
    # incident edges at vertex 1: |P1P2| = D3, |P1P3| = D2; opposite = D1
    d1 = cell.edge_lengths[:, 2]
    d3 = cell.edge_lengths[:, 1]
    d2 = cell.edge_lengths[:, 0]
    r = triple_correlations(d1, d3, d2, alpha)[0]
    keep = np.abs(r) < 1.0 - DEGENERACY_TOL
    rejected = 1.0 - keep.mean()
    d1, d2, d3, r = d1[keep], d2[keep], d3[keep], r[keep]
    m = r.size
    root = np.sqrt(1.0 - r * r)
    z1 = rng.standard_normal((2, m))
    z2 = rng.standard_normal((2, m))
    # field 1 pair (A1, B1) and field 2 pair (A2, B2), each with corr R
    a1, b1 = z1[0], r * z1[0] + root * z1[1]
    a2, b2 = z2[0], r * z2[0] + root * z2[1]
    c1 = d1 ** (alpha / 2.0)
    c3 = d3 ** (alpha / 2.0)
    vals = omega_z_integral(a1, a2, b1, b2, c1, c3, r)
    value = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / np.sqrt(m))
    return value, se, float(rejected)


def compute_constants(alpha, n_samples_c3=200_000, seed=20240801,
                      sigma2_v2_hat=np.nan, sigma2_v3_hat=np.nan):
    psi, psi_err = compute_psi()
    c2, c2_err = compute_c_v2(alpha)
    c3, c3_se, rej = compute_c_v3(alpha, n_samples=n_samples_c3, seed=seed)
    return AsymptoticConstants(
        alpha=alpha, psi=psi, psi_error=psi_err,
        c_v2=c2, c_v2_error=c2_err, c_v3=c3, c_v3_error=c3_se,
        sigma2_v2_hat=sigma2_v2_hat, sigma2_v3_hat=sigma2_v3_hat,
        extras={"c_v3_rejected_fraction": rej})
