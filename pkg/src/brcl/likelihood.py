"""Closed-form Hüsler-Reiss machinery for pairs and triples of sites.

Exponent functions, their partial derivatives in the observation values and
in the model parameters, log-densities, and the exact finite-distance
distributions of normalized log-increments.  Everything here is a pure
function of (geometry, observations, parameters).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtr

from .gaussfield import ModelParams

__all__ = [
    "DegenerateGeometryError",
    "NumericalDegeneracyError",
    "PairGeometry",
    "TripleGeometry",
    "ExponentEval",
    "std_normal",
    "bvn_cdf",
    "pair_exponent",
    "pair_log_density",
    "triple_exponent",
    "triple_log_density",
    "marginal_u_cdf",
    "pair_u_cdf",
    "conditional_u_cdf",
    "pair_loglik_terms",
    "triple_loglik_terms",
    "triple_correlations",
    "DEGENERACY_TOL",
]

SQRT_2PI = np.sqrt(2.0 * np.pi)

# Triples with min(1 - |R_i|) below this are rejected by the likelihood
# layer and skipped (with a counter) by the estimation layer.
DEGENERACY_TOL = 1e-8


class DegenerateGeometryError(ValueError):
    """Triangle too close to collinear for a stable trivariate evaluation."""


class NumericalDegeneracyError(ArithmeticError):
    """A density factor that must be positive evaluated to <= 0."""


def _phi(x):
    return np.exp(-0.5 * x * x) / SQRT_2PI


def std_normal(x):
    """Standard normal (pdf, cdf, survival) at ``x``.

    The survival function is defined as ``1 - cdf`` computed from the
    smaller of the two tails, so ``cdf + sf == 1`` holds exactly.
    """
    x = np.asarray(x, dtype=float)
    pdf = _phi(x)
    lower = ndtr(-np.abs(x))
    upper = 1.0 - lower
    cdf = np.where(x >= 0, upper, lower)
    sf = np.where(x >= 0, lower, upper)
    if x.ndim == 0:
        return float(pdf), float(cdf), float(sf)
    return pdf, cdf, sf


# ---------------------------------------------------------------------------
# Bivariate normal CDF (Drezner-Wesolowsky / Genz), vectorized.
# ---------------------------------------------------------------------------

# Gauss-Legendre half-rules used by the Genz algorithm.
_GL_X6 = np.array([0.9324695142031521, 0.6612093864662645, 0.2386191860831969])
_GL_W6 = np.array([0.1713244923791704, 0.3607615730481386, 0.4679139345726910])
_GL_X12 = np.array([0.9815606342467192, 0.9041172563704749, 0.7699026741943047,
                    0.5873179542866175, 0.3678314989981802, 0.1252334085114689])
_GL_W12 = np.array([0.04717533638651183, 0.10693932599531843, 0.16007832854334622,
                    0.20316742672306592, 0.23349253653835481, 0.24914704581340277])
_GL_X20 = np.array([0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                    0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                    0.5108670019508271, 0.3737060887154195, 0.2277858511416451,
                    0.07652652113349734])
_GL_W20 = np.array([0.017614007139152118, 0.040601429800386941, 0.062672048334109064,
                    0.083276741576704749, 0.101930119817240435, 0.118194531961518417,
                    0.131688638449176627, 0.142096109318382051, 0.149172986472603747,
                    0.152753387130725851])


def _ndtr_c(x):
    # scipy.special.ndtr accepts complex input; keep real arrays real.
    return ndtr(x)


def _bvnu_band(h, k, r, nodes, weights):
    """P[X > h, Y > k] for |r| < 0.925 (Drezner-Wesolowsky form)."""
    hk = h * k
    hs = 0.5 * (h * h + k * k)
    asr = np.arcsin(r)
    acc = np.zeros_like(h)
    for xg, wg in zip(nodes, weights):
        for sgn in (-1.0, 1.0):
            sn = np.sin(0.5 * asr * (1.0 + sgn * xg))
            acc = acc + wg * np.exp((sn * hk - hs) / (1.0 - sn * sn))
    return acc * asr / (4.0 * np.pi) + _ndtr_c(-h) * _ndtr_c(-k)


def _bvnu_high(h, k, r, nodes, weights):
    """P[X > h, Y > k] for 0.925 <= |r| < 1 (Genz reformulation)."""
    twopi = 2.0 * np.pi
    neg = np.real(r) < 0
    k = np.where(neg, -k, k)
    hk = h * k
    ass = (1.0 - r) * (1.0 + r)
    a = np.sqrt(ass)
    bs = (h - k) ** 2
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 16.0
    asr = -(bs / ass + hk) / 2.0
    bvn = np.where(
        np.real(asr) > -100.0,
        a * np.exp(asr) * (1.0 - c * (bs - ass) * (1.0 - d * bs / 5.0) / 3.0
                           + c * d * ass * ass / 5.0),
        0.0,
    )
    b = np.sqrt(bs)
    sp = SQRT_2PI * _ndtr_c(-b / a)
    bvn = bvn - np.where(
        np.real(hk) > -100.0,
        np.exp(-hk / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0),
        0.0,
    )
    a = a / 2.0
    for xg, wg in zip(nodes, weights):
        for sgn in (-1.0, 1.0):
            xs = (a * (1.0 + sgn * xg)) ** 2
            rs = np.sqrt(1.0 - xs)
            asr = -(bs / xs + hk) / 2.0
            sp = 1.0 + c * xs * (1.0 + d * xs)
            ep = np.exp(-hk * xs / (2.0 * (1.0 + rs) ** 2)) / rs
            bvn = bvn + np.where(np.real(asr) > -100.0,
                                 a * wg * np.exp(asr) * (ep - sp), 0.0)
    bvn = -bvn / twopi
    take_h = np.real(h) >= np.real(k)
    hi = np.where(take_h, h, k)
    lo = np.where(take_h, k, h)
    pos_piece = _ndtr_c(-hi)
    # Phi(hi) - Phi(lo), evaluated through the smaller tails.
    band = np.where(np.real(lo) >= 0,
                    _ndtr_c(-lo) - _ndtr_c(-hi),
                    _ndtr_c(hi) - _ndtr_c(lo))
    neg_piece = np.where(take_h, -bvn, band - bvn)
    return np.where(neg, neg_piece, bvn + pos_piece)


def _bvnu(h, k, r):
    """Genz's bvnu: P[X > h, Y > k] for standard normals with corr ``r``."""
    h, k, r = np.broadcast_arrays(np.asarray(h), np.asarray(k), np.asarray(r))
    shape = h.shape
    dt = complex if any(np.iscomplexobj(a) for a in (h, k, r)) else float
    h = h.astype(dt).ravel()
    k = k.astype(dt).ravel()
    r = r.astype(dt).ravel()
    out = np.empty(h.shape, dtype=dt)
    ar = np.abs(np.real(r))
    lo_band = ar < 0.925
    for mask, band in ((lo_band & (ar < 0.3), (_GL_X6, _GL_W6)),
                       (lo_band & (ar >= 0.3) & (ar < 0.75), (_GL_X12, _GL_W12)),
                       (lo_band & (ar >= 0.75), (_GL_X20, _GL_W20))):
        if np.any(mask):
            out[mask] = _bvnu_band(h[mask], k[mask], r[mask], *band)
    hi_band = (ar >= 0.925) & (ar < 1.0)
    if np.any(hi_band):
        out[hi_band] = _bvnu_high(h[hi_band], k[hi_band], r[hi_band],
                                  _GL_X20, _GL_W20)
    unit = ar >= 1.0
    if np.any(unit):
        pos = np.real(r[unit]) > 0
        hi = np.maximum(np.real(h[unit]), np.real(k[unit]))
        comon = _ndtr_c(-hi)  # r = +1: X = Y
        opp = np.maximum(0.0, _ndtr_c(-h[unit].real) - _ndtr_c(k[unit].real))
        out[unit] = np.where(pos, comon, opp)
    if dt is float:
        np.clip(out, 0.0, 1.0, out=out)
    return out.reshape(shape)


def bvn_cdf(h, k, rho):
    """P[X <= h, Y <= k] for standard bivariate normal with correlation rho.

    Absolute accuracy ~1e-15 away from |rho| = 1; at |rho| = 1 the exact
    degenerate limit is returned.  Accepts scalars or broadcastable arrays.
    """
    out = _bvnu(-np.asarray(h), -np.asarray(k), rho)
    if out.ndim == 0:
        return complex(out) if np.iscomplexobj(out) else float(out)
    return out


# ---------------------------------------------------------------------------
# Geometry containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairGeometry:
    """Distance data for a pair of sites."""

    d: float

    def __post_init__(self):
        if not (self.d > 0 and np.isfinite(self.d)):
            raise ValueError(f"pair distance must be positive, got {self.d}")

    @classmethod
    def from_sites(cls, x1, x2):
        return cls(d=float(np.hypot(x2[0] - x1[0], x2[1] - x1[1])))

    def a(self, params: ModelParams) -> float:
        return params.sigma * self.d ** (params.alpha / 2.0)


def triple_correlations(d12, d13, d23, alpha):
    """(R1, R2, R3) of the trivariate Hüsler-Reiss model.

    R_i is the correlation of the two normalized increments anchored at
    site i; it depends on the distances only through their alpha-powers.
    """
    p12, p13, p23 = d12 ** alpha, d13 ** alpha, d23 ** alpha
    r1 = (p12 + p13 - p23) / (2.0 * np.sqrt(p12 * p13))
    r2 = (p12 + p23 - p13) / (2.0 * np.sqrt(p12 * p23))
    r3 = (p13 + p23 - p12) / (2.0 * np.sqrt(p13 * p23))
    return r1, r2, r3


@dataclass(frozen=True)
class TripleGeometry:
    """Distance data for a triangle of sites (d12, d13, d23)."""

    d12: float
    d13: float
    d23: float

    def __post_init__(self):
        ds = (self.d12, self.d13, self.d23)
        if not all(d > 0 and np.isfinite(d) for d in ds):
            raise ValueError(f"triangle sides must be positive, got {ds}")
        s = sorted(ds)
        if s[2] > s[0] + s[1]:
            raise ValueError(f"triangle inequality violated: {ds}")

    @classmethod
    def from_sites(cls, x1, x2, x3):
        return cls(
            d12=float(np.hypot(x2[0] - x1[0], x2[1] - x1[1])),
            d13=float(np.hypot(x3[0] - x1[0], x3[1] - x1[1])),
            d23=float(np.hypot(x3[0] - x2[0], x3[1] - x2[1])),
        )

    def correlations(self, alpha):
        return triple_correlations(self.d12, self.d13, self.d23, alpha)

    def check_degeneracy(self, alpha, tol=DEGENERACY_TOL):
        rs = self.correlations(alpha)
        worst = max(abs(r) for r in rs)
        if worst >= 1.0 - tol:
            raise DegenerateGeometryError(
                f"near-degenerate triangle {self}: max |R| = {worst:.12f}")
        return rs


@dataclass
class ExponentEval:
    """Value and closed-form partial derivatives of an exponent function."""

    value: float
    grad_z: tuple
    v12: float = np.nan
    v13: float = np.nan
    v23: float = np.nan
    v123: float = np.nan
    grad_sigma: float = np.nan
    grad_alpha: float = np.nan
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Pairwise exponent and density
# ---------------------------------------------------------------------------


def _pair_core(z1, z2, a):
    u = np.log(z2 / z1) / a
    v1 = 0.5 * a + u
    v2 = 0.5 * a - u
    return u, v1, v2


def pair_exponent(geom: PairGeometry, z1, z2, params: ModelParams) -> ExponentEval:
    """Pairwise exponent V(z1, z2) with z-partials and (sigma, alpha) gradient.

    The z-partials use the standard simplification V1 = -Phi(v(u))/z1^2,
    which follows from phi(v(-u)) z1 = phi(v(u)) z2.
    """
    if z1 <= 0 or z2 <= 0:
        raise ValueError("observations must be positive")
    a = geom.a(params)
    u, v1, v2 = _pair_core(z1, z2, a)
    p1, c1 = _phi(v1), ndtr(v1)
    p2, c2 = _phi(v2), ndtr(v2)
    value = c1 / z1 + c2 / z2
    g1 = -c1 / z1 ** 2
    g2 = -c2 / z2 ** 2
    v12 = -p1 / (a * z1 ** 2 * z2)
    # dV/da, then chain through a = sigma * d**(alpha/2)
    dv1 = 0.5 - u / a
    dv2 = 0.5 + u / a
    dV_da = p1 * dv1 / z1 + p2 * dv2 / z2
    return ExponentEval(
        value=value, grad_z=(g1, g2), v12=v12,
        grad_sigma=dV_da * a / params.sigma,
        grad_alpha=dV_da * a * np.log(geom.d) / 2.0,
        extras={"a": a, "u": u, "v1": v1, "v2": v2},
    )


def pair_log_density(geom: PairGeometry, z1, z2, params: ModelParams):
    """(log f, d/dsigma log f, d/dalpha log f) of the pair density.

    f = exp(-V) (V1 V2 - V12); the scores are exact closed forms obtained
    by differentiating through a = sigma d^(alpha/2).
    """
    a = geom.a(params)
    u, v1, v2 = _pair_core(z1, z2, a)
    p1, c1 = _phi(v1), ndtr(v1)
    p2, c2 = _phi(v2), ndtr(v2)
    V = c1 / z1 + c2 / z2
    # density factor W = V1 V2 - V12 = (c1 c2 / z2 + p1 / a) / (z1^2 z2)
    w_core = c1 * c2 / z2 + p1 / a
    if w_core <= 0:
        raise NumericalDegeneracyError(
            f"non-positive pair density factor at d={geom.d}, z=({z1}, {z2})")
    logf = -V + np.log(w_core) - 2.0 * np.log(z1) - np.log(z2)

    dv1 = 0.5 - u / a
    dv2 = 0.5 + u / a
    dV_da = p1 * dv1 / z1 + p2 * dv2 / z2
    dw_da = (p1 * dv1 * c2 + c1 * p2 * dv2) / z2 - p1 * (v1 * dv1 * a + 1.0) / a ** 2
    dlogf_da = -dV_da + dw_da / w_core
    score_sigma = dlogf_da * a / params.sigma
    score_alpha = dlogf_da * a * np.log(geom.d) / 2.0
    return logf, score_sigma, score_alpha


# ---------------------------------------------------------------------------
# Triplewise exponent and density
# ---------------------------------------------------------------------------

_ANCHOR_OTHERS = ((0, 1, 2), (1, 0, 2), (2, 0, 1))


def _triple_eval(z, dists, sigma, alpha, want_partials=True):
    """Shared trivariate evaluation; complex-safe in (sigma, alpha).

    z = (z1, z2, z3); dists = (d12, d13, d23).  Returns (V, grad, mixed,
    v123) where mixed = (V12, V13, V23); the derivative entries are None
    when ``want_partials`` is false.
    """
    d12, d13, d23 = dists
    logz = [np.log(zz) for zz in z]
    logd = {(0, 1): np.log(d12), (0, 2): np.log(d13), (1, 2): np.log(d23)}

    def a_of(i, j):
        key = (min(i, j), max(i, j))
        return sigma * np.exp(0.5 * alpha * logd[key])

    p12 = np.exp(alpha * logd[(0, 1)])
    p13 = np.exp(alpha * logd[(0, 2)])
    p23 = np.exp(alpha * logd[(1, 2)])
    rho = {
        0: (p12 + p13 - p23) / (2.0 * np.sqrt(p12 * p13)),
        1: (p12 + p23 - p13) / (2.0 * np.sqrt(p12 * p23)),
        2: (p13 + p23 - p12) / (2.0 * np.sqrt(p13 * p23)),
    }

    V = 0.0
    grad = [0.0, 0.0, 0.0]
    mixed = {(0, 1): 0.0, (0, 2): 0.0, (1, 2): 0.0}
    v123 = 0.0
    for i, j, k in _ANCHOR_OTHERS:
        aij = a_of(i, j)
        aik = a_of(i, k)
        x = 0.5 * aij + (logz[j] - logz[i]) / aij
        y = 0.5 * aik + (logz[k] - logz[i]) / aik
        r = rho[i]
        s2 = 1.0 - r * r
        s = np.sqrt(s2)
        G = _bvnu(-x, -y, r)[()]
        zi, zj, zk = z[i], z[j], z[k]
        V = V + G / zi
        if not want_partials:
            continue
        Gx = _phi(x) * ndtr((y - r * x) / s)
        Gy = _phi(y) * ndtr((x - r * y) / s)
        p2 = _phi(x) * _phi((y - r * x) / s) / s
        Gxx = -x * Gx - r * p2
        Gyy = -y * Gy - r * p2
        p2x = -((x - r * y) / s2) * p2
        p2y = -((y - r * x) / s2) * p2

        grad[i] += -(G + Gx / aij + Gy / aik) / zi ** 2
        grad[j] += Gx / (zi * aij * zj)
        grad[k] += Gy / (zi * aik * zk)

        key_jk = (min(j, k), max(j, k))
        key_ij = (min(i, j), max(i, j))
        key_ik = (min(i, k), max(i, k))
        mixed[key_jk] += p2 / (zi * aij * zj * aik * zk)
        mixed[key_ij] += -(Gx + Gxx / aij + p2 / aik) / (zi ** 2 * aij * zj)
        mixed[key_ik] += -(Gy + p2 / aij + Gyy / aik) / (zi ** 2 * aik * zk)
        v123 += -(p2 + p2x / aij + p2y / aik) / (zi ** 2 * aij * zj * aik * zk)
    return V, grad, mixed, v123


def triple_exponent(geom: TripleGeometry, z1, z2, z3,
                    params: ModelParams) -> ExponentEval:
    """Trivariate exponent V with all z-partials through third order.

    Partials come from the CDF-derivative identity
    dPhi2(a, b; rho)/da = phi(a) Phi((b - rho a) / sqrt(1 - rho^2)).
    The (sigma, alpha) gradient is evaluated by complex-step differentiation
    of the same expression (exact to machine precision).
    """
    if min(z1, z2, z3) <= 0:
        raise ValueError("observations must be positive")
    geom.check_degeneracy(params.alpha)
    dists = (geom.d12, geom.d13, geom.d23)
    V, grad, mixed, v123 = _triple_eval((z1, z2, z3), dists,
                                        params.sigma, params.alpha)
    h = 1e-20
    Vs = _triple_eval((z1, z2, z3), dists, params.sigma + 1j * h,
                      params.alpha, want_partials=False)[0]
    Va = _triple_eval((z1, z2, z3), dists, params.sigma,
                      params.alpha + 1j * h, want_partials=False)[0]
    return ExponentEval(
        value=V, grad_z=tuple(grad),
        v12=mixed[(0, 1)], v13=mixed[(0, 2)], v23=mixed[(1, 2)], v123=v123,
        grad_sigma=np.imag(Vs) / h, grad_alpha=np.imag(Va) / h,
    )


def _triple_logf(z, dists, sigma, alpha):
    V, grad, mixed, v123 = _triple_eval(z, dists, sigma, alpha)
    v1, v2, v3 = grad
    part = (-v123 + v1 * mixed[(1, 2)] + v2 * mixed[(0, 2)]
            + v3 * mixed[(0, 1)] - v1 * v2 * v3)
    return V, part


def triple_log_density(geom: TripleGeometry, z1, z2, z3, params: ModelParams):
    """(log f, d/dsigma log f, d/dalpha log f) of the triple density.

    f = exp(-V) (-V123 + V1 V23 + V2 V13 + V3 V12 - V1 V2 V3).
    Scores use complex-step differentiation (step 1e-20).
    """
    if min(z1, z2, z3) <= 0:
        raise ValueError("observations must be positive")
    geom.check_degeneracy(params.alpha)
    dists = (geom.d12, geom.d13, geom.d23)
    V, part = _triple_logf((z1, z2, z3), dists, params.sigma, params.alpha)
    if not (part > 0):
        raise NumericalDegeneracyError(
            f"non-positive triple density factor at {geom}, z=({z1},{z2},{z3})")
    logf = -V + np.log(part)

    h = 1e-20
    Vs, ps = _triple_logf((z1, z2, z3), dists, params.sigma + 1j * h, params.alpha)
    Va, pa = _triple_logf((z1, z2, z3), dists, params.sigma, params.alpha + 1j * h)
    score_sigma = (-np.imag(Vs) + np.imag(ps) / part) / h
    score_alpha = (-np.imag(Va) + np.imag(pa) / part) / h
    return logf, score_sigma, score_alpha


# ---------------------------------------------------------------------------
# Distributions of normalized increments (exact finite-distance laws)
# ---------------------------------------------------------------------------


def marginal_u_cdf(u, geom: PairGeometry, params: ModelParams):
    """P[U <= u] for U the normalized log-increment over distance d."""
    a = geom.a(params)
    u = np.asarray(u, dtype=float)
    v1 = 0.5 * a + u
    v2 = 0.5 * a - u
    # V(1, e^{a u}) = Phi(v(u)) + e^{-a u} Phi(v(-u))
    V = ndtr(v1) + np.exp(-a * u) * ndtr(v2)
    out = ndtr(v1) / V
    return float(out) if out.ndim == 0 else out


def pair_u_cdf(u2, u3, geom: TripleGeometry, params: ModelParams):
    """P[U_{1,2} <= u2, U_{1,3} <= u3] for increments anchored at site 1."""
    r1 = geom.check_degeneracy(params.alpha)[0]
    a12 = params.sigma * geom.d12 ** (params.alpha / 2.0)
    a13 = params.sigma * geom.d13 ** (params.alpha / 2.0)
    z = (1.0, float(np.exp(a12 * u2)), float(np.exp(a13 * u3)))
    V = _triple_eval(z, (geom.d12, geom.d13, geom.d23), params.sigma,
                     params.alpha, want_partials=False)[0]
    num = bvn_cdf(0.5 * a12 + u2, 0.5 * a13 + u3, r1)
    return num / V


def conditional_u_cdf(u, geom: PairGeometry, params: ModelParams, eta1):
    """P[U <= u | eta(x1) = eta1]."""
    if eta1 <= 0:
        raise ValueError("eta1 must be positive")
    a = geom.a(params)
    u = np.asarray(u, dtype=float)
    v1 = 0.5 * a + u
    V = ndtr(v1) + np.exp(-a * u) * ndtr(0.5 * a - u)
    out = np.exp(-(V - 1.0) / eta1) * ndtr(v1)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Batch evaluation (hot path of the composite-likelihood objectives)
# ---------------------------------------------------------------------------


def pair_loglik_terms(z1, z2, d, sigma, alpha):
    """Vectorized log pair density over arrays of observations/distances.

    Stable in the log domain: the density factor is assembled with
    logaddexp so deep Fréchet tails do not underflow.
    """
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    d = np.asarray(d, dtype=float)
    a = sigma * d ** (alpha / 2.0)
    u = np.log(z2 / z1) / a
    v1 = 0.5 * a + u
    v2 = 0.5 * a - u
    V = ndtr(v1) / z1 + ndtr(v2) / z2
    lw1 = log_ndtr(v1) + log_ndtr(v2) - np.log(z2)
    lw2 = -0.5 * v1 * v1 - np.log(SQRT_2PI * a)
    return -V + np.logaddexp(lw1, lw2) - 2.0 * np.log(z1) - np.log(z2)


def _bvn_partial_stack(x, y, r):
    """G, Gx, Gy, p2, Gxx, Gyy, p2x, p2y for arrays (x, y, r)."""
    s2 = 1.0 - r * r
    s = np.sqrt(s2)
    qx = (y - r * x) / s
    qy = (x - r * y) / s
    G = _bvnu(-x, -y, r)
    phix = _phi(x)
    phiy = _phi(y)
    Gx = phix * ndtr(qx)
    Gy = phiy * ndtr(qy)
    p2 = phix * _phi(qx) / s
    Gxx = -x * Gx - r * p2
    Gyy = -y * Gy - r * p2
    p2x = -(qy / s) * p2
    p2y = -(qx / s) * p2
    return G, Gx, Gy, p2, Gxx, Gyy, p2x, p2y


def triple_loglik_terms(z1, z2, z3, d12, d13, d23, sigma, alpha,
                        degeneracy_tol=DEGENERACY_TOL):
    """Vectorized log triple density.

    Returns (logf, valid): entries whose triangle is numerically degenerate
    (max |R_i| >= 1 - tol) carry logf = nan and valid = False; callers skip
    and count them.
    """
    z = [np.asarray(zz, dtype=float) for zz in (z1, z2, z3)]
    dd = {(0, 1): np.asarray(d12, float), (0, 2): np.asarray(d13, float),
          (1, 2): np.asarray(d23, float)}
    logz = [np.log(zz) for zz in z]
    a = {k: sigma * v ** (alpha / 2.0) for k, v in dd.items()}
    p = {k: v ** alpha for k, v in dd.items()}
    rho = {
        0: (p[(0, 1)] + p[(0, 2)] - p[(1, 2)]) / (2.0 * np.sqrt(p[(0, 1)] * p[(0, 2)])),
        1: (p[(0, 1)] + p[(1, 2)] - p[(0, 2)]) / (2.0 * np.sqrt(p[(0, 1)] * p[(1, 2)])),
        2: (p[(0, 2)] + p[(1, 2)] - p[(0, 1)]) / (2.0 * np.sqrt(p[(0, 2)] * p[(1, 2)])),
    }
    valid = np.ones(np.broadcast(z[0], dd[(0, 1)]).shape, dtype=bool)
    for r in rho.values():
        valid &= np.abs(r) < 1.0 - degeneracy_tol
    # Clamp invalid rows to a safe correlation; results are discarded.
    rho = {i: np.where(valid, r, 0.0) for i, r in rho.items()}

    V = 0.0
    grad = [0.0, 0.0, 0.0]
    mixed = {(0, 1): 0.0, (0, 2): 0.0, (1, 2): 0.0}
    v123 = 0.0
    for i, j, k in _ANCHOR_OTHERS:
        key_ij = (min(i, j), max(i, j))
        key_ik = (min(i, k), max(i, k))
        key_jk = (min(j, k), max(j, k))
        aij = a[key_ij]
        aik = a[key_ik]
        x = 0.5 * aij + (logz[j] - logz[i]) / aij
        y = 0.5 * aik + (logz[k] - logz[i]) / aik
        G, Gx, Gy, p2, Gxx, Gyy, p2x, p2y = _bvn_partial_stack(x, y, rho[i])
        zi, zj, zk = z[i], z[j], z[k]
        V = V + G / zi
        grad[i] = grad[i] - (G + Gx / aij + Gy / aik) / zi ** 2
        grad[j] = grad[j] + Gx / (zi * aij * zj)
        grad[k] = grad[k] + Gy / (zi * aik * zk)
        mixed[key_jk] = mixed[key_jk] + p2 / (zi * aij * zj * aik * zk)
        mixed[key_ij] = mixed[key_ij] - (Gx + Gxx / aij + p2 / aik) / (zi ** 2 * aij * zj)
        mixed[key_ik] = mixed[key_ik] - (Gy + p2 / aij + Gyy / aik) / (zi ** 2 * aik * zk)
        v123 = v123 - (p2 + p2x / aij + p2y / aik) / (zi ** 2 * aij * zj * aik * zk)
    part = (-v123 + grad[0] * mixed[(1, 2)] + grad[1] * mixed[(0, 2)]
            + grad[2] * mixed[(0, 1)] - grad[0] * grad[1] * grad[2])
    with np.errstate(divide="ignore", invalid="ignore"):
        logf = np.where(valid & (part > 0), -V + np.log(np.maximum(part, 1e-320)),
                        np.nan)
    bad = valid & ~(part > 0)
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise NumericalDegeneracyError(
            f"non-positive triple density factor at term {idx}")
    return logf, valid
