"""Numba kernels for the per-edge / per-triangle hot loops.

Each kernel has a vectorized NumPy twin in its caller; the env flag
``BRCL_DISABLE_NUMBA=1`` routes callers to the NumPy path.  The kernels
fuse the switching-functional reductions and the pairwise log-density sum
into single passes (no temporaries); `benchmarks/bench_kernels.py` compares
the two paths.
"""

import math

from ._jit import NUMBA_ENABLED, maybe_njit

__all__ = ["NUMBA_ENABLED", "v2_decompose_sums", "v3_decompose_sums",
           "pair_loglik_sum"]

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@maybe_njit(cache=True)
def _psi_h2(x, y, w):
    out = 0.0
    if x - y <= w <= 0.0:
        out += (y + w) * (y + w) - x * x
    if 0.0 <= w <= x - y:
        out += (x - w) * (x - w) - y * y
    return out


@maybe_njit(cache=True)
def _psi_id(x, y, w):
    out = 0.0
    if x - y <= w <= 0.0:
        out += (y + w) - x
    if 0.0 <= w <= x - y:
        out += (x - w) - y
    return out


@maybe_njit(cache=True)
def v2_decompose_sums(u1, u2, w):
    """(sum H2(u1) on w<0, sum H2(u2) on w>0, sum Psi_H2) in one pass."""
    part1 = 0.0
    part2 = 0.0
    cross = 0.0
    for i in range(u1.shape[0]):
        if w[i] < 0.0:
            part1 += u1[i] * u1[i] - 1.0
        elif w[i] > 0.0:
            part2 += u2[i] * u2[i] - 1.0
        cross += _psi_h2(u1[i], u2[i], w[i])
    return part1, part2, cross


@maybe_njit(cache=True)
def v3_decompose_sums(u12_1, u13_1, u12_2, u13_2, w1, w2, r):
    """(sum Q1 on w<0, sum Q2 on w>0, sum Omega) in one pass."""
    part1 = 0.0
    part2 = 0.0
    cross = 0.0
    for i in range(r.shape[0]):
        ri = r[i]
        one_m = 1.0 - ri * ri
        if w1[i] < 0.0:
            a, b = u12_1[i], u13_1[i]
            part1 += (a * a - 2.0 * ri * a * b + b * b) / one_m - 2.0
        elif w1[i] > 0.0:
            a, b = u12_2[i], u13_2[i]
            part2 += (a * a - 2.0 * ri * a * b + b * b) / one_m - 2.0
        ph1 = _psi_h2(u12_1[i], u12_2[i], w1[i])
        ph2 = _psi_h2(u13_1[i], u13_2[i], w2[i])
        pi1 = _psi_id(u12_1[i], u12_2[i], w1[i])
        pi2 = _psi_id(u13_1[i], u13_2[i], w2[i])
        om = (ph1 + ph2) / one_m - 2.0 * ri / one_m * pi1 * pi2
        if w1[i] < 0.0:
            om -= 2.0 * ri / one_m * (u12_1[i] * pi2 + u13_1[i] * pi1)
        elif w1[i] > 0.0:
            om -= 2.0 * ri / one_m * (u12_2[i] * pi2 + u13_2[i] * pi1)
        cross += om
    return part1, part2, cross


@maybe_njit(cache=True)
def _log_ndtr(x):
    if x > -37.0:
        return math.log(0.5 * math.erfc(-x / _SQRT2))
    # asymptotic tail: log phi(x) - log|x| + log(1 - 1/x^2 + 3/x^4)
    z = x * x
    return (-0.5 * z - _LOG_SQRT_2PI - math.log(-x)
            + math.log1p(-1.0 / z + 3.0 / (z * z)))


@maybe_njit(cache=True)
def pair_loglik_sum(z1, z2, d, sigma, alpha):
    """Fused sum of log pair densities over edges."""
    total = 0.0
    for i in range(z1.shape[0]):
        a = sigma * d[i] ** (alpha / 2.0)
        u = math.log(z2[i] / z1[i]) / a
        v1 = 0.5 * a + u
        v2 = 0.5 * a - u
        c1 = 0.5 * math.erfc(-v1 / _SQRT2)
        c2 = 0.5 * math.erfc(-v2 / _SQRT2)
        V = c1 / z1[i] + c2 / z2[i]
        lw1 = _log_ndtr(v1) + _log_ndtr(v2) - math.log(z2[i])
        lw2 = -0.5 * v1 * v1 - _LOG_SQRT_2PI - math.log(a)
        if lw1 > lw2:
            lw = lw1 + math.log1p(math.exp(lw2 - lw1))
        else:
            lw = lw2 + math.log1p(math.exp(lw1 - lw2))
        total += -V + lw - 2.0 * math.log(z1[i]) - math.log(z2[i])
    return total
