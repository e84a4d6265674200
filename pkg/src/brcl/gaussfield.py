"""Exact simulation of the isotropic fractional Brownian field.

The field W has W(0) = 0 a.s., stationary increments, and semi-variogram
gamma(x) = sigma^2 ||x||^alpha / 2.  Simulation is by dense Cholesky
factorization of the site covariance (exact at desk scale), with a ridge
jitter escalation for near-duplicate sites.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky
from scipy.spatial.distance import cdist

from .rngs import as_generator, seed_record

__all__ = [
    "ModelParams",
    "FieldValues",
    "CovFactor",
    "IllConditionedCovarianceError",
    "SiteLookupError",
    "semivariogram",
    "fbm_cov",
    "fbm_cov_matrix",
    "build_cov_factor",
    "simulate_fbm",
    "increment_u",
    "pointwise_max",
    "DENSE_SITE_CAP",
]

DENSE_SITE_CAP = 30_000

# Ridge escalation applied to the covariance diagonal, as multiples of the
# trace scale trace(C)/n.
_JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8)


class IllConditionedCovarianceError(ArithmeticError):
    pass


class SiteLookupError(KeyError):
    pass


@dataclass(frozen=True)
class ModelParams:
    """Scale sigma > 0 and range alpha in (0, 2); Hurst index is alpha/2."""

    sigma: float
    alpha: float

    def __post_init__(self):
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not (0.0 < self.alpha < 2.0):
            raise ValueError(f"alpha must lie in (0, 2), got {self.alpha}")

    @property
    def hurst(self):
        return self.alpha / 2.0


def semivariogram(x, params: ModelParams):
    """gamma(x) = sigma^2 ||x||^alpha / 2 (vectorized over rows of x)."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1) if x.ndim > 1 else np.linalg.norm(x)
    return 0.5 * params.sigma ** 2 * r ** params.alpha


def fbm_cov(x1, x2, params: ModelParams):
    """Cov(W(x1), W(x2)) = sigma^2 (||x1||^a + ||x2||^a - ||x1-x2||^a) / 2."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    a = params.alpha
    return 0.5 * params.sigma ** 2 * (
        np.linalg.norm(x1) ** a + np.linalg.norm(x2) ** a
        - np.linalg.norm(x1 - x2) ** a)


def fbm_cov_matrix(sites, params: ModelParams):
    sites = np.asarray(sites, dtype=float)
    a = params.alpha
    norms = np.linalg.norm(sites, axis=1) ** a
    cov = cdist(sites, sites) ** a
    np.negative(cov, out=cov)
    cov += norms[:, None]
    cov += norms[None, :]
    cov *= 0.5 * params.sigma ** 2
    return cov


@dataclass
class CovFactor:
    """Lower-triangular factor of a site covariance matrix."""

    sites: np.ndarray
    lower: np.ndarray
    jitter: float
    params: ModelParams
    origin_index: int | None = None

    @property
    def n_sites(self):
        return self.sites.shape[0]

    def sample(self, rng, size=1):
        """Exact field draws; shape (size, n_sites)."""
        n = self.lower.shape[0]
        xi = rng.standard_normal((n, size))
        vals = (self.lower @ xi).T
        if self.origin_index is not None:
            vals = np.insert(vals, self.origin_index, 0.0, axis=1)
        return vals

    def sample_with_innovations(self, xi):
        """Deterministic draw from given standard-normal innovations."""
        vals = (self.lower @ np.asarray(xi, dtype=float).T).T
        if self.origin_index is not None:
            vals = np.insert(vals, self.origin_index,
                             0.0, axis=-1 if vals.ndim > 1 else 0)
        return vals


def _closest_pair_distance(sites):
    d = cdist(sites, sites)
    np.fill_diagonal(d, np.inf)
    i, j = np.unravel_index(np.argmin(d), d.shape)
    return d[i, j], (int(i), int(j))


def build_cov_factor(sites, params: ModelParams) -> CovFactor:
    """Cholesky factor of the fBm covariance with jitter escalation.

    If the origin is among the sites its (identically zero) row is removed
    before factorization and the simulated value is pinned to 0 exactly.
    """
    sites = np.ascontiguousarray(np.asarray(sites, dtype=float))
    if sites.ndim != 2 or sites.shape[1] != 2:
        raise ValueError("sites must be an (n, 2) array")
    n = sites.shape[0]
    if n > DENSE_SITE_CAP:
        raise ValueError(
            f"{n} sites exceed the dense factorization cap {DENSE_SITE_CAP}")

    origin_mask = (sites[:, 0] == 0.0) & (sites[:, 1] == 0.0)
    origin_index = int(np.nonzero(origin_mask)[0][0]) if origin_mask.any() else None
    work = sites[~origin_mask] if origin_index is not None else sites

    cov = fbm_cov_matrix(work, params)
    scale = np.trace(cov) / max(cov.shape[0], 1)
    for mult in _JITTER_LADDER:
        try:
            mat = cov if mult == 0.0 else cov + (mult * scale) * np.eye(cov.shape[0])
            lower = cholesky(mat, lower=True, check_finite=False)
            return CovFactor(sites=sites, lower=lower, jitter=mult * scale,
                             params=params, origin_index=origin_index)
        except np.linalg.LinAlgError:
            continue
    dmin, pair = _closest_pair_distance(work)
    raise IllConditionedCovarianceError(
        f"covariance factorization failed after max jitter; closest site pair "
        f"{pair} at distance {dmin:.3e}")


@dataclass
class FieldValues:
    """Field levels at a fixed site set; immutable after creation."""

    sites: np.ndarray
    values: np.ndarray
    params: ModelParams
    seed: dict = field(default_factory=dict)
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.sites.shape[0],):
            raise ValueError("one value per site required")

    def index_of(self, x):
        if not self._index:
            self._index.update(
                {(sx, sy): i for i, (sx, sy) in enumerate(self.sites)})
        key = (float(x[0]), float(x[1]))
        try:
            return self._index[key]
        except KeyError:
            raise SiteLookupError(f"site {key} not in field") from None

    def value_at(self, x):
        return self.values[self.index_of(x)]

    def to_csv(self, csv_path, manifest_path=None):
        import json
        from pathlib import Path

        csv_path = Path(csv_path)
        arr = np.column_stack([self.sites, self.values])
        np.savetxt(csv_path, arr, delimiter=",", header="x,y,value", comments="")
        manifest = {
            "params": {"sigma": self.params.sigma, "alpha": self.params.alpha},
            "seed": self.seed,
            "n_sites": int(self.sites.shape[0]),
        }
        mpath = Path(manifest_path) if manifest_path else csv_path.with_suffix(".json")
        mpath.write_text(json.dumps(manifest, indent=1))
        return csv_path, mpath


def simulate_fbm(sites, params: ModelParams, seed, factor: CovFactor = None,
                 n_fields: int = 1):
    """Exact Gaussian sample(s) of W at ``sites``.

    Returns one FieldValues, or a list when n_fields > 1 (sharing one
    factorization).  Deterministic given seed.
    """
    if factor is None:
        factor = build_cov_factor(sites, params)
    rng = as_generator(seed)
    draws = factor.sample(rng, size=n_fields)
    rec = seed_record(seed)
    out = [FieldValues(sites=factor.sites, values=draws[i], params=params,
                       seed=rec) for i in range(n_fields)]
    return out[0] if n_fields == 1 else out


def increment_u(fv: FieldValues, x1, x2):
    """Normalized increment (W(x2) - W(x1)) / (sigma d^(alpha/2)).

    Computed difference-first to limit cancellation when d is small.
    """
    i1 = fv.index_of(x1)
    i2 = fv.index_of(x2)
    if i1 == i2:
        raise ValueError("x1 and x2 must be distinct sites")
    d = float(np.hypot(fv.sites[i2, 0] - fv.sites[i1, 0],
                       fv.sites[i2, 1] - fv.sites[i1, 1]))
    diff = fv.values[i2] - fv.values[i1]
    return diff / (fv.params.sigma * d ** (fv.params.alpha / 2.0))


def pointwise_max(fv1: FieldValues, fv2: FieldValues) -> FieldValues:
    """Value-wise maximum of two fields on the same site set."""
    if fv1.sites.shape != fv2.sites.shape or not np.array_equal(fv1.sites, fv2.sites):
        raise ValueError("fields must share the same site list")
    if fv1.params != fv2.params:
        raise ValueError("fields must share the same parameters")
    return FieldValues(sites=fv1.sites, values=np.maximum(fv1.values, fv2.values),
                       params=fv1.params,
                       seed={"combined": [fv1.seed, fv2.seed]})
