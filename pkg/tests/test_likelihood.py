import mpmath
import numpy as np
import pytest
from scipy import integrate
from scipy.special import ndtr

from oracles import trivariate_mass_estimate

from brcl.gaussfield import ModelParams
from brcl.likelihood import (DegenerateGeometryError, PairGeometry,
                             TripleGeometry, _triple_eval, bvn_cdf,
                             conditional_u_cdf, marginal_u_cdf, pair_exponent,
                             pair_log_density, pair_loglik_terms, pair_u_cdf,
                             std_normal, triple_correlations, triple_exponent,
                             triple_log_density, triple_loglik_terms)


class TestStdNormal:
    def test_center(self):
        pdf, cdf, sf = std_normal(0.0)
        assert cdf == 0.5
        assert np.isclose(pdf, 1.0 / np.sqrt(2.0 * np.pi), rtol=1e-15)

    def test_quantile_against_mpmath(self):
        target = float(mpmath.ncdf(1.96))
        assert abs(std_normal(1.96)[1] - target) < 1e-15

    def test_accuracy_band(self):
        xs = np.linspace(-8.0, 8.0, 41)
        for x in xs:
            _, cdf, sf = std_normal(float(x))
            assert abs(cdf - float(mpmath.ncdf(x))) < 1e-15
            assert abs(sf - float(mpmath.ncdf(-x))) < 1e-15

    def test_complementarity_exact(self):
        for x in (-7.5, -2.0, -1e-3, 0.0, 0.3, 4.0, 8.0):
            _, cdf, sf = std_normal(x)
            assert cdf + sf == 1.0


def bvn_oracle(h, k, rho):
    """Plackett identity: adaptive quadrature over the correlation."""
    def dens(r):
        return np.exp(-(h * h - 2 * r * h * k + k * k) / (2 * (1 - r * r))) \
            / (2 * np.pi * np.sqrt(1 - r * r))
    val, _ = integrate.quad(dens, 0.0, rho, epsabs=1e-13, epsrel=1e-13)
    return std_normal(h)[1] * std_normal(k)[1] + val


class TestBvnCdf:
    def test_independence_quadrant(self):
        assert abs(bvn_cdf(0.0, 0.0, 0.0) - 0.25) < 1e-15

    def test_arcsin_value(self):
        want = 0.25 + np.arcsin(0.5) / (2.0 * np.pi)
        assert abs(bvn_cdf(0.0, 0.0, 0.5) - want) < 1e-12

    def test_marginalization(self):
        for k in (-2.0, 0.3, 1.5):
            for rho in (-0.9, 0.0, 0.4, 0.99):
                assert abs(bvn_cdf(8.0, k, rho) - ndtr(k)) < 1e-10

    def test_degenerate_limits(self):
        assert np.isclose(bvn_cdf(0.5, 0.3, 1.0), ndtr(0.3), rtol=1e-15)
        want = max(0.0, ndtr(0.5) + ndtr(0.3) - 1.0)
        assert np.isclose(bvn_cdf(0.5, 0.3, -1.0), want, rtol=1e-12)
        assert bvn_cdf(-0.5, 0.3, -1.0) == 0.0

    def test_against_quadrature_oracle(self):
        cases = [(0.3, -0.7, 0.6), (1.5, 2.0, -0.85), (0.2, 0.1, 0.97),
                 (-1.0, -2.0, 0.999), (2.0, -3.0, -0.97), (0.0, 0.0, -0.5),
                 (1.2, 1.1, 0.9999), (-0.2, 0.4, 0.925), (3.0, 3.0, 0.95)]
        for h, k, rho in cases:
            assert abs(bvn_cdf(h, k, rho) - bvn_oracle(h, k, rho)) < 1e-10

    def test_vectorized_matches_scalar(self, rng):
        h = rng.normal(size=50)
        k = rng.normal(size=50)
        r = rng.uniform(-0.999, 0.999, size=50)
        vec = bvn_cdf(h, k, r)
        for i in range(50):
            assert vec[i] == bvn_cdf(h[i], k[i], r[i])


class TestPairExponent:
    def test_equal_arguments(self, params):
        g = PairGeometry(0.3)
        a = g.a(params)
        for z in (0.5, 1.0, 3.0):
            ev = pair_exponent(g, z, z, params)
            assert np.isclose(ev.value, 2.0 * ndtr(a / 2.0) / z, rtol=1e-14)

    def test_homogeneity(self, params):
        g = PairGeometry(0.4)
        v1 = pair_exponent(g, 1.3, 0.7, params).value
        v2 = pair_exponent(g, 2.6, 1.4, params).value
        assert np.isclose(v2, v1 / 2.0, rtol=1e-14)

    def test_independence_limit(self):
        # a = 40 makes the sites effectively independent
        par = ModelParams(40.0, 1.0)
        g = PairGeometry(1.0)
        ev = pair_exponent(g, 1.3, 0.7, par)
        assert abs(ev.value - (1.0 / 1.3 + 1.0 / 0.7)) < 1e-12

    def test_euler_identity(self, params, rng):
        for _ in range(30):
            d = rng.uniform(0.05, 1.0)
            z1, z2 = rng.uniform(0.1, 5.0, size=2)
            ev = pair_exponent(PairGeometry(d), z1, z2, params)
            lhs = -(ev.value)
            rhs = z1 * ev.grad_z[0] + z2 * ev.grad_z[1]
            assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))

    def test_partials_layered_fd(self, params, rng):
        # V1 against differences of V; V12 against differences of the
        # analytic V1 (keeps the finite-difference noise at first order)
        h = 1e-5
        for _ in range(20):
            d = rng.uniform(0.05, 0.8)
            z1, z2 = rng.uniform(0.2, 4.0, size=2)
            g = PairGeometry(d)
            ev = pair_exponent(g, z1, z2, params)
            fd1 = (pair_exponent(g, z1 + h, z2, params).value
                   - pair_exponent(g, z1 - h, z2, params).value) / (2 * h)
            assert np.isclose(ev.grad_z[0], fd1, rtol=1e-6)
            fd12 = (pair_exponent(g, z1, z2 + h, params).grad_z[0]
                    - pair_exponent(g, z1, z2 - h, params).grad_z[1 - 1]) / (2 * h)
            assert np.isclose(ev.v12, fd12, rtol=1e-6)

    def test_param_grads_fd(self, rng):
        h = 1e-6
        for _ in range(10):
            d = rng.uniform(0.05, 0.8)
            z1, z2 = rng.uniform(0.2, 4.0, size=2)
            s, a = rng.uniform(0.5, 2.0), rng.uniform(0.2, 1.4)
            ev = pair_exponent(PairGeometry(d), z1, z2, ModelParams(s, a))
            fds = (pair_exponent(PairGeometry(d), z1, z2, ModelParams(s + h, a)).value
                   - pair_exponent(PairGeometry(d), z1, z2, ModelParams(s - h, a)).value) / (2 * h)
            fda = (pair_exponent(PairGeometry(d), z1, z2, ModelParams(s, a + h)).value
                   - pair_exponent(PairGeometry(d), z1, z2, ModelParams(s, a - h)).value) / (2 * h)
            assert np.isclose(ev.grad_sigma, fds, rtol=1e-5, atol=1e-12)
            assert np.isclose(ev.grad_alpha, fda, rtol=1e-5, atol=1e-12)


class TestPairDensity:
    def test_integrates_to_one(self):
        par = ModelParams(1.0, 0.5)
        g = PairGeometry(0.3)

        def f(z1, z2):
            return np.exp(pair_log_density(g, z1, z2, par)[0])

        # map (0, inf)^2 to the unit square via z = t / (1 - t)
        def integrand(t1, t2):
            z1 = t1 / (1 - t1)
            z2 = t2 / (1 - t2)
            return f(z1, z2) / ((1 - t1) ** 2 * (1 - t2) ** 2)

        val, err = integrate.dblquad(integrand, 0.0, 1.0, 0.0, 1.0,
                                     epsabs=1e-9, epsrel=1e-9)
        assert abs(val - 1.0) < 1e-6

    def test_marginal_recovery(self):
        par = ModelParams(1.0, 0.5)
        g = PairGeometry(0.3)
        for z1 in (0.4, 1.0, 2.5):
            def f(z2):
                return np.exp(pair_log_density(g, z1, z2, par)[0])
            val, err = integrate.quad(f, 0.0, np.inf, epsabs=1e-10,
                                      epsrel=1e-10, limit=200)
            target = z1 ** (-2.0) * np.exp(-1.0 / z1)
            assert abs(val - target) < 1e-6

    def test_density_factor_positive_sweep(self, rng):
        for _ in range(200):
            d = rng.uniform(0.01, 2.0)
            z1, z2 = rng.uniform(0.05, 20.0, size=2)
            s, a = rng.uniform(0.3, 3.0), rng.uniform(0.1, 1.5)
            logf, _, _ = pair_log_density(PairGeometry(d), z1, z2,
                                          ModelParams(s, a))
            assert np.isfinite(logf)

    def test_scores_match_fd(self, rng):
        h = 1e-6
        for _ in range(15):
            d = rng.uniform(0.05, 0.8)
            z1, z2 = rng.uniform(0.2, 4.0, size=2)
            s, a = rng.uniform(0.5, 2.0), rng.uniform(0.2, 1.4)
            g = PairGeometry(d)
            _, ss, sa = pair_log_density(g, z1, z2, ModelParams(s, a))
            fs = (pair_log_density(g, z1, z2, ModelParams(s + h, a))[0]
                  - pair_log_density(g, z1, z2, ModelParams(s - h, a))[0]) / (2 * h)
            fa = (pair_log_density(g, z1, z2, ModelParams(s, a + h))[0]
                  - pair_log_density(g, z1, z2, ModelParams(s, a - h))[0]) / (2 * h)
            assert np.isclose(ss, fs, rtol=1e-5, atol=1e-10)
            assert np.isclose(sa, fa, rtol=1e-5, atol=1e-10)

    def test_sigma_score_limit(self):
        # fixed normalized increment, shrinking distance
        par = ModelParams(1.25, 0.9)
        u, z1 = 2.0, 1.3
        d = 1e-6
        a = par.sigma * d ** (par.alpha / 2.0)
        z2 = z1 * np.exp(a * u)
        _, ss, sa = pair_log_density(PairGeometry(d), z1, z2, par)
        lim = (u * u - 1.0) / par.sigma
        assert abs(ss - lim) < 1e-3 * abs(lim)
        lim_a = (u * u - 1.0) / 2.0
        assert abs(sa / np.log(d) - lim_a) < 1e-3 * abs(lim_a)

    def test_batch_matches_scalar(self, rng):
        d = rng.uniform(0.05, 0.8, size=40)
        z1 = rng.uniform(0.1, 6.0, size=40)
        z2 = rng.uniform(0.1, 6.0, size=40)
        batch = pair_loglik_terms(z1, z2, d, 1.1, 0.6)
        for i in range(40):
            ref = pair_log_density(PairGeometry(d[i]), z1[i], z2[i],
                                   ModelParams(1.1, 0.6))[0]
            assert np.isclose(batch[i], ref, rtol=1e-12)

    def test_batch_deep_tail_stable(self):
        # Frechet tails: huge/small observations must stay finite
        z1 = np.array([1e-4, 1e4, 1e-4])
        z2 = np.array([1e4, 1e-4, 1e-4])
        vals = pair_loglik_terms(z1, z2, np.full(3, 0.05), 1.0, 0.5)
        assert np.all(np.isfinite(vals))


class TestTripleExponent:
    def test_equilateral_correlations(self):
        for alpha in (0.2, 0.5, 1.0, 1.5):
            r = triple_correlations(0.7, 0.7, 0.7, alpha)
            assert np.allclose(r, 0.5, rtol=1e-14)

    def test_homogeneity(self, params):
        g = TripleGeometry(0.3, 0.4, 0.5)
        v = triple_exponent(g, 0.9, 1.4, 0.6, params).value
        v2 = triple_exponent(g, 1.8, 2.8, 1.2, params).value
        assert np.isclose(v2, v / 2.0, rtol=1e-13)

    def test_relabeling_invariance(self, params, rng):
        sites = rng.uniform(-0.5, 0.5, size=(3, 2))
        z = rng.uniform(0.3, 3.0, size=3)
        base = triple_exponent(TripleGeometry.from_sites(*sites), *z, params)
        import itertools
        for perm in itertools.permutations(range(3)):
            g = TripleGeometry.from_sites(*sites[list(perm)])
            v = triple_exponent(g, *z[list(perm)], params).value
            assert abs(v - base.value) < 1e-12 * base.value

    def test_euler_identity(self, params, rng):
        for _ in range(20):
            pts = rng.uniform(-0.5, 0.5, size=(3, 2))
            z = rng.uniform(0.2, 4.0, size=3)
            try:
                g = TripleGeometry.from_sites(*pts)
                ev = triple_exponent(g, *z, params)
            except DegenerateGeometryError:
                continue
            rhs = sum(zz * gg for zz, gg in zip(z, ev.grad_z))
            assert abs(-ev.value - rhs) < 1e-10 * max(1.0, ev.value)

    def test_partials_layered_fd(self, params):
        g = TripleGeometry(0.4, 0.55, 0.38)
        z = np.array([0.9, 1.5, 0.7])
        dists = (g.d12, g.d13, g.d23)
        h = 1e-5
        ev = triple_exponent(g, *z, params)

        def V(zz):
            return _triple_eval(tuple(zz), dists, params.sigma, params.alpha,
                                want_partials=False)[0]

        def grad(zz):
            return _triple_eval(tuple(zz), dists, params.sigma,
                                params.alpha)[1]

        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd = (V(z + e) - V(z - e)) / (2 * h)
            assert np.isclose(ev.grad_z[i], fd, rtol=1e-6)
        # mixed second partials from first differences of analytic gradients
        e2 = np.array([0.0, h, 0.0])
        fd12 = (grad(z + e2)[0] - grad(z - e2)[0]) / (2 * h)
        assert np.isclose(ev.v12, fd12, rtol=1e-6)
        e3 = np.array([0.0, 0.0, h])
        fd13 = (grad(z + e3)[0] - grad(z - e3)[0]) / (2 * h)
        fd23 = (grad(z + e3)[1] - grad(z - e3)[1]) / (2 * h)
        assert np.isclose(ev.v13, fd13, rtol=1e-6)
        assert np.isclose(ev.v23, fd23, rtol=1e-6)
        # third mixed partial from first differences of analytic mixed
        def v12_of(zz):
            return _triple_eval(tuple(zz), dists, params.sigma,
                                params.alpha)[2][(0, 1)]
        fd123 = (v12_of(z + e3) - v12_of(z - e3)) / (2 * h)
        assert np.isclose(ev.v123, fd123, rtol=1e-6)

    def test_degenerate_triangle_rejected(self, params):
        # for alpha < 1 the correlations degenerate only when two vertices
        # nearly coincide (|R_3| -> 1 as d12 -> 0), not for flat triangles
        with pytest.raises(DegenerateGeometryError, match="R"):
            triple_exponent(TripleGeometry(1e-40, 0.5, 0.5),
                            1.0, 1.0, 1.0, params)

    def test_flat_triangle_not_degenerate_for_small_alpha(self, params):
        # collinear sites keep |R| strictly below 1 when alpha < 1
        g = TripleGeometry(0.5, 0.25, 0.25)
        assert max(abs(r) for r in g.correlations(params.alpha)) < 0.9
        ev = triple_exponent(g, 1.0, 1.2, 0.8, params)
        assert np.isfinite(ev.value)

    def test_pair_consistency_as_z3_grows(self, params):
        g = TripleGeometry(0.3, 0.4, 0.5)
        v = triple_exponent(g, 0.9, 1.4, 1e9, params).value
        pv = pair_exponent(PairGeometry(0.3), 0.9, 1.4, params).value
        assert abs(v - (pv + 1e-9)) < 1e-8


class TestTripleDensity:
    def test_integrates_to_one_importance_mc(self):
        # vine-style importance proposal: z1 unit Frechet, z2 from the exact
        # pair conditional, z3 from a tightened pair conditional anchored at
        # the geometric mean; moderate-size version of the acceptance run
        est, se = trivariate_mass_estimate(n=1_500_000, seed=8)
        assert abs(est - 1.0) < max(1e-4, 3.5 * se)
        assert se < 1.2e-4

    def test_fd_cross_check_of_cdf(self, params):
        # third mixed difference of F = exp(-V) against the closed form
        g = TripleGeometry(0.5, 0.6, 0.45)
        z = np.array([1.1, 0.9, 1.3])
        h = 1e-3

        def F(zz):
            v = _triple_eval(tuple(zz), (g.d12, g.d13, g.d23), params.sigma,
                             params.alpha, want_partials=False)[0]
            return np.exp(-v)

        acc = 0.0
        for s1 in (1, -1):
            for s2 in (1, -1):
                for s3 in (1, -1):
                    zz = z + h * np.array([s1, s2, s3])
                    acc += s1 * s2 * s3 * F(zz)
        fd = acc / (8 * h ** 3)
        logf, _, _ = triple_log_density(g, *z, params)
        assert np.isclose(np.exp(logf), fd, rtol=1e-4)

    def test_sigma_score_limit_general_shape(self):
        par = ModelParams(1.0, 0.9)
        delta = 1e-4
        d12, d13, d23 = 1.0, 1.3, 0.9
        u2, u3 = 1.4, -0.6
        g = TripleGeometry(delta * d12, delta * d13, delta * d23)
        a12 = (delta * d12) ** (par.alpha / 2.0)
        a13 = (delta * d13) ** (par.alpha / 2.0)
        z1 = 1.2
        _, ss, sa = triple_log_density(g, z1, z1 * np.exp(a12 * u2),
                                       z1 * np.exp(a13 * u3), par)
        r1 = triple_correlations(d12, d13, d23, par.alpha)[0]
        si = np.linalg.inv(np.array([[1.0, r1], [r1, 1.0]]))
        qf = np.array([u2, u3]) @ si @ np.array([u2, u3])
        assert abs(ss - (qf - 2.0)) < 1e-2 * abs(qf - 2.0)

    def test_alpha_score_limit_equilateral(self):
        # the alpha-score's O(1/log delta) correction enters through the
        # alpha-derivative of the correlations, which vanishes when all
        # sides are equal; the stated tolerance is pinned there
        par = ModelParams(1.0, 0.9)
        delta = 1e-4
        u2, u3 = 1.4, -0.6
        g = TripleGeometry(delta, delta, delta)
        a = delta ** (par.alpha / 2.0)
        z1 = 1.2
        _, ss, sa = triple_log_density(g, z1, z1 * np.exp(a * u2),
                                       z1 * np.exp(a * u3), par)
        si = np.linalg.inv(np.array([[1.0, 0.5], [0.5, 1.0]]))
        qf = np.array([u2, u3]) @ si @ np.array([u2, u3])
        lim = (qf - 2.0) / 2.0
        assert abs(sa / np.log(delta) - lim) < 1e-2 * abs(lim)
        assert abs(ss - (qf - 2.0)) < 1e-2 * abs(qf - 2.0)

    def test_alternative_anchor_same_limit(self):
        par = ModelParams(1.0, 0.9)
        delta = 1e-4
        d12, d13, d23 = 1.0, 1.3, 0.9
        u2, u3 = 1.4, -0.6
        a12 = (delta * d12) ** (par.alpha / 2.0)
        a13 = (delta * d13) ** (par.alpha / 2.0)
        a23 = (delta * d23) ** (par.alpha / 2.0)
        z1 = 1.2
        z2 = z1 * np.exp(a12 * u2)
        z3 = z1 * np.exp(a13 * u3)
        r1, r2, _ = triple_correlations(d12, d13, d23, par.alpha)
        q1 = np.array([u2, u3]) @ np.linalg.inv(
            np.array([[1.0, r1], [r1, 1.0]])) @ np.array([u2, u3])
        ut1 = np.log(z1 / z2) / a12
        ut3 = np.log(z3 / z2) / a23
        q2 = np.array([ut1, ut3]) @ np.linalg.inv(
            np.array([[1.0, r2], [r2, 1.0]])) @ np.array([ut1, ut3])
        assert np.isclose(q1, q2, rtol=1e-10)

    def test_batch_matches_scalar(self, rng, params):
        n = 25
        d12 = rng.uniform(0.2, 0.6, size=n)
        d13 = rng.uniform(0.2, 0.6, size=n)
        d23 = np.abs(d12 - d13) + rng.uniform(0.05, 0.3, size=n)
        z = rng.uniform(0.2, 5.0, size=(n, 3))
        batch, valid = triple_loglik_terms(z[:, 0], z[:, 1], z[:, 2],
                                           d12, d13, d23, params.sigma,
                                           params.alpha)
        for i in range(n):
            if not valid[i]:
                continue
            ref = triple_log_density(TripleGeometry(d12[i], d13[i], d23[i]),
                                     *z[i], params)[0]
            assert np.isclose(batch[i], ref, rtol=1e-10)

    def test_positivity_sweep(self, rng):
        count = 0
        for _ in range(200):
            pts = rng.uniform(-0.5, 0.5, size=(3, 2))
            z = rng.uniform(0.05, 20.0, size=3)
            s, a = rng.uniform(0.3, 3.0), rng.uniform(0.1, 0.95)
            try:
                g = TripleGeometry.from_sites(*pts)
                logf, _, _ = triple_log_density(g, *z, ModelParams(s, a))
            except DegenerateGeometryError:
                continue
            assert np.isfinite(logf)
            count += 1
        assert count > 150


class TestIncrementLaws:
    def test_marginal_u_half_at_zero(self, params):
        for d in (1e-3, 0.1, 1.0):
            assert np.isclose(marginal_u_cdf(0.0, PairGeometry(d), params),
                              0.5, rtol=1e-14)

    def test_marginal_u_gaussian_limit(self):
        par = ModelParams(1.0, 0.9)
        us = np.linspace(-4.0, 4.0, 81)
        got = marginal_u_cdf(us, PairGeometry(1e-6), par)
        assert np.abs(got - ndtr(us)).max() < 1e-3

    def test_marginal_u_limits_and_monotone(self, params):
        g = PairGeometry(0.2)
        us = np.linspace(-30.0, 30.0, 301)
        vals = marginal_u_cdf(us, g, params)
        assert np.all(np.diff(vals) >= -1e-15)
        assert vals[-1] > 1.0 - 1e-9
        assert vals[0] < 1e-9

    def test_pair_u_cdf_gaussian_limit(self):
        par = ModelParams(1.0, 0.9)
        delta = 1e-4
        g = TripleGeometry(delta, 1.3 * delta, 0.9 * delta)
        r1 = g.correlations(par.alpha)[0]
        for u2 in (-1.5, 0.0, 1.0):
            for u3 in (-0.5, 0.5, 2.0):
                got = pair_u_cdf(u2, u3, g, par)
                assert abs(got - bvn_cdf(u2, u3, r1)) < 1e-3

    def test_pair_u_cdf_marginalizes(self, params):
        g = TripleGeometry(0.3, 0.4, 0.5)
        for u2 in (-1.0, 0.0, 1.5):
            got = pair_u_cdf(u2, 40.0, g, params)
            want = marginal_u_cdf(u2, PairGeometry(0.3), params)
            assert abs(got - want) < 1e-8
        assert abs(pair_u_cdf(40.0, 40.0, g, params) - 1.0) < 1e-12

    def test_conditional_u_limits(self, params):
        g = PairGeometry(0.25)
        a = g.a(params)
        for u in (-1.0, 0.2, 2.0):
            got = conditional_u_cdf(u, g, params, 1e12)
            assert np.isclose(got, ndtr(a / 2.0 + u), rtol=1e-10)
        assert conditional_u_cdf(-40.0, g, params, 1.0) < 1e-12

    def test_conditional_mixes_to_marginal(self, params):
        g = PairGeometry(0.25)
        for u in (-0.8, 0.5, 1.7):
            def mix(eta):
                # unit Frechet density eta^-2 exp(-1/eta)
                return conditional_u_cdf(u, g, params, eta) \
                    * eta ** (-2.0) * np.exp(-1.0 / eta)
            val, err = integrate.quad(mix, 0.0, np.inf, epsabs=1e-10,
                                      epsrel=1e-10, limit=300)
            want = marginal_u_cdf(u, g, params)
            assert abs(val - want) < 1e-6
