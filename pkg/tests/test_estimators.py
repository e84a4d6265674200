import numpy as np
import pytest

from brcl.estimators import (CLObjectiveSpec, brent_max, cl2_objective,
                             cl3_objective, fit_alpha, fit_joint, fit_sigma,
                             rate_diagnostics, rate_normalizer)
from brcl.gaussfield import ModelParams
from brcl.geometry import (EdgeSet, TripleSet, Window, delaunay, extract_edges,
                           extract_triples, guard_margin_for, sample_poisson)
from brcl.likelihood import (PairGeometry, TripleGeometry, pair_log_density,
                             triple_log_density)
from brcl.maxstable import simulate_br

C = Window(0.5)


def br_dataset(intensity, seed, params, mode="exact-extremal"):
    sp = sample_poisson(intensity, Window(0.5, guard_margin_for(intensity)),
                        seed)
    tri = delaunay(sp.points)
    edges = extract_edges(tri, C)
    triples = extract_triples(tri, C)
    sample = simulate_br(tri.vertices, params, seed + 17, mode=mode)
    return sample, edges, triples


class TestObjectives:
    def test_single_pair_equals_density(self, params):
        verts = np.array([[0.0, 0.0], [0.2, 0.1], [5.0, 5.0]])
        tri = delaunay(verts)
        edges = extract_edges(tri, C)
        one = EdgeSet(indices=edges.indices[:1], vertices=tri.vertices)
        z = np.array([0.8, 1.7, 1.0])
        got = cl2_objective(z, one, 1.1, 0.6)
        x1 = tri.vertices[one.indices[0, 0]]
        x2 = tri.vertices[one.indices[0, 1]]
        want = pair_log_density(PairGeometry.from_sites(x1, x2),
                                z[one.indices[0, 0]], z[one.indices[0, 1]],
                                ModelParams(1.1, 0.6))[0]
        assert np.isclose(got, want, rtol=1e-10)

    def test_storage_order_invariance(self, params):
        sample, edges, triples = br_dataset(300, 2, params)
        rev = EdgeSet(indices=edges.indices[::-1].copy(),
                      vertices=edges.vertices)
        a = cl2_objective(sample.eta, edges, 1.0, 0.5)
        b = cl2_objective(sample.eta, rev, 1.0, 0.5)
        assert np.isclose(a, b, rtol=1e-13)

    def test_single_triple_equals_density(self, params):
        verts = np.array([[0.0, 0.0], [0.3, 0.0], [0.15, 0.26]])
        tri = delaunay(verts)
        triples = extract_triples(tri, C)
        z = np.array([0.9, 1.2, 0.7])
        got = cl3_objective(z, triples, 1.0, 0.5)
        i1, i2, i3 = triples.indices[0]
        want = triple_log_density(
            TripleGeometry.from_sites(tri.vertices[i1], tri.vertices[i2],
                                      tri.vertices[i3]),
            z[i1], z[i2], z[i3], params)[0]
        assert np.isclose(got, want, rtol=1e-10)

    def test_sigma_derivative_matches_scores(self, params):
        sample, edges, triples = br_dataset(400, 3, params)
        h = 1e-5
        fd = (cl2_objective(sample.eta, edges, 1.0 + h, 0.5)
              - cl2_objective(sample.eta, edges, 1.0 - h, 0.5)) / (2 * h)
        scores = 0.0
        for k in range(edges.count):
            i, j = edges.indices[k]
            g = PairGeometry.from_sites(edges.vertices[i], edges.vertices[j])
            scores += pair_log_density(g, sample.eta[i], sample.eta[j],
                                       params)[1]
        assert np.isclose(fd, scores, rtol=1e-6)

    def test_triple_sigma_derivative_matches_scores(self, params):
        sample, edges, triples = br_dataset(200, 4, params)
        sub = TripleSet(indices=triples.indices[:40], vertices=triples.vertices)
        h = 1e-5
        fd = (cl3_objective(sample.eta, sub, 1.0 + h, 0.5)
              - cl3_objective(sample.eta, sub, 1.0 - h, 0.5)) / (2 * h)
        scores = 0.0
        for row in sub.indices:
            i1, i2, i3 = row
            g = TripleGeometry.from_sites(*sub.vertices[[i1, i2, i3]])
            scores += triple_log_density(g, *sample.eta[[i1, i2, i3]],
                                         params)[1]
        assert np.isclose(fd, scores, rtol=1e-6)

    def test_scaling_equivariance(self, params):
        # evaluating the likelihood of t-scaled data under the t-scaled
        # model shifts every pairwise objective curve by the same constant
        sample, edges, triples = br_dataset(300, 5, params)
        t = 3.7
        m = edges.count
        sigmas = np.linspace(0.6, 1.8, 7)
        base = np.array([cl2_objective(sample.eta, edges, s, 0.5)
                         for s in sigmas])
        scaled_obj = np.array(
            [cl2_objective(t * sample.eta / t, edges, s, 0.5)
             - 2.0 * m * np.log(t) for s in sigmas])
        shifted = base - 2.0 * m * np.log(t)
        assert np.allclose(scaled_obj, shifted, rtol=1e-12)
        assert sigmas[np.argmax(scaled_obj)] == sigmas[np.argmax(base)]

    def test_nonfinite_term_reported(self, params):
        verts = np.array([[0.0, 0.0], [0.2, 0.1], [5.0, 5.0]])
        tri = delaunay(verts)
        edges = extract_edges(tri, C)
        z = np.array([0.8, np.inf, 1.0])
        with pytest.raises(ArithmeticError):
            cl2_objective(z, edges, 1.0, 0.5)


class TestBrentMax:
    def test_quadratic_exact(self):
        x, fx, evals, width = brent_max(lambda t: -(t - 0.37) ** 2, 0.0, 1.0)
        assert abs(x - 0.37) < 1e-5
        assert width <= 2.05e-6

    def test_grid_oracle_agreement(self, params):
        hits = 0
        for seed in range(20):
            sample, edges, _ = br_dataset(250, 100 + seed, params)
            fit = fit_sigma(2, sample.eta, edges, 0.5, bounds=(0.3, 3.0))
            grid = np.linspace(0.3, 3.0, 2000)
            vals = [cl2_objective(sample.eta, edges, s, 0.5) for s in grid]
            best = grid[int(np.argmax(vals))]
            step = grid[1] - grid[0]
            assert abs(fit.estimate - best) <= step
            hits += fit.converged
        assert hits == 20

    def test_grid_oracle_agreement_triples(self, params):
        for seed in range(6):
            sample, _, triples = br_dataset(200, 300 + seed, params)
            fit = fit_alpha(3, sample.eta, triples, 1.0, bounds=(0.1, 0.9))
            grid = np.linspace(0.1, 0.9, 400)
            vals = [cl3_objective(sample.eta, triples, 1.0, a) for a in grid]
            best = grid[int(np.argmax(vals))]
            assert abs(fit.estimate - best) <= 2 * (grid[1] - grid[0])


class TestFits:
    def test_boundary_flagged(self, params):
        sample, edges, _ = br_dataset(400, 6, params)
        fit = fit_sigma(2, sample.eta, edges, 0.5, bounds=(2.0, 5.0))
        assert fit.boundary
        assert not fit.converged
        assert abs(fit.estimate - 2.0) < 1e-4

    def test_estimates_near_truth(self, params):
        sample, edges, triples = br_dataset(2000, 7, params)
        fs = fit_sigma(2, sample.eta, edges, 0.5)
        fa = fit_alpha(2, sample.eta, edges, 1.0)
        assert abs(fs.estimate - 1.0) < 0.25
        assert abs(fa.estimate - 0.5) < 0.15
        fs3 = fit_sigma(3, sample.eta, triples, 0.5)
        assert abs(fs3.estimate - 1.0) < 0.25

    def test_profile_unimodal_at_scale(self, params):
        sample, edges, _ = br_dataset(2000, 8, params)
        grid = np.linspace(0.4, 2.5, 120)
        vals = np.array([cl2_objective(sample.eta, edges, s, 0.5)
                         for s in grid])
        d = np.diff(vals)
        sign_changes = np.count_nonzero(np.diff(np.sign(d)) != 0)
        assert sign_changes <= 1

    def test_consistency_smoke(self, params):
        errs = []
        for n in (400, 1600):
            e_n = []
            for seed in range(6):
                sample, edges, _ = br_dataset(n, 500 + seed, params)
                fit = fit_sigma(2, sample.eta, edges, 0.5)
                e_n.append(abs(fit.estimate ** 2 - 1.0))
            errs.append(np.median(e_n))
        assert errs[1] < errs[0]

    def test_fit_joint_smoke(self, params):
        sample, edges, _ = br_dataset(800, 9, params)
        sigma, alpha, last = fit_joint(sample.eta, edges, order=2)
        assert 0.2 <= sigma <= 5.0
        assert 0.05 <= alpha <= 0.95

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            CLObjectiveSpec(order=4, fixed_param="alpha", fixed_value=0.5,
                            bounds=(0.2, 5.0))
        with pytest.raises(ValueError):
            CLObjectiveSpec(order=2, fixed_param="alpha", fixed_value=0.5,
                            bounds=(5.0, 0.2))


class TestRateDiagnostics:
    def test_prefactor_audit(self):
        n = 10_000.0
        m = 29_856
        got = rate_normalizer(2, "sigma2", n, 0.5, m)
        want = np.sqrt(3.0) / 3.0 * np.sqrt(m) * n ** -0.375
        assert np.isclose(got, want, rtol=1e-14)
        got_a = rate_normalizer(2, "alpha", n, 0.5, m)
        assert np.isclose(got_a, want / 2.0 * np.log(n), rtol=1e-14)
        got3 = rate_normalizer(3, "sigma2", n, 0.5, m)
        assert np.isclose(got3, np.sqrt(2.0) / 2.0 * np.sqrt(m) * n ** -0.375,
                          rtol=1e-14)

    def test_diagnostic_assembly(self, params):
        sample, edges, triples = br_dataset(600, 10, params)
        fs = fit_sigma(2, sample.eta, edges, 0.5)
        fa = fit_alpha(2, sample.eta, edges, 1.0)
        diag = rate_diagnostics(fs, fa, 600.0, 2, 1.0, 0.5, edges.count,
                                c_v=-0.75, localtime_sum=0.4)
        norm = rate_normalizer(2, "sigma2", 600.0, 0.5, edges.count)
        assert np.isclose(diag.normalized_sigma2_error,
                          norm * (fs.estimate ** 2 - 1.0), rtol=1e-14)
        assert np.isclose(diag.predicted_limit_sigma2, -0.75 * 0.4, rtol=1e-14)
        assert np.isclose(diag.predicted_limit_alpha, 0.75 * 0.4, rtol=1e-14)
        no_lt = rate_diagnostics(fs, None, 600.0, 2, 1.0, 0.5, edges.count)
        assert no_lt.predicted_limit_sigma2 is None
        assert no_lt.normalized_sigma2_error is not None
