import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import dblquad, quad

from gspam.model import (
    ComponentFunction,
    ConfigurationError,
    DomainError,
    GroundTruthModel,
    NoiseSpec,
    ProblemParams,
    QueryOracle,
    benchmark_problem,
    center_components,
    degree,
    derivative_sup_norms,
    evaluate,
    make_benchmark,
)
from gspam.quadrature import expect_first, expect_joint, expect_second, expect_univariate, uniform_rule


def _f1_by_hand(x):
    return 2 * x[0] - 3 * x[1] ** 2 + 4 * x[2] * x[3] - 5 * x[3] * x[4]


class TestQuadrature:
    def test_weights_sum_to_one(self):
        _, w = uniform_rule(64)
        assert w.sum() == pytest.approx(1.0, abs=1e-14)

    @pytest.mark.parametrize("g", [np.cos, np.exp, lambda x: np.sin(np.pi * x) ** 2, lambda x: np.abs(x) ** 3])
    def test_matches_adaptive_quadrature(self, g):
        ref = quad(g, -1, 1, epsabs=1e-13)[0] / 2
        assert expect_univariate(g) == pytest.approx(ref, abs=1e-10)

    def test_partial_and_joint_means(self):
        g = lambda x, y: np.sin(np.pi * x * y) + x**2 * y
        ys = np.array([-0.7, 0.1, 0.9])
        ref_first = [quad(lambda x: g(x, y), -1, 1)[0] / 2 for y in ys]
        ref_second = [quad(lambda y: g(x, y), -1, 1)[0] / 2 for x in ys]
        np.testing.assert_allclose(expect_first(g, ys), ref_first, atol=1e-10)
        np.testing.assert_allclose(expect_second(g, ys), ref_second, atol=1e-10)
        ref = dblquad(lambda y, x: np.exp(-2 * x * y), -1, 1, -1, 1)[0] / 4
        assert expect_joint(lambda x, y: np.exp(-2 * x * y)) == pytest.approx(ref, abs=1e-10)


class TestEvaluate:
    def test_f1_origin(self):
        m = make_benchmark("f1", 10)
        assert evaluate(m, np.zeros(10)) == 0.0

    def test_f1_ones(self):
        m = make_benchmark("f1", 10)
        x = np.r_[np.ones(5), np.zeros(5)]
        assert evaluate(m, x) == pytest.approx(-2.0)

    def test_f2_origin(self):
        m = make_benchmark("f2", 10)
        assert evaluate(m, np.zeros(10)) == pytest.approx(10.0)

    def test_vectorised_matches_hand_formula(self):
        m = make_benchmark("f1", 8)
        X = np.random.default_rng(0).uniform(-1.1, 1.1, size=(40, 8))
        np.testing.assert_allclose(m.evaluate(X), [_f1_by_hand(x) for x in X], rtol=0, atol=1e-12)

    def test_domain_error_names_coordinate(self):
        m = make_benchmark("f1", 10, r=0.1)
        x = np.zeros(10)
        x[6] = 1.2
        with pytest.raises(DomainError, match="coordinate 7") as info:
            m.evaluate(x)
        assert info.value.coordinate == 7

    def test_enlarged_box_is_allowed(self):
        m = make_benchmark("f1", 10, r=0.1)
        assert np.isfinite(m.evaluate(np.full(10, 1.1)))


class TestStructure:
    @pytest.mark.parametrize("l, expected", [(4, 2), (3, 1), (1, 0), (5, 1)])
    def test_degree_f1(self, l, expected):
        assert degree(make_benchmark("f1", 20), l) == expected

    def test_degree_out_of_range(self):
        with pytest.raises(IndexError):
            degree(make_benchmark("f1", 20), 21)

    def test_f1_pattern(self):
        m = make_benchmark("f1", 500)
        assert m.S1 == {1, 2}
        assert m.S2 == {(3, 4), (4, 5)}
        assert (m.k, m.rho_m) == (5, 2)

    def test_f3_sparsity(self):
        m = make_benchmark("f3", 500, T=2)
        assert (m.k, m.rho_m) == (10, 2)

    def test_f4_sparsity(self):
        m = make_benchmark("f4", 500, T=5)
        assert (m.k, m.rho_m) == (13, 5)

    @pytest.mark.parametrize("T", range(2, 11))
    def test_f4_degree_equals_T(self, T):
        m = make_benchmark("f4", 500, T=T)
        assert m.rho_m == T and m.k == 13

    def test_coefficients_frozen_by_seed(self):
        a = make_benchmark("f3", 50, T=3, seed=11)
        b = make_benchmark("f3", 50, T=3, seed=11)
        c = make_benchmark("f3", 50, T=3, seed=12)
        X = np.random.default_rng(1).uniform(-1, 1, size=(5, 50))
        np.testing.assert_array_equal(a(X), b(X))
        assert not np.allclose(a(X), c(X))

    def test_f3_coefficients_in_range(self):
        m = make_benchmark("f3", 50, T=1, seed=3)
        # the linear coefficient is f(e1) - f(0)
        e1 = np.zeros(50)
        e1[0] = 1
        assert 2 <= m(e1) - m(np.zeros(50)) <= 5

    @pytest.mark.parametrize("name, d, T", [("f1", 4, None), ("f3", 9, 2), ("f4", 12, 5), ("f4", 20, 18), ("f3", 50, 0)])
    def test_too_small_dimension(self, name, d, T):
        with pytest.raises(ConfigurationError):
            make_benchmark(name, d, T)

    @pytest.mark.parametrize("name, T", [("f1", None), ("f2", None), ("f3", 4), ("f4", 7)])
    def test_s1_disjoint_from_interaction_vars(self, name, T):
        m = make_benchmark(name, 100, T)
        assert not (m.S1 & m.S2var)

    def test_rejects_overlap(self):
        lin = ComponentFunction(1, lambda x: x)
        prod = ComponentFunction(2, lambda x, y: x * y)
        with pytest.raises(ConfigurationError, match="disjoint"):
            GroundTruthModel(5, {1: lin}, {(1, 2): prod})

    def test_rejects_unordered_pair(self):
        prod = ComponentFunction(2, lambda x, y: x * y)
        with pytest.raises(ConfigurationError):
            GroundTruthModel(5, {}, {(3, 2): prod})

    def test_model_is_immutable(self):
        m = make_benchmark("f1", 10)
        with pytest.raises(Exception):
            m.d = 11
        with pytest.raises(TypeError):
            m.univariate[3] = m.univariate[1]

    def test_f1_mixed_partials_vanish_off_support(self):
        m = make_benchmark("f1", 8)
        rng = np.random.default_rng(5)
        h = 1e-3
        pairs = [(l, lp) for l in range(8) for lp in range(l + 1, 8) if (l + 1, lp + 1) not in m.S2]
        for x in rng.uniform(-0.9, 0.9, size=(20, 8)):
            for l, lp in pairs:
                el, elp = np.eye(8)[l] * h, np.eye(8)[lp] * h
                mixed = (m(x + el + elp) - m(x + el - elp) - m(x - el + elp) + m(x - el - elp)) / (4 * h * h)
                assert abs(mixed) <= 1e-6


class TestProblemParams:
    def test_benchmark_values(self):
        m = make_benchmark("f1", 100)
        p = benchmark_problem("f1", m)
        assert (p.lambda1, p.lambda2, p.D1, p.D2, p.B3, p.k, p.rho) == (0.3, 1.0, 2.0, 3.0, 6.0, 5, 2)

    @pytest.mark.parametrize("bad", [dict(D1=0), dict(lambda1=2.5), dict(k=0), dict(B3=-1)])
    def test_rejects_invalid(self, bad):
        base = dict(D1=1.0, D2=1.0, lambda1=0.5, lambda2=0.5, B3=1.0, k=3, rho=1)
        base.update(bad)
        with pytest.raises(ConfigurationError):
            ProblemParams(**base)


class TestCentering:
    def test_odd_univariate_unchanged(self):
        m = GroundTruthModel(3, {1: ComponentFunction(1, lambda x: 2 * x)}, {})
        c = center_components(m)
        x = np.linspace(-1, 1, 7)
        np.testing.assert_allclose(c.univariate[1](x), 2 * x, atol=1e-14)
        assert c.constant == pytest.approx(0.0, abs=1e-14)

    def test_square_shifted_by_its_mean(self):
        m = GroundTruthModel(3, {1: ComponentFunction(1, lambda x: -3 * x**2)}, {})
        c = center_components(m)
        x = np.linspace(-1, 1, 7)
        # E[-3 U^2] = -1 for U uniform on [-1, 1]
        np.testing.assert_allclose(c.univariate[1](x), -3 * x**2 + 1, atol=1e-13)
        assert c.constant == pytest.approx(-1.0, abs=1e-13)

    @pytest.mark.parametrize("name, T", [("f1", None), ("f2", None), ("f4", 4)])
    def test_values_unchanged(self, name, T):
        m = make_benchmark(name, 20, T)
        c = center_components(m)
        X = np.random.default_rng(2).uniform(-1, 1, size=(10, 20))
        np.testing.assert_allclose(c(X), m(X), atol=1e-10)
        # without the constant the two differ by c alone
        no_const = GroundTruthModel(20, c.univariate, c.bivariate, c.marginals, 0.0)
        np.testing.assert_allclose(m(X) - no_const(X), c.constant, atol=1e-10)

    @pytest.mark.parametrize("name, T", [("f1", None), ("f2", None), ("f3", 2), ("f4", 3)])
    def test_centered_expectations_vanish(self, name, T):
        m = center_components(make_benchmark(name, 30, T), quadrature_n=64)
        ys = np.linspace(-1, 1, 9)
        for comp in list(m.univariate.values()) + list(m.marginals.values()):
            assert abs(expect_univariate(comp.evaluator, 64)) <= 1e-6
        for (l, lp), comp in m.bivariate.items():
            g = comp.evaluator
            dl, dlp = m.degree(l), m.degree(lp)
            assert abs(expect_joint(g, 64)) <= 1e-6
            if dl == 1 and dlp > 1 or dl > 1 and dlp > 1:
                assert np.max(np.abs(expect_first(g, ys, 64))) <= 1e-6
            if dlp == 1 and dl > 1 or dl > 1 and dlp > 1:
                assert np.max(np.abs(expect_second(g, ys, 64))) <= 1e-6

    def test_f1_marginal_is_zero(self):
        m = center_components(make_benchmark("f1", 10))
        x = np.linspace(-1, 1, 11)
        np.testing.assert_allclose(m.marginals[4].evaluator(x), 0.0, atol=1e-12)

    def test_f2_marginal_against_direct_integration(self):
        m = center_components(make_benchmark("f2", 10))
        u = 0.37
        # phi_4(u) = E_3[10 sin(pi x3 u)] - E + E_5[5 exp(-2 u x5)] - E
        g1 = lambda x, y: 10 * np.sin(np.pi * x * y)
        g2 = lambda x, y: 5 * np.exp(-2 * x * y)
        e1 = quad(lambda x: g1(x, u), -1, 1)[0] / 2 - dblquad(lambda y, x: g1(x, y), -1, 1, -1, 1)[0] / 4
        e2 = quad(lambda y: g2(u, y), -1, 1)[0] / 2 - dblquad(lambda y, x: g2(x, y), -1, 1, -1, 1)[0] / 4
        assert m.marginals[4].evaluator(np.array([u]))[0] == pytest.approx(e1 + e2, abs=1e-10)

    def test_rejects_small_quadrature(self):
        with pytest.raises(ConfigurationError):
            center_components(make_benchmark("f1", 10), quadrature_n=4)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 3))
    def test_centering_is_idempotent(self, a, b, c, case):
        pairs = [{(1, 2): None}, {(1, 2): None, (2, 3): None}, {(1, 2): None, (1, 3): None},
                 {(1, 2): None, (1, 3): None, (2, 4): None}][case]
        g = lambda x, y: a * x * y + b * np.sin(x + 2 * y) + c * x**2
        biv = {p: ComponentFunction(2, g) for p in pairs}
        m = GroundTruthModel(6, {5: ComponentFunction(1, lambda x: a * np.exp(x))}, biv)
        once = center_components(m)
        twice = center_components(once)
        X = np.random.default_rng(0).uniform(-1, 1, size=(6, 6))
        assert twice.constant == pytest.approx(once.constant, abs=1e-9)
        for p in pairs:
            np.testing.assert_allclose(twice.bivariate[p](X[:, 0], X[:, 1]), once.bivariate[p](X[:, 0], X[:, 1]), atol=1e-9)
        np.testing.assert_allclose(twice(X), m(X), atol=1e-9)


class TestSmoothness:
    def test_f1_declared_third_derivative_bound_holds(self):
        m = make_benchmark("f1", 10)
        for comp in list(m.univariate.values()) + list(m.bivariate.values()):
            assert derivative_sup_norms(comp)[3] <= comp.smoothness_bounds[3] * (1 + 1e-3)

    def test_sine_derivatives(self):
        comp = ComponentFunction(1, lambda x: np.sin(np.pi * x))
        norms = derivative_sup_norms(comp, r=0.0, n=2001, h=1e-3)
        np.testing.assert_allclose(norms, [1, np.pi, np.pi**2, np.pi**3], rtol=1e-3)


class TestOracle:
    def test_noiseless_counts_resamples(self):
        m = make_benchmark("f1", 10)
        o = QueryOracle(m)
        x = np.r_[np.ones(5), np.zeros(5)]
        assert o.query(x, resamples=7) == pytest.approx(-2.0)
        assert o.count == 7
        o.query_batch(np.zeros((4, 10)), resamples=3)
        assert o.count == 19

    def test_gaussian_resampling_concentrates(self):
        m = make_benchmark("f1", 10)
        o = QueryOracle(m, NoiseSpec.gaussian(1e-2), seed=3)
        x = np.full(10, 0.3)
        vals = np.array([o.query(x, resamples=10000) for _ in range(20)])
        # sigma / sqrt(N) = 1e-3, so 5e-3 is five standard deviations
        assert np.all(np.abs(vals - m(x)) < 5e-3)
        assert o.count == 200000

    def test_gaussian_variance(self):
        m = make_benchmark("f1", 10)
        o = QueryOracle(m, NoiseSpec.gaussian(0.04), seed=4)
        z = o.query_batch(np.zeros((20000, 10)))
        assert np.std(z) == pytest.approx(0.2, rel=0.03)
        assert abs(np.mean(z)) < 4 * 0.2 / math.sqrt(20000)

    @pytest.mark.parametrize("pattern", ["uniform", "sign"])
    def test_bounded_noise_is_strict(self, pattern):
        m = make_benchmark("f1", 10)
        o = QueryOracle(m, NoiseSpec.bounded(0.1, pattern), seed=5)
        X = np.random.default_rng(0).uniform(-1, 1, size=(5000, 10))
        z = o.query_batch(X) - m(X)
        assert np.all(np.abs(z) < 0.1)

    def test_same_stream_same_noise(self):
        m = make_benchmark("f1", 10)
        a = QueryOracle(m, NoiseSpec.gaussian(1.0), seed=9)
        b = QueryOracle(m, NoiseSpec.gaussian(1.0), seed=9)
        X = np.zeros((3, 10))
        np.testing.assert_array_equal(a.query_batch(X, stream=(1, 2)), b.query_batch(X, stream=(1, 2)))
        assert not np.array_equal(a.query_batch(X, stream=(1, 3)), b.query_batch(X, stream=(1, 2)))

    def test_call_index_streams_reproducible(self):
        m = make_benchmark("f1", 10)
        runs = []
        for _ in range(2):
            o = QueryOracle(m, NoiseSpec.gaussian(1.0), seed=1)
            runs.append([o.query(np.zeros(10)) for _ in range(4)])
        assert runs[0] == runs[1]
        assert len(set(runs[0])) == 4

    def test_domain_error_propagates(self):
        o = QueryOracle(make_benchmark("f1", 10))
        with pytest.raises(DomainError):
            o.query(np.full(10, 2.0))

    def test_rejects_zero_resamples(self):
        o = QueryOracle(make_benchmark("f1", 10))
        with pytest.raises(ValueError):
            o.query(np.zeros(10), resamples=0)

    def test_concurrent_counting(self):
        from concurrent.futures import ThreadPoolExecutor

        o = QueryOracle(make_benchmark("f1", 10), NoiseSpec.gaussian(1.0))
        with ThreadPoolExecutor(4) as pool:
            list(pool.map(lambda i: o.query_batch(np.zeros((5, 10)), 2, stream=(i,)), range(100)))
        assert o.count == 1000

    @pytest.mark.parametrize("bad", [dict(mode="loud", level=1.0), dict(mode="gaussian", level=0.0)])
    def test_invalid_noise(self, bad):
        with pytest.raises(ConfigurationError):
            NoiseSpec(**bad)
