"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
The full module takes several minutes on one core.
"""
import itertools
import math
from functools import lru_cache

import numpy as np
import pytest

from gspam.cli import parse_config, run_trial
from gspam.components import Target, estimate_components, fit_component, sup_error
from gspam.hashing import build_hash_family, combined_hessian_grid, family_size
from gspam.model import QueryOracle, benchmark_problem, center_components, make_benchmark
from gspam.quadrature import expect_first, expect_joint, expect_second, expect_univariate
from gspam.recovery import Ensembles, derive_params_noiseless
from gspam.sensing import (
    draw_ensemble,
    gradient_measurements,
    gradient_measurements_batch,
    hessian_measurement_matrix,
    sparse_recover,
    sparse_recover_batch,
)

TRIALS = 5
GAUSSIAN_LEVELS = [(1e-4, 50, 20), (1e-3, 85, 36), (1e-2, 90, 40)]


@lru_cache(maxsize=None)
def _trials(name, d, T=None, C_tilde=None, noise=None, trials=TRIALS):
    raw = {"benchmark": {"name": name, "d": d}, "trials": trials, "seed": 2024}
    if T is not None:
        raw["benchmark"]["T"] = T
    if C_tilde is not None:
        raw["C_tilde"] = C_tilde
    if noise is not None:
        level, N1, N2 = noise
        raw["noise"] = {"mode": "gaussian", "level": level, "N1": N1, "N2": N2}
    cfg = parse_config(raw)
    return tuple(run_trial(cfg, t) for t in range(cfg.trials))


def _rate(rows):
    return sum(r["success"] for r in rows) / len(rows)


def _mean_queries(rows):
    return float(np.mean([r["queries"] for r in rows if r["completed"]]))


def _r_squared(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    return 1 - resid @ resid / np.sum((y - y.mean()) ** 2)


def _centered_truth(g):
    mean = expect_univariate(g)
    return lambda x: g(x) - mean


class TestAcceptance:
    def test_1_phase_transition(self, verdict):
        rates = {d: _rate(_trials("f1", d)) for d in (100, 500, 1000)}
        f2 = {c: _rate(_trials("f2", 100, C_tilde=c)) for c in (5.6, 2.0, 1.0)}
        ok = all(r >= 0.8 for r in rates.values()) and f2[2.0] < f2[5.6] and f2[1.0] < f2[5.6]
        verdict(1, ok, f"f1 success by d {rates}; f2 success by C_tilde {f2}")

    def test_2_gaussian_noise(self, verdict):
        clean = _mean_queries(_trials("f1", 100))
        parts, ok = [], True
        for level in GAUSSIAN_LEVELS:
            rows = _trials("f1", 100, noise=level)
            rate, ratio = _rate(rows), _mean_queries(rows) / clean
            ok &= rate >= 0.8 and 30 <= ratio <= 300
            parts.append(f"s2={level[0]:g}: rate {rate:.1f}, x{ratio:.0f}")
        verdict(2, ok, "; ".join(parts))

    def test_3_scaling_in_d(self, verdict):
        ratio = _mean_queries(_trials("f1", 1000)) / _mean_queries(_trials("f1", 100))
        limit = 1.5 * (math.log(1000) / math.log(100)) ** 3
        verdict(3, ratio <= limit, f"queries(d=1000)/queries(d=100) = {ratio:.2f} (limit {limit:.2f})")

    def test_4_scaling_in_k(self, verdict):
        d, xs, ys = 500, [], []
        for T in range(1, 11):
            rows = _trials("f3", d, T=T, trials=1)
            k = make_benchmark("f3", d, T).k
            xs.append(k * math.log(d / k))
            ys.append(_mean_queries(rows))
        r2 = _r_squared(xs, ys)
        verdict(4, r2 >= 0.95, f"R^2 of queries vs k ln(d/k) = {r2:.4f}")

    def test_5_scaling_in_rho(self, verdict):
        d, xs, ys = 500, [], []
        for T in range(2, 11):
            rows = _trials("f4", d, T=T, trials=1)
            rho = make_benchmark("f4", d, T).rho_m
            xs.append(rho * math.log(d / rho))
            ys.append(_mean_queries(rows))
        r2 = _r_squared(xs, ys)
        verdict(5, r2 >= 0.95, f"R^2 of queries vs rho ln(d/rho) = {r2:.4f}")

    def test_6_solver_oracle(self, verdict):
        rng = np.random.default_rng(6)
        matches, worst = 0, 0.0
        for i in range(100):
            V = draw_ensemble(12, 20, rng=rng).matrix
            z = np.zeros(20)
            z[rng.choice(20, 2, replace=False)] = rng.choice([-1, 1], 2) * rng.uniform(0.5, 3, 2)
            y = V @ z
            best, best_res = None, np.inf
            for S in itertools.combinations(range(20), 2):
                coef = np.linalg.lstsq(V[:, S], y, rcond=None)[0]
                res = np.linalg.norm(V[:, S] @ coef - y)
                if res < best_res:
                    best_res, best = res, (S, coef)
            ref = np.zeros(20)
            ref[list(best[0])] = best[1]
            zh = sparse_recover(V, y, 2)
            if set(np.flatnonzero(zh)) == set(best[0]):
                matches += 1
                worst = max(worst, float(np.max(np.abs(zh - ref))))
        ok = matches >= 99 and worst <= 1e-6
        verdict(6, ok, f"support matches {matches}/100, max value error on matches {worst:.1e}")

    def test_7_exactness(self, verdict):
        # central differences on a random quadratic
        rng = np.random.default_rng(7)
        d = 30
        model = make_benchmark("f1", d)
        V = draw_ensemble(20, d, rng=rng)
        x = rng.uniform(-0.8, 0.8, d)
        g = np.zeros(d)
        g[0], g[1], g[2], g[3], g[4] = 2, -6 * x[1], 4 * x[3], 4 * x[2] - 5 * x[4], -5 * x[3]
        cd_err = float(np.max(np.abs(gradient_measurements(QueryOracle(model), x, V, 0.05).values - V.matrix @ g)))

        # Hessian rows at every grid point of the noiseless run for d = 100
        d = 100
        model = make_benchmark("f1", d)
        params = derive_params_noiseless(benchmark_problem("f1", model), d)
        H = np.zeros((d, d))
        H[1, 1] = -6
        H[2, 3] = H[3, 2] = 4
        H[3, 4] = H[4, 3] = -5
        fam = build_hash_family(d, family_size(d), rng=1)
        ens = Ensembles(draw_ensemble(params.m_v, d, rng=2), draw_ensemble(params.m_v_prime, d, rng=3))
        oracle = QueryOracle(model)
        row_err, off_max = 0.0, 0.0
        for x in combined_hessian_grid(fam, params.m_x).points:
            bases = np.vstack([x, x + params.mu1 * ens.V_prime.matrix])
            G = sparse_recover_batch(ens.V, gradient_measurements_batch(oracle, bases, ens.V, params.mu), params.k)
            rows = sparse_recover_batch(ens.V_prime, hessian_measurement_matrix(G[:, 0], G[:, 1:].T, params.mu1), 3)
            row_err = max(row_err, float(np.max(np.abs(rows - H))))
            off_max = max(off_max, float(np.max(np.abs(rows[:, 5:]))))
        ok = cd_err <= 1e-12 and row_err <= 1e-9 and off_max <= params.tau_prime / 10
        verdict(7, ok, f"central-difference error {cd_err:.1e}; Hessian-row error {row_err:.1e}; "
                       f"rows outside S {off_max:.1e} (tau'/10 = {params.tau_prime / 10:.3f})")

    def test_8_hash_certificate(self, verdict):
        parts, ok = [], True
        for d in (100, 500, 1000):
            size = family_size(d, 1.7)
            fam = build_hash_family(d, size, rng=d)
            cols = fam.colors.T
            separated = all(np.any(cols[i] != cols[j]) for i, j in itertools.combinations(range(d), 2))
            ok &= separated and 8 <= size <= 12
            parts.append(f"d={d}: size {size}, separating {separated}")
        verdict(8, ok, "; ".join(parts))

    def test_9_component_rates(self, verdict):
        g = lambda x: 10 * np.sin(np.pi * x)
        truth = _centered_truth(g)
        ns = np.array([8, 16, 32, 64])
        rng = np.random.default_rng(9)
        clean, noisy = [], []
        for n in ns:
            t = np.linspace(-1, 1, n)
            clean.append(sup_error(fit_component(Target("univariate", 1), g(t), n), truth))
            y = g(t) + rng.uniform(-0.05, 0.05, n)
            noisy.append(sup_error(fit_component(Target("univariate", 1), y, n, "bounded"), truth))
        slope = np.polyfit(np.log(ns), np.log(clean), 1)[0]
        shift = max(abs(a - b) for a, b in zip(noisy, clean))
        ok = abs(slope + 3) <= 0.7 and shift <= 0.2
        verdict(9, ok, f"log-log slope {slope:.2f}; largest plateau shift at eps=0.05 {shift:.3f}")

    def test_10_centering(self, verdict):
        worst = 0.0
        ys = np.linspace(-1, 1, 9)
        for name in ("f1", "f2"):
            model = make_benchmark(name, 20)
            fitted = estimate_components(QueryOracle(model), model.S1, model.S2, n=32)
            for est in fitted.estimates.values():
                if est.arity == 1:
                    worst = max(worst, abs(expect_univariate(est, 64)))
                    continue
                worst = max(worst, abs(expect_joint(est, 64)))
                dl, dlp = est.target.degrees
                if dl == 1 or (dl > 1 and dlp > 1):
                    worst = max(worst, float(np.max(np.abs(expect_first(est, ys, 64)))))
                if dlp == 1 or (dl > 1 and dlp > 1):
                    worst = max(worst, float(np.max(np.abs(expect_second(est, ys, 64)))))
            for comp in center_components(model, 64).univariate.values():
                worst = max(worst, abs(expect_univariate(comp.evaluator, 64)))
        model = make_benchmark("f1", 100)
        fitted = estimate_components(QueryOracle(model), model.S1, model.S2)
        X = np.random.default_rng(10).uniform(-1, 1, size=(50, 100))
        recon = float(np.max(np.abs(fitted(X) - QueryOracle(model).query_batch(X))))
        ok = worst <= 1e-6 and recon <= 1e-3
        verdict(10, ok, f"largest centered expectation {worst:.1e}; f1 reconstruction error {recon:.1e}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
