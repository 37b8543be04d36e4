import logging

import numpy as np
import pytest

from partlyaalen.aalen import (FunctionWeights, HazardFloorError, OptimalWeights, SmoothedAlpha,
                               aalen_variance, fit_aalen, fit_aalen_optimal, smooth_alpha)
from partlyaalen.data import Dataset, RankError, build_time_grid, load_dataset
from partlyaalen.simulate import load_scenario, run_monte_carlo

from conftest import intercept_data


class TestThreeSubjects:
    def test_increments(self, three):
        fit = fit_aalen(three)
        np.testing.assert_allclose(fit.increments, [[0.5, -0.5], [0.0, 1.0]], atol=1e-12)
        np.testing.assert_allclose(fit.cumulative(2.0), [0.5, 0.5], atol=1e-12)
        np.testing.assert_array_equal(fit.cumulative(0.0), [0.0, 0.0])

    def test_increments_match_direct_solve(self, three):
        z = three.covariates
        G1 = z.T @ z
        G2 = z[1:].T @ z[1:]
        np.testing.assert_allclose(fit_aalen(three).increments,
                                   [np.linalg.solve(G1, z[0]), np.linalg.solve(G2, z[1])], atol=1e-12)

    def test_variance_at_one(self, three):
        fit = fit_aalen(three)
        np.testing.assert_allclose(fit.variance_path(1.0), [[0.25, -0.25], [-0.25, 0.25]], atol=1e-12)
        np.testing.assert_array_equal(fit.variance_path(0.0), np.zeros((2, 2)))

    def test_csv_layout(self, three):
        lines = fit_aalen(three).to_csv().splitlines()
        assert lines[0] == "time,A_1,A_2,se_1,se_2"
        assert len(lines) == 4


class TestNelsonAalen:
    times = [0.5, 1.0, 1.0, 2.0, 2.5, 3.0, 4.0]
    status = [1, 1, 0, 1, 0, 1, 1]

    def test_reduction(self):
        ds = intercept_data(self.times, self.status)
        fit = fit_aalen(ds)
        t, d = np.array(self.times), np.array(self.status)
        ev = np.unique(t[d == 1])
        dN = np.array([np.sum((t == s) & (d == 1)) for s in ev])
        Y = np.array([np.sum(t >= s) for s in ev])
        np.testing.assert_allclose(fit.increments[:, 0], dN / Y, rtol=1e-14)
        np.testing.assert_allclose(fit.cumulative.values[-1, 0], np.sum(dN / Y), rtol=1e-14)
        np.testing.assert_allclose(fit.variance_path.values[-1, 0, 0], np.sum(dN / Y ** 2), rtol=1e-14)

    def test_risk_set_option(self):
        fit = fit_aalen(intercept_data(self.times, self.status))
        np.testing.assert_allclose(aalen_variance(fit, "risk-set").values,
                                   aalen_variance(fit, "counting").values, rtol=1e-13)
        with pytest.raises(ValueError):
            aalen_variance(fit, "other")


class TestRankGuard:
    def test_identical_columns(self):
        ds = load_dataset("time,status,a,b\n1,1,1,1\n2,1,2,2\n3,0,1,1\n")
        with pytest.raises(RankError):
            fit_aalen(ds)

    def test_late_failure_truncates(self, caplog):
        ds = load_dataset("time,status,a,x\n1,1,1,1\n2,1,1,0\n3,1,1,0\n4,1,1,0\n")
        with caplog.at_level(logging.WARNING, logger="partlyaalen"):
            fit = fit_aalen(ds, build_time_grid(ds))
        assert fit.grid.tau == 1.0 and fit.warnings
        np.testing.assert_array_equal(fit.grid.knots, [0.0, 1.0])


class TestProperties:
    def test_weight_invariance(self, sim_small):
        _, ds = sim_small
        plain = fit_aalen(ds)
        scaled = fit_aalen(ds, weights=FunctionWeights(lambda s: np.full(ds.n, 3.7)))
        np.testing.assert_allclose(scaled.increments, plain.increments, rtol=1e-9, atol=1e-12)

    def test_variance_psd_and_nondecreasing(self, sim_small):
        _, ds = sim_small
        V = fit_aalen(ds).variance_path.values
        np.testing.assert_allclose(V, np.swapaxes(V, 1, 2), atol=1e-15)
        step = np.diff(V, axis=0)
        assert np.all(np.linalg.eigvalsh(V).min(axis=1) >= -1e-12)
        assert np.all(np.linalg.eigvalsh(step).min(axis=1) >= -1e-12)


class TestSmoothing:
    def test_single_jump_peak(self):
        sa = SmoothedAlpha(np.array([0.5]), np.array([[1.0]]), 0.1, 1.0)
        np.testing.assert_allclose(sa(0.5), [[7.5]])
        np.testing.assert_array_equal(sa(np.array([0.3, 0.65])), [[0.0], [0.0]])

    def test_mass_preserved(self, sim_small):
        _, ds = sim_small
        fit = fit_aalen(ds)
        sa = smooth_alpha(fit)
        x, w = np.polynomial.legendre.leggauss(40)
        edges = np.linspace(0, fit.grid.tau, 201)
        a, b = edges[:-1, None], edges[1:, None]
        nodes = (a + (b - a) * (x + 1) / 2).ravel()
        wts = ((b - a) / 2 * w).ravel()
        integral = wts @ sa(nodes)
        target = fit.cumulative.values[-1]
        big = np.abs(target) > 0.05
        np.testing.assert_allclose(integral[big], target[big], rtol=0.02)

    def test_bad_bandwidth(self, three):
        with pytest.raises(ValueError):
            smooth_alpha(fit_aalen(three), 0.0)


class TestOptimalWeights:
    def test_constant_predictor_gives_plain_fit(self):
        ds = intercept_data([0.5, 1.0, 2.0, 2.5, 3.0, 4.0], [1, 1, 1, 0, 1, 1])
        theta = 0.4
        fit = fit_aalen_optimal(ds, alpha=lambda s: np.full((np.size(s), 1), theta))
        plain = fit_aalen(ds)
        np.testing.assert_allclose(fit.increments, plain.increments, rtol=1e-13)
        # variance theta * int_0^t 1/Ybar ds / n
        t = np.array([0.5, 1.0, 2.0, 2.5, 3.0, 4.0])
        knots = fit.grid.knots
        ybar = np.array([np.mean(t >= s) for s in knots[1:]])
        expect = theta * np.cumsum(np.diff(knots) / ybar) / ds.n
        np.testing.assert_allclose(fit.variance_path.values[1:, 0, 0], expect, rtol=1e-10)

    def test_floor_violation(self):
        ds = intercept_data([0.5, 1.0, 2.0], [1, 1, 1])
        with pytest.raises(HazardFloorError):
            fit_aalen_optimal(ds, alpha=lambda s: np.where(np.atleast_1d(s) > 1.5, 0.0, 1.0)[:, None])

    def test_weights_scheme_values(self, three):
        ow = OptimalWeights(three, lambda s: np.tile([1.0, 1.0], (np.size(s), 1)))
        np.testing.assert_allclose(ow.at(np.array([0.5]), np.array([0, 1, 2]))[:, 0], [1.0, 0.5, 1.0])


@pytest.mark.slow
class TestMonteCarloVariance:
    def test_plugin_matches_empirical_at_interior_time(self):
        mc = run_monte_carlo(load_scenario("power_linear"), ("aalen",), reps=200, seed=99, times=(0.5,))
        for row in mc.summary():
            ratio = row["mean_se"] ** 2 / row["mc_sd"] ** 2
            assert abs(ratio - 1.0) < 0.15, row
