import dataclasses
import json

import numpy as np
import pytest
from scipy import stats

from partlyaalen.families import ParametricBlock
from partlyaalen.gof import (BootstrapGenerator, GofError, Monitor, chi_squared_test, gof_covariance, ks_test,
                             monitoring_process, window_boundaries)
from partlyaalen.mle import ConvergenceError
from partlyaalen.partly import fit_partly
from partlyaalen.simulate import load_scenario, replicate_seeds

from conftest import intercept_data

CONST = ParametricBlock(["constant"])


@pytest.fixture(scope="module")
def intercept_fit():
    rng = np.random.default_rng(8)
    t = rng.exponential(1 / 0.8, 300)
    c = rng.uniform(0, 3, 300)
    return fit_partly(intercept_data(np.minimum(t, c), (t <= c).astype(int)), CONST)


@pytest.fixture(scope="module")
def power_fit():
    sc = dataclasses.replace(load_scenario("power_linear"), n=800)
    Z = sc.draw_covariates(np.random.default_rng(1))
    return fit_partly(sc.dataset(Z, np.random.default_rng(2)), sc.fit_block())


class TestMonitoringProcess:
    def test_scalar_formula(self, intercept_fit):
        fit = intercept_fit
        mp = monitoring_process(fit, 1)
        knots = fit.grid.knots
        expect = np.sqrt(fit.n) * (fit.aalen.cumulative.values[:, 0] - fit.theta_hat[0] * knots)
        np.testing.assert_allclose(mp.path.values, expect, atol=1e-12)
        D, R = fit.ds.status.sum(), np.minimum(fit.ds.times, fit.grid.tau).sum()
        assert np.isclose(mp.path.values[-1],
                          np.sqrt(fit.n) * (fit.aalen.cumulative.values[-1, 0] - D * fit.grid.tau / R))

    def test_estimating_equation_weight_closes_at_tau(self, intercept_fit):
        fit = intercept_fit
        t = fit.ds.times
        ybar = lambda s: np.mean(t >= np.reshape(s, (-1, 1)), axis=1).reshape(np.shape(s))
        mon = Monitor(fit, 1, K=ybar)
        assert abs(mon.value(fit.grid.tau)) < 1e-10

    def test_component_range(self, intercept_fit):
        with pytest.raises(GofError):
            monitoring_process(intercept_fit, 2)

    def test_csv(self, intercept_fit):
        assert monitoring_process(intercept_fit, 1).to_csv().startswith("time,R_1\n0.0,0.0\n")


class TestCovariance:
    def test_zero_at_origin_and_symmetric(self, power_fit):
        assert gof_covariance(power_fit, 1.0, 1, 0.0, 0.5) == 0.0
        assert gof_covariance(power_fit, 1.0, 1, 0.5, 0.0) == 0.0
        a = gof_covariance(power_fit, 1.0, 2, 0.3, 0.7)
        b = gof_covariance(power_fit, 1.0, 2, 0.7, 0.3)
        assert np.isclose(a, b, rtol=1e-12)

    def test_psd_on_a_grid(self, power_fit):
        t = np.linspace(0, power_fit.grid.tau, 12)
        C = Monitor(power_fit, 1).covariance_matrix(t, t)
        assert np.linalg.eigvalsh(0.5 * (C + C.T)).min() > -1e-9 * np.abs(C).max()


class TestChiSquared:
    def test_single_window(self, power_fit):
        rep = chi_squared_test(power_fit, 1, windows=1)
        mon = Monitor(power_fit, 1)
        tau = power_fit.grid.tau
        expect = mon.value(tau) ** 2 / mon.covariance(tau, tau)
        assert rep.df == 1 and np.isclose(rep.statistic, expect, rtol=1e-10)
        assert np.isclose(rep.p_value, stats.chi2.sf(expect, 1))

    def test_zero_weight(self, power_fit):
        rep = chi_squared_test(power_fit, 1, K=0.0)
        assert rep.statistic == 0.0 and rep.p_value == 1.0

    def test_windows(self, power_fit):
        c = window_boundaries(power_fit, 4)
        assert c[0] == 0 and c[-1] == power_fit.grid.tau and len(c) == 5
        with pytest.raises(GofError, match="empty window"):
            window_boundaries(power_fit, [0.0, 1e-9, 2e-9, power_fit.grid.tau])
        with pytest.raises(GofError):
            window_boundaries(power_fit, 10 ** 6)

    def test_report_json(self, power_fit):
        d = json.loads(chi_squared_test(power_fit, 1).to_json())
        assert d["test"] == "chisq" and d["df"] == 4 and 0 <= d["p_value"] <= 1


class TestKS:
    def test_requires_seed_and_replicates(self, power_fit):
        with pytest.raises(GofError, match="B ≥ 100 required"):
            ks_test(power_fit, 1, B=99, seed=1)
        with pytest.raises(GofError, match="seed"):
            ks_test(power_fit, 1, B=100)
        with pytest.raises(GofError, match="unknown calibration"):
            ks_test(power_fit, 1, method="magic", B=100, seed=1)

    def test_deterministic(self, power_fit):
        a = ks_test(power_fit, 1, B=200, seed=3)
        b = ks_test(power_fit, 1, B=200, seed=3)
        assert a.to_json() == b.to_json()
        assert 1 / 201 <= a.p_value <= 1

    def test_zero_weight(self, power_fit):
        rep = ks_test(power_fit, 1, B=100, seed=1, K=0.0)
        assert rep.statistic == 0.0 and rep.p_value == 1.0

    def test_all_components(self, power_fit):
        rep = ks_test(power_fit, "all", B=100, seed=1)
        assert np.isclose(rep.statistic, sum(rep.component_statistics))
        assert len(rep.component_statistics) == 2

    def test_bootstrap(self):
        rng = np.random.default_rng(9)
        t, c = rng.exponential(1.0, 60), rng.uniform(0, 2, 60)
        fit = fit_partly(intercept_data(np.minimum(t, c), (t <= c).astype(int)), CONST)
        rep = ks_test(fit, 1, method="bootstrap", B=100, seed=4)
        assert rep.failures == 0 and 0 < rep.p_value <= 1
        again = ks_test(fit, 1, method="bootstrap", B=100, seed=4)
        assert again.to_json() == rep.to_json()


class TestBootstrapGenerator:
    def test_draw_reproduces_fitted_hazard(self, intercept_fit):
        gen = BootstrapGenerator.from_fit(intercept_fit)
        ds = gen.draw(np.random.default_rng(0))
        assert ds.n == intercept_fit.n and ds.times.max() <= intercept_fit.grid.tau
        T = gen.event_times(np.full(intercept_fit.n, 0.4))
        np.testing.assert_allclose(T, 0.4 / intercept_fit.theta_hat[0], rtol=1e-8)


@pytest.mark.slow
class TestMonteCarlo:
    def test_single_window_variance(self):
        sc = dataclasses.replace(load_scenario("power_linear"), n=1000)
        cov_ss, seeds = replicate_seeds(77, 200)
        Z = sc.draw_covariates(np.random.default_rng(cov_ss))
        R, V, failed = [], [], 0
        for ss in seeds:
            try:
                fit = fit_partly(sc.dataset(Z, np.random.default_rng(ss)), sc.fit_block())
            except ConvergenceError:
                failed += 1
                continue
            mon = Monitor(fit, 1)
            tau = fit.grid.tau
            R.append(mon.value(tau))
            V.append(mon.covariance(tau, tau))
        assert failed <= 10
        assert abs(np.mean(V) / np.var(R, ddof=1) - 1) < 0.20

    def test_null_p_values_roughly_uniform(self, gof_null):
        assert stats.kstest(gof_null.ks_p, "uniform").statistic < 0.1

    def test_misfit_rejected_more_often(self, gof_null, gof_misfit):
        assert gof_misfit.rejection_rate("ks") > gof_null.rejection_rate("ks")
