import numpy as np
import pytest

from partlyaalen.aalen import fit_aalen
from partlyaalen.data import Dataset, build_time_grid, load_dataset
from partlyaalen.families import ParametricBlock
from partlyaalen.partly import (backfit_step_b, criterion, fit_partly, joint_covariance,
                                psd_repair, survival_curve)

from conftest import intercept_data

CONST = ParametricBlock(["constant"])


class TestCriterion:
    def test_three_subject_quadratic(self, three_p1):
        af = fit_aalen(three_p1)
        for th in (0.0, 0.3, 1.2):
            assert np.isclose(criterion(three_p1, af, CONST, [th]), th ** 2 * 5 / 3 - th, atol=1e-14)

    def test_grid_minimum(self, three_p1):
        af = fit_aalen(three_p1)
        grid = np.linspace(0, 1, 1001)
        vals = [criterion(three_p1, af, CONST, [t]) for t in grid]
        assert np.isclose(grid[int(np.argmin(vals))], 0.3)

    def test_zero_for_vanishing_family(self, sim_small):
        _, ds = sim_small
        af = fit_aalen(ds)
        assert criterion(ds, af, ParametricBlock(["linear", "linear"]), [0.0, 0.0]) == 0.0

    def test_unknown_choice(self, three_p1):
        with pytest.raises(ValueError):
            criterion(three_p1, fit_aalen(three_p1), CONST, [0.1], Vn_choice="best")


class TestStepA:
    def test_three_subject(self, three_p1):
        fit = fit_partly(three_p1, CONST)
        assert np.isclose(fit.theta_hat[0], 0.3, rtol=1e-10)

    def test_occurrence_exposure(self):
        times, status = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0], [1, 0, 1, 1, 0, 1]
        fit = fit_partly(intercept_data(times, status), CONST)
        D = sum(status)
        R = sum(min(t, 3.0) for t in times)
        assert np.isclose(fit.theta_hat[0], D / R, rtol=1e-10)

    def test_best_constants(self, sim_small):
        _, ds = sim_small
        blk = ParametricBlock(["constant", "constant"])
        fit = fit_partly(ds, blk, theta_init=[5.0, 0.01])
        d = fit.design
        intV = np.einsum("kg,kgij->ij", d.qw, d.V_nodes)
        intVdA = np.einsum("eij,ej->i", d.V_events, d.dA1)
        np.testing.assert_allclose(fit.theta_hat, np.linalg.solve(intV, intVdA), rtol=1e-10)

    def test_optimal_choice(self):
        # hazard 1 + 0.5 x with x ~ U(0, 1): well away from zero everywhere
        rng = np.random.default_rng(4)
        n = 1500
        x = rng.uniform(0, 1, n)
        t = rng.exponential(1 / (1 + 0.5 * x))
        c = rng.uniform(0, 2, n)
        ds = Dataset(np.minimum(t, c), (t <= c).astype(int), np.column_stack([np.ones(n), x]), 1)
        fits = {v: fit_partly(ds, CONST, Vn_choice=v) for v in ("default", "optimal")}
        for fit in fits.values():
            assert abs(fit.theta_hat[0] - 1.0) < 4 * fit.theta_se[0]
        assert fits["optimal"].Vn_choice == "optimal"
        assert fits["optimal"].theta_hat[0] != fits["default"].theta_hat[0]


class TestBackfit:
    def test_p0_is_aalen(self, three):
        fit = fit_partly(three, ParametricBlock([]))
        af = fit_aalen(three)
        np.testing.assert_allclose(fit.backfit.values, af.cumulative.values, atol=1e-10)
        np.testing.assert_allclose(fit.xi(1.0) / three.n, af.variance_path(1.0), atol=1e-10)
        np.testing.assert_allclose(fit.xi(2.0) / three.n, af.variance_path(2.0), atol=1e-10)

    def test_zero_parametric_column(self):
        ds = load_dataset("time,status,zero,one,x\n1,1,0,1,0\n2,1,0,1,1\n3,1,0,1,0\n4,0,0,1,1\n",
                          parametric=["zero"])
        bf = backfit_step_b(ds, build_time_grid(ds), [0.7], CONST)
        block2 = Dataset(ds.times, ds.status, ds.z2, 0)
        np.testing.assert_allclose(bf.values, fit_aalen(block2).cumulative.values, atol=1e-12)

    def test_vanishing_family_at_zero(self, sim_small):
        _, ds = sim_small
        bf = backfit_step_b(ds, build_time_grid(ds), [0.0, 0.0], ParametricBlock(["linear", "linear"]))
        block2 = Dataset(ds.times, ds.status, ds.z2, 0)
        np.testing.assert_allclose(bf.values, fit_aalen(block2).cumulative.values, rtol=1e-10, atol=1e-12)

    def test_left_limit_at_an_event_removes_the_jump(self, sim_small):
        _, ds = sim_small
        fit = fit_partly(ds, sim_small[0].fit_block())
        bf = fit.backfit
        e = 10
        k = fit.grid.event_index[e]
        s = fit.grid.knots[k]
        np.testing.assert_allclose(fit.A2(s), bf.values[k], rtol=1e-12)
        np.testing.assert_allclose(fit.A2(s - 1e-10), bf.values[k] - bf.jumps[e], atol=1e-8)
        with pytest.raises(ValueError):
            fit.A2(fit.grid.tau + 1)


class TestCovariance:
    def test_xi_properties(self, sim_small):
        _, ds = sim_small
        fit = fit_partly(ds, sim_small[0].fit_block())
        np.testing.assert_array_equal(fit.xi(0.0), np.zeros((4, 4)))
        for t in (0.2, 0.5, 0.8):
            X = fit.xi(t)
            np.testing.assert_allclose(X, X.T, atol=1e-14)
            assert np.linalg.eigvalsh(X).min() >= -1e-12
        jc = joint_covariance(fit, 0.5)
        np.testing.assert_allclose(jc.matrix, fit.xi(0.5) / ds.n)

    def test_psd_repair(self):
        M = np.array([[1.0, 0.0], [0.0, -1e-3]])
        np.testing.assert_allclose(psd_repair(M), [[1.0, 0.0], [0.0, 0.0]])


class TestSurvival:
    def test_zero_covariates(self, sim_small):
        _, ds = sim_small
        fit = fit_partly(ds, sim_small[0].fit_block())
        tab = survival_curve(fit, np.zeros(4), [0.0, 0.4])
        np.testing.assert_array_equal(tab.survival, [1.0, 1.0])
        np.testing.assert_array_equal(tab.se, [0.0, 0.0])

    def test_intercept_constant_delta_method(self):
        fit = fit_partly(intercept_data([0.5, 1.0, 1.5, 2.0, 2.5, 3.0], [1, 0, 1, 1, 0, 1]), CONST)
        t = np.array([0.0, 1.0, 2.5])
        tab = survival_curve(fit, [1.0], t)
        S = np.exp(-fit.theta_hat[0] * t)
        np.testing.assert_allclose(tab.survival, S, rtol=1e-12)
        np.testing.assert_allclose(tab.se, S * t * fit.theta_se[0], rtol=1e-10)
        assert tab.to_csv().startswith("time,survival,se,lo95,hi95\n")


@pytest.mark.slow
class TestMonteCarlo:
    def test_standard_errors_of_backfit(self, study_mc):
        for row in study_mc.summary():
            if row["estimator"] == "partly" and row["time"] == 0.5:
                assert abs(row["mean_se"] / row["mc_sd"] - 1) < 0.15, row
