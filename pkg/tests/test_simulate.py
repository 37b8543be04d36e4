import dataclasses

import numpy as np
import pytest

from partlyaalen.families import CustomFamily
from partlyaalen.simulate import (CensoringLaw, HazardTruth, ScenarioError, TooManyFailures, bundled_scenarios,
                                  event_times, invert_cumulative, load_scenario, run_monte_carlo,
                                  sample_survival, scenario_from_dict)

TRUTH = HazardTruth(("power", "linear", "linear", "linear"), ([0.123, 2.0], [0.567], [0.572], [0.123]))


class TestInversion:
    def test_exponential(self):
        truth = HazardTruth(("constant",), ([2.0],))
        T = event_times(np.array([[1.0]]), truth, np.array([2.0]))
        np.testing.assert_allclose(T, [1.0], rtol=1e-14)

    def test_design_hazard(self):
        # z = (1, 0, 1, 0): H(t) = 0.123 t^2 + 0.286 t^2
        T = event_times(np.array([[1.0, 0.0, 1.0, 0.0]]), TRUTH, np.array([0.409]))
        np.testing.assert_allclose(T, [1.0], rtol=1e-12)

    def test_numeric_matches_closed_form(self):
        rng = np.random.default_rng(0)
        Z = np.column_stack([rng.uniform(0, 17, 500), rng.uniform(0, 17, 500), np.ones(500),
                             rng.uniform(0, 17, 500)])
        E = rng.exponential(1.0, 500)
        closed = event_times(Z, TRUTH, E, method="closed")
        numeric = event_times(Z, TRUTH, E, method="bisection")
        np.testing.assert_allclose(numeric, closed, rtol=1e-9, atol=0)

    def test_custom_family_without_closed_form(self):
        fam = CustomFamily(lambda s, th: th[0] * (1 + np.sin(s)), lambda s, th: (1 + np.sin(s))[..., None], 1)
        truth = HazardTruth((fam,), ([1.0],))
        T = event_times(np.array([[1.0]]), truth, np.array([1.5]))
        assert np.isclose(T[0] + 1 - np.cos(T[0]), 1.5, atol=1e-9)
        with pytest.raises(ScenarioError):
            event_times(np.array([[1.0]]), truth, np.array([1.5]), method="closed")

    def test_unreachable_target(self):
        with pytest.raises(ScenarioError):
            invert_cumulative(lambda t: np.minimum(t, 1.0), np.array([2.0]))


class TestSampleSurvival:
    def test_degenerate_censoring(self):
        t, d = sample_survival([1.0, 0.0, 1.0, 0.0], TRUTH, CensoringLaw("degenerate", value=1e-6),
                               np.random.default_rng(1))
        assert (t, d) == (1e-6, 0)

    def test_negative_hazard_rejected(self):
        truth = HazardTruth(("constant",), ([-1.0],))
        with pytest.raises(ScenarioError, match="negative"):
            sample_survival([1.0], truth, CensoringLaw(), np.random.default_rng(1))

    def test_matches_exponential_law(self):
        truth = HazardTruth(("constant",), ([2.0],))
        rng = np.random.default_rng(3)
        draws = np.array([sample_survival([1.0], truth, CensoringLaw("none"), rng)[0] for _ in range(4000)])
        assert abs(draws.mean() - 0.5) < 4 * 0.5 / np.sqrt(4000)


class TestScenarios:
    def test_bundled(self):
        assert {"power_linear", "power_as_constant"} <= set(bundled_scenarios())
        sc = load_scenario("power_linear")
        assert sc.n == 2000 and sc.p == 2 and sc.names == ("z1", "z2", "z3", "z4")
        assert sc.fit_block().m == 3

    def test_misfit_scenario(self):
        sc = load_scenario("power_as_constant")
        assert sc.fit_block().families[0].name == "constant"
        assert sc.truth.families[0].name == "power"

    def test_unknown(self):
        with pytest.raises(ScenarioError, match="not found"):
            load_scenario("nope")

    def test_parametric_first(self):
        cfg = {"n": 10, "covariates": [{"name": "a"}, {"name": "b"}],
               "truth": [{"column": "a", "family": "constant", "theta": 1.0},
                         {"column": "b", "family": "constant", "theta": 1.0, "parametric": True}]}
        with pytest.raises(ScenarioError, match="listed first"):
            scenario_from_dict(cfg)


class TestMonteCarlo:
    def test_deterministic(self):
        sc = dataclasses.replace(load_scenario("power_linear"), n=300)
        a = run_monte_carlo(sc, ("partly", "aalen"), reps=2, seed=42, times=(0.3,))
        b = run_monte_carlo(sc, ("partly", "aalen"), reps=2, seed=42, times=(0.3,))
        assert a.to_csv() == b.to_csv() and a.summary_csv() == b.summary_csv()
        c = run_monte_carlo(sc, ("partly", "aalen"), reps=2, seed=43, times=(0.3,))
        assert c.to_csv() != a.to_csv()

    def test_parallel_equals_serial(self):
        sc = dataclasses.replace(load_scenario("power_linear"), n=300)
        a = run_monte_carlo(sc, ("aalen",), reps=4, seed=1, workers=1)
        b = run_monte_carlo(sc, ("aalen",), reps=4, seed=1, workers=2)
        assert a.to_csv() == b.to_csv()

    def test_table_layout(self):
        sc = dataclasses.replace(load_scenario("power_linear"), n=300)
        mc = run_monte_carlo(sc, ("partly",), reps=1, seed=0, times=(0.5,))
        assert mc.to_csv().splitlines()[0] == "rep,estimator,estimand,time,estimate,truth,se,z"
        assert [r[2] for r in mc.rows] == ["theta_1", "theta_2", "theta_3", "A_z3", "A_z4"]

    def test_failure_limit(self):
        sc = dataclasses.replace(load_scenario("power_linear"), n=300)
        with pytest.raises(TooManyFailures):
            run_monte_carlo(sc, ("partly",), reps=2, seed=0, times=(5.0,))

    def test_bad_arguments(self):
        sc = load_scenario("power_linear")
        with pytest.raises(ValueError):
            run_monte_carlo(sc, ("kaplan",), reps=1)
        with pytest.raises(ValueError):
            run_monte_carlo(sc, reps=0)
