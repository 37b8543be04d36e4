import dataclasses
import logging

import numpy as np
import pytest

from partlyaalen.data import load_dataset
from partlyaalen.simulate import load_scenario

THREE = "time,status,z1,z2\n1,1,1,0\n2,1,1,1\n3,0,1,0\n"


@pytest.fixture(autouse=True)
def _quiet_truncation_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="partlyaalen")


@pytest.fixture
def three():
    """Three subjects: (1, event, (1,0)), (2, event, (1,1)), (3, censored, (1,0))."""
    return load_dataset(THREE)


@pytest.fixture
def three_p1():
    return load_dataset(THREE, parametric=["z1"])


def intercept_data(times, status):
    rows = "\n".join(f"{t},{d},1" for t, d in zip(times, status))
    return load_dataset("time,status,one\n" + rows + "\n", parametric=["one"])


@pytest.fixture(scope="session")
def sim_small():
    """A moderate dataset from the bundled power + linear scenario (n = 600)."""
    sc = dataclasses.replace(load_scenario("power_linear"), n=600)
    Z = sc.draw_covariates(np.random.default_rng(11))
    return sc, sc.dataset(Z, np.random.default_rng(12))


@pytest.fixture(scope="session")
def study_mc():
    """200 replications of the power + linear design at n = 2000, seed 2024 (about 2 minutes)."""
    from partlyaalen.simulate import run_monte_carlo
    return run_monte_carlo(load_scenario("power_linear"), ("partly", "aalen"), reps=200, seed=2024,
                           times=(0.3, 0.5, 0.7))


@pytest.fixture(scope="session")
def gof_null():
    """Chi-squared and gaussian KS p-values over 200 datasets from the correctly specified model."""
    from partlyaalen.gof import run_gof_study
    return run_gof_study(load_scenario("power_linear"), reps=200, seed=2024, B=1000)


@pytest.fixture(scope="session")
def gof_misfit():
    """The same study with the power component fitted as a constant."""
    from partlyaalen.gof import run_gof_study
    return run_gof_study(load_scenario("power_as_constant"), reps=200, seed=2024, B=1000)
