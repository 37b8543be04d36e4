"""Simulation of right-censored additive-hazard data and Monte Carlo studies."""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

from .data import Dataset, build_time_grid
from .families import HazardFamily, ParametricBlock, make_family

log = logging.getLogger(__name__)

BISECT_MAX_ITER = 200
FAILURE_LIMIT = 0.05


class ScenarioError(ValueError):
    """Invalid scenario specification."""


class TooManyFailures(RuntimeError):
    """More than 5% of replications failed."""


try:  # Python 3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as _toml


# ---------------------------------------------------------------- laws

@dataclass(frozen=True)
class CovariateLaw:
    """Distribution of one covariate column: ``uniform(low, high)`` or ``constant(value)``."""

    name: str
    dist: str = "uniform"
    low: float = 0.0
    high: float = 1.0
    value: float = 1.0

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.dist == "uniform":
            return rng.uniform(self.low, self.high, n)
        if self.dist == "constant":
            return np.full(n, float(self.value))
        raise ScenarioError(f"unknown covariate distribution '{self.dist}'")


@dataclass(frozen=True)
class CensoringLaw:
    """``uniform(low, high)``, ``degenerate(value)`` or ``none``."""

    law: str = "uniform"
    low: float = 0.0
    high: float = 1.0
    value: float = 1.0

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.law == "uniform":
            return rng.uniform(self.low, self.high, n)
        if self.law == "degenerate":
            return np.full(n, float(self.value))
        if self.law == "none":
            return np.full(n, np.inf)
        raise ScenarioError(f"unknown censoring law '{self.law}'")

    @property
    def upper(self) -> float:
        return {"uniform": self.high, "degenerate": self.value}.get(self.law, np.inf)


@dataclass(frozen=True)
class HazardTruth:
    """True regressor functions, one ``(family, theta)`` per covariate column."""

    families: tuple
    thetas: tuple

    def __post_init__(self):
        fams = tuple(make_family(f) if isinstance(f, str) else f for f in self.families)
        object.__setattr__(self, "families", fams)
        object.__setattr__(self, "thetas", tuple(np.asarray(t, float).reshape(-1) for t in self.thetas))
        if len(fams) != len(self.thetas):
            raise ScenarioError("one theta per family is required")

    @property
    def r(self) -> int:
        return len(self.families)

    def alpha(self, s) -> np.ndarray:
        s = np.asarray(s, float)
        return np.stack([f.value(s, th) for f, th in zip(self.families, self.thetas)], axis=-1)

    def cumulative(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        return np.stack([f.cumulative(np.zeros_like(t), t, th) for f, th in zip(self.families, self.thetas)], -1)

    def monomial(self):
        """Common ``(coefficients, exponent)`` when every cumulative is ``c_j t**e``; else None."""
        parts = [f.cumulative_monomial(th) for f, th in zip(self.families, self.thetas)]
        if any(p is None for p in parts):
            return None
        exps = {p[1] for p in parts}
        if len(exps) != 1:
            return None
        return np.array([p[0] for p in parts]), exps.pop()

    def check_nonnegative(self, Z: np.ndarray, horizon: float, points: int = 201):
        grid = np.linspace(0.0, horizon, points)[1:]
        lp = Z @ self.alpha(grid).T
        if np.any(lp < 0):
            i, g = np.unravel_index(np.argmin(lp), lp.shape)
            raise ScenarioError(f"true hazard negative ({lp[i, g]:.3g}) for subject {i} at t={grid[g]:.4g}")


# ---------------------------------------------------------------- sampling

def invert_cumulative(H, target: np.ndarray, scale: float = 1.0, tol: float | None = None) -> np.ndarray:
    """Solve ``H(T) = target`` elementwise for a nondecreasing vectorised ``H``.

    Monotone bisection with bracket doubling; tolerance ``1e-10 * scale``.
    """
    target = np.asarray(target, float)
    tol = 1e-10 * scale if tol is None else tol
    lo = np.zeros_like(target)
    hi = np.full_like(target, scale)
    for _ in range(BISECT_MAX_ITER):
        short = H(hi) < target
        if not np.any(short):
            break
        hi = np.where(short, 2.0 * hi, hi)
    else:
        raise ScenarioError("cumulative hazard does not reach the target (hazard too small)")
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        below = H(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= tol):
            break
    return 0.5 * (lo + hi)


def event_times(Z: np.ndarray, truth: HazardTruth, E: np.ndarray, method: str = "auto",
                scale: float = 1.0) -> np.ndarray:
    """Latent event times solving ``z_i^T A(T_i) = E_i``."""
    Z = np.atleast_2d(np.asarray(Z, float))
    mono = truth.monomial() if method in ("auto", "closed") else None
    if mono is not None:
        c, e = mono
        rate = Z @ c
        with np.errstate(divide="ignore"):
            return np.where(rate > 0, (E / np.where(rate > 0, rate, 1.0)) ** (1.0 / e), np.inf)
    if method == "closed":
        raise ScenarioError("no closed-form inversion for this truth")

    def H(t):
        return np.einsum("ij,ij->i", Z, truth.cumulative(t))

    return invert_cumulative(H, E, scale)


def sample_survival(z, truth: HazardTruth, censor: CensoringLaw, rng: np.random.Generator,
                    tau: float | None = None, method: str = "auto"):
    """One draw ``(min(T, C, tau), 1{T <= min(C, tau)})`` for covariate vector ``z``."""
    t, d = sample_times(np.atleast_2d(z), truth, censor, rng, tau, method)
    return float(t[0]), int(d[0])


def sample_times(Z, truth: HazardTruth, censor: CensoringLaw, rng: np.random.Generator,
                 tau: float | None = None, method: str = "auto"):
    Z = np.atleast_2d(np.asarray(Z, float))
    n = Z.shape[0]
    horizon = tau if tau is not None else (censor.upper if np.isfinite(censor.upper) else 1.0)
    truth.check_nonnegative(Z, horizon)
    E = rng.exponential(1.0, n)
    T = event_times(Z, truth, E, method, scale=horizon)
    C = censor.draw(n, rng)
    cap = np.minimum(C, np.inf if tau is None else tau)
    return np.minimum(T, cap), (T <= cap).astype(int)


# ---------------------------------------------------------------- scenarios

@dataclass(frozen=True)
class Scenario:
    """A simulation design: covariate laws, true hazard, censoring, ``n`` and ``p``.

    The first ``p`` columns are fitted parametrically with the truth's families
    unless ``fit_families`` overrides them (used to study misspecification).
    """

    covariates: tuple
    truth: HazardTruth
    censoring: CensoringLaw
    n: int
    p: int
    tau: float | None = None
    name: str = "scenario"
    fit_families: tuple = ()
    fit_tau: float | str = "auto"

    @property
    def names(self) -> tuple:
        return tuple(c.name for c in self.covariates)

    def draw_covariates(self, rng: np.random.Generator) -> np.ndarray:
        return np.column_stack([c.draw(self.n, rng) for c in self.covariates])

    def fit_block(self) -> ParametricBlock:
        fams = self.fit_families or self.truth.families[: self.p]
        return ParametricBlock(list(fams))

    def dataset(self, Z: np.ndarray, rng: np.random.Generator) -> Dataset:
        t, d = sample_times(Z, self.truth, self.censoring, rng, self.tau)
        return Dataset(t, d, Z, self.p, self.names)


def scenario_from_dict(cfg: dict) -> Scenario:
    sc = cfg.get("scenario", cfg)
    try:
        covs = tuple(CovariateLaw(**c) for c in sc["covariates"])
        names = [c.name for c in covs]
        truth_entries = sc["truth"]
        by_col = {e["column"]: e for e in truth_entries}
        missing = [c for c in names if c not in by_col]
        if missing:
            raise ScenarioError(f"no true regressor function for columns {missing}")
        fams = [by_col[c]["family"] for c in names]
        thetas = [by_col[c]["theta"] for c in names]
        flags = [bool(by_col[c].get("parametric", False)) for c in names]
        p = sum(flags)
        if flags != sorted(flags, reverse=True):
            raise ScenarioError("parametric columns must be listed first")
        fit_fams = tuple(by_col[c].get("fit_family", by_col[c]["family"]) for c in names[:p])
        cens = CensoringLaw(**sc.get("censoring", {}))
        return Scenario(covs, HazardTruth(tuple(fams), tuple(thetas)), cens, int(sc["n"]), p,
                        sc.get("tau"), sc.get("name", "scenario"),
                        tuple(make_family(f) for f in fit_fams), sc.get("fit_tau", "auto"))
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"invalid scenario: {exc}") from None


def load_scenario(path_or_name: str) -> Scenario:
    """Load a scenario TOML file, or a bundled one by name (e.g. ``power_linear``)."""
    if os.path.exists(path_or_name):
        with open(path_or_name, "rb") as fh:
            return scenario_from_dict(_toml.load(fh))
    res = resources.files("partlyaalen") / "scenarios" / f"{path_or_name}.toml"
    if not res.is_file():
        raise ScenarioError(f"scenario '{path_or_name}' not found")
    return scenario_from_dict(_toml.loads(res.read_text()))


def bundled_scenarios() -> list[str]:
    root = resources.files("partlyaalen") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


# ---------------------------------------------------------------- Monte Carlo

ESTIMATORS = ("partly", "aalen", "mle")
COLUMNS = ("rep", "estimator", "estimand", "time", "estimate", "truth", "se", "z")


@dataclass(frozen=True)
class MonteCarloTable:
    rows: tuple
    seed: int
    reps: int
    event_fraction: np.ndarray
    failures: tuple = ()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([r[0], r[1], r[2], "" if r[3] is None else repr(float(r[3])),
                        *(repr(float(v)) for v in r[4:])])
        return buf.getvalue()

    def select(self, estimator: str, estimand: str, time=None) -> np.ndarray:
        """Rows as an array ``(estimate, truth, se, z)``."""
        out = [r[4:] for r in self.rows
               if r[1] == estimator and r[2] == estimand and (time is None or r[3] == time)]
        return np.asarray(out, float).reshape(-1, 4)

    def summary(self) -> list[dict]:
        keys = []
        for r in self.rows:
            k = (r[1], r[2], r[3])
            if k not in keys:
                keys.append(k)
        out = []
        for est, name, t in keys:
            a = self.select(est, name, t)
            z = a[:, 3]
            out.append({
                "estimator": est, "estimand": name, "time": t, "count": len(a),
                "truth": float(a[0, 1]), "mean_estimate": float(a[:, 0].mean()),
                "mc_sd": float(a[:, 0].std(ddof=1)) if len(a) > 1 else float("nan"),
                "mean_se": float(a[:, 2].mean()),
                "z_mean": float(z.mean()), "z_sd": float(z.std(ddof=1)) if len(a) > 1 else float("nan"),
                "coverage95": float(np.mean(np.abs(z) <= 1.959963984540054)),
            })
        return out

    def summary_csv(self) -> str:
        rows = self.summary()
        buf = io.StringIO()
        cols = ["estimator", "estimand", "time", "count", "truth", "mean_estimate", "mc_sd",
                "mean_se", "z_mean", "z_sd", "coverage95"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                        for k in cols})
        return buf.getvalue()


def _fit_rows(rep: int, sc: Scenario, ds: Dataset, estimators, times):
    from .aalen import fit_aalen
    from .mle import fit_mle
    from .partly import fit_partly

    rows = []
    truth = sc.truth
    names = ds.names
    for est in estimators:
        if est == "aalen":
            af = fit_aalen(ds, build_time_grid(ds, sc.fit_tau))
            for t in times:
                k = af.grid.locate(t)
                vals = af.cumulative.values[k]
                se = np.sqrt(np.diag(af.variance_path.values[k]))
                tru = truth.cumulative(t)
                for j, c in enumerate(names):
                    rows.append((rep, est, f"A_{c}", t, vals[j], tru[j], se[j], (vals[j] - tru[j]) / se[j]))
        elif est == "partly":
            pf = fit_partly(ds, sc.fit_block(), tau=sc.fit_tau)
            tru_theta = np.concatenate(truth.thetas[: sc.p])
            if len(tru_theta) == pf.block.m:
                for k, (v, s, tr) in enumerate(zip(pf.theta_hat, pf.theta_se, tru_theta)):
                    rows.append((rep, est, f"theta_{k + 1}", None, v, tr, s, (v - tr) / s))
            for t in times:
                a2 = pf.A2(t)
                se = np.sqrt(np.diag(pf.xi(t))[sc.p:] / ds.n)
                tru = truth.cumulative(t)[sc.p:]
                for j, c in enumerate(names[sc.p:]):
                    rows.append((rep, est, f"A_{c}", t, a2[j], tru[j], se[j], (a2[j] - tru[j]) / se[j]))
        elif est == "mle":
            block = ParametricBlock(list(truth.families))
            full = Dataset(ds.times, ds.status, ds.covariates, ds.r, ds.names)
            tru_theta = np.concatenate(truth.thetas)
            mf = fit_mle(full, block, tru_theta, tau=sc.fit_tau)
            for k, (v, s, tr) in enumerate(zip(mf.theta_hat, mf.se, tru_theta)):
                rows.append((rep, est, f"theta_{k + 1}", None, v, tr, s, (v - tr) / s))
        else:
            raise ValueError(f"unknown estimator '{est}' (choose from {ESTIMATORS})")
    return rows


def _replicate(args):
    rep, sc, Z, ss, estimators, times = args
    rng = np.random.default_rng(ss)
    ds = sc.dataset(Z, rng)
    frac = float(ds.status.mean())
    try:
        return rep, frac, _fit_rows(rep, sc, ds, estimators, times), None
    except Exception as exc:  # recorded, judged against the failure limit
        return rep, frac, [], f"{type(exc).__name__}: {exc}"


def map_ordered(fn, jobs: Sequence, workers: int = 1) -> list:
    """Apply ``fn`` to ``jobs`` possibly in parallel, returning results in job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def replicate_seeds(seed: int, reps: int):
    """Covariate stream and per-replicate streams split deterministically from ``seed``."""
    cov_ss, rep_ss = np.random.SeedSequence(seed).spawn(2)
    return cov_ss, rep_ss.spawn(reps)


def run_monte_carlo(sc: Scenario, estimators: Sequence[str] = ("partly", "aalen"), reps: int = 200,
                    seed: int = 0, times: Sequence[float] = (0.5,), workers: int = 1) -> MonteCarloTable:
    """Monte Carlo study with covariates drawn once and held fixed across replications."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    for e in estimators:
        if e not in ESTIMATORS:
            raise ValueError(f"unknown estimator '{e}' (choose from {ESTIMATORS})")
    cov_ss, seeds = replicate_seeds(seed, reps)
    Z = sc.draw_covariates(np.random.default_rng(cov_ss))
    jobs = [(i, sc, Z, seeds[i], tuple(estimators), tuple(float(t) for t in times)) for i in range(reps)]
    results = map_ordered(_replicate, jobs, workers)
    rows, fracs, failures = [], [], []
    for rep, frac, rr, err in results:
        fracs.append(frac)
        rows.extend(rr)
        if err is not None:
            failures.append((rep, err))
            log.warning("replication %d failed: %s", rep, err)
    if len(failures) > FAILURE_LIMIT * reps:
        raise TooManyFailures(f"{len(failures)} of {reps} replications failed; first: {failures[0][1]}")
    return MonteCarloTable(tuple(rows), seed, reps, np.asarray(fracs), tuple(failures))
