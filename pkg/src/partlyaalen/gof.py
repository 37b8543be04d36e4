"""Goodness-of-fit monitoring of the parametric components.

For component ``j`` the monitoring process is

    R_j(t) = sqrt(n) [ sum_{s_e <= t} K(s_e) dA~_j(s_e) - int_0^t K(s) alpha_j(s, theta_hat) ds ],

which is asymptotically a zero-mean Gaussian process under the model. The
module provides its plug-in covariance function, a chi-squared test on window
increments and sup-norm (Kolmogorov-Smirnov type) tests calibrated either by
simulating the Gaussian limit or by a semiparametric bootstrap.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .data import Dataset, StepPath
from .families import gauss_legendre
from .aalen import interval_nodes
from .partly import PartlyFit, fit_partly
from .simulate import FAILURE_LIMIT, TooManyFailures, map_ordered

log = logging.getLogger(__name__)

MIN_REPLICATES = 100


class GofError(ValueError):
    """Invalid goodness-of-fit request."""


# ---------------------------------------------------------------- monitoring process

def _K_values(K, s) -> np.ndarray:
    s = np.asarray(s, float)
    if callable(K):
        return np.broadcast_to(np.asarray(K(s), float), s.shape)
    return np.full(s.shape, float(K))


@dataclass(frozen=True)
class MonitoringPath:
    """``R_j`` at the knots together with its left limits."""

    j: int
    path: StepPath
    left_limits: np.ndarray
    K: object = field(default=1.0, repr=False)

    @property
    def sup_norm(self) -> float:
        return float(max(np.max(np.abs(self.path.values)), np.max(np.abs(self.left_limits))))

    def to_csv(self) -> str:
        return StepPath(self.path.knots, self.path.values[:, None], (f"R_{self.j}",)).to_csv()


class Monitor:
    """Monitoring process for component ``j`` (1-based) and the pieces of its covariance."""

    def __init__(self, fit: PartlyFit, j: int, K=1.0):
        p = fit.ds.p
        if not 1 <= j <= p:
            raise GofError(f"component {j} out of range 1..{p}")
        self.fit, self.j, self.K = fit, j, K
        jj = j - 1
        grid = fit.grid
        self.knots = grid.knots
        self.ev_k = grid.event_index
        block, theta = fit.block, fit.theta_hat
        d = fit.design
        n = fit.n
        Ke = _K_values(K, d.event_times)
        self.K_events = Ke
        if callable(K):
            x, w = interval_nodes(grid)
            a, g = block.evaluate(x, theta)
            kx = _K_values(K, x)
            drift = np.einsum("kg,kg,kg->k", w, kx, a[..., jj])
            dpsi = np.einsum("kg,kg,kgm->km", w, kx, g[..., jj, :])
        else:
            cum, cg = block.integrate(self.knots[:-1], self.knots[1:], theta)
            drift, dpsi = float(K) * cum[:, jj], float(K) * cg[:, jj, :]
        Kn = len(self.knots)
        jumps = np.zeros(Kn)
        jumps[self.ev_k] = Ke * d.dA1[:, jj]
        inc = jumps.copy()
        inc[1:] -= drift
        self.R = np.sqrt(n) * np.cumsum(inc)
        self.R_left = self.R - np.sqrt(n) * jumps
        self.jumps = np.sqrt(n) * jumps
        psi = np.zeros((Kn, block.m))
        psi[1:] = np.cumsum(dpsi, axis=0)
        self.psi = psi
        g_e = block.evaluate(d.event_times, theta)[1]
        self.VG = np.einsum("eij,ejm->eim", d.V_events, g_e)           # (E, p, m)
        phi = np.zeros((Kn, block.m))
        phi[self.ev_k] = Ke[:, None] * np.einsum("eim,ei->em", self.VG, d.dQ[:, :, jj])
        self.Phi = np.cumsum(phi, axis=0)
        q = np.zeros(Kn)
        q[self.ev_k] = Ke ** 2 * d.dQ[:, jj, jj]
        self.Qjj = np.cumsum(q)
        self.Gi = np.linalg.inv(fit.Gamma_hat)
        self.Lam = fit.step_a.Lambda

    # values at arbitrary times
    def _psi_at(self, t: float) -> np.ndarray:
        k = int(np.searchsorted(self.knots, t, side="right") - 1)
        psi = self.psi[k].copy()
        if t > self.knots[k]:
            a = self.knots[k]
            if callable(self.K):
                x, w = gauss_legendre(a, t)
                _, g = self.fit.block.evaluate(x, self.fit.theta_hat)
                psi += np.einsum("g,g,gm->m", w, _K_values(self.K, x), g[:, self.j - 1, :])
            else:
                _, cg = self.fit.block.integrate(a, t, self.fit.theta_hat)
                psi += float(self.K) * cg[self.j - 1]
        return psi

    def value(self, t: float) -> float:
        k = int(np.searchsorted(self.knots, t, side="right") - 1)
        r = self.R[k]
        if t > self.knots[k]:
            a = self.knots[k]
            if callable(self.K):
                x, w = gauss_legendre(a, t)
                al, _ = self.fit.block.evaluate(x, self.fit.theta_hat)
                r -= np.sqrt(self.fit.n) * np.sum(w * _K_values(self.K, x) * al[:, self.j - 1])
            else:
                cum, _ = self.fit.block.integrate(a, t, self.fit.theta_hat)
                r -= np.sqrt(self.fit.n) * float(self.K) * cum[self.j - 1]
        return float(r)

    def _state(self, t: float):
        if t < 0 or t > self.knots[-1] * (1 + 1e-12):
            raise GofError(f"time {t:g} outside [0, tau]")
        k = int(np.searchsorted(self.knots, t, side="right") - 1)
        return self._psi_at(t), self.Phi[k], self.Qjj[k]

    def covariance(self, t1: float, t2: float) -> float:
        return float(self.covariance_matrix([t1], [t2])[0, 0])

    def covariance_matrix(self, ta: Sequence[float], tb: Sequence[float]) -> np.ndarray:
        sa = [self._state(float(t)) for t in ta]
        sb = [self._state(float(t)) for t in tb]
        out = np.empty((len(sa), len(sb)))
        for a, (pa, fa, qa) in enumerate(sa):
            for b, (pb, fb, qb) in enumerate(sb):
                out[a, b] = (min(qa, qb) + pa @ self.Lam @ pb
                             - pa @ self.Gi @ fb - pb @ self.Gi @ fa)
        return out

    def path(self) -> MonitoringPath:
        return MonitoringPath(self.j, StepPath(self.knots, self.R), self.R_left, self.K)


def monitoring_process(fit: PartlyFit, j: int, K=1.0) -> MonitoringPath:
    """``R_{n,j}`` on the knots (``j`` is 1-based; ``K`` a constant or a vectorised callable)."""
    return Monitor(fit, j, K).path()


def gof_covariance(fit: PartlyFit, K, j: int, t1: float, t2: float) -> float:
    """Plug-in ``Cov(R_j(t1), R_j(t2))``."""
    return Monitor(fit, j, K).covariance(t1, t2)


# ---------------------------------------------------------------- report

@dataclass(frozen=True)
class GofReport:
    component: object
    test: str
    statistic: float
    p_value: float
    df: int | None = None
    windows: tuple = ()
    increments: tuple = ()
    Sigma: tuple = ()
    method: str | None = None
    B: int | None = None
    seed: int | None = None
    component_statistics: tuple = ()
    failures: int = 0

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return json.dumps(_plain(d), indent=2, sort_keys=True) + "\n"


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


# ---------------------------------------------------------------- chi-squared

def window_boundaries(fit: PartlyFit, windows) -> np.ndarray:
    """``c_0 = 0 < c_1 < ... < c_k = tau``; an integer ``k`` puts boundaries at event-count quantiles."""
    grid = fit.grid
    ev = grid.event_times
    if np.isscalar(windows):
        k = int(windows)
        if k < 1:
            raise GofError("number of windows must be >= 1")
        if k > len(ev):
            raise GofError(f"{k} windows requested but only {len(ev)} events")
        inner = [ev[int(np.ceil(l * len(ev) / k)) - 1] for l in range(1, k)]
        c = np.concatenate([[0.0], inner, [grid.tau]])
    else:
        c = np.asarray(windows, float)
        if c[0] != 0.0 or c[-1] != grid.tau or np.any(np.diff(c) <= 0):
            raise GofError("window boundaries must increase from 0 to tau")
    # windows are right-closed, (c_{l-1}, c_l]
    counts = np.array([np.sum((ev > a) & (ev <= b)) for a, b in zip(c[:-1], c[1:])])
    if np.any(counts == 0):
        raise GofError(f"empty window: window {int(np.argmin(counts)) + 1} contains no events")
    return c


def chi_squared_test(fit: PartlyFit, j: int, windows=4, K=1.0) -> GofReport:
    """``Delta^T Sigma^+ Delta`` over window increments of ``R_j``, referred to chi-squared."""
    mon = Monitor(fit, j, K)
    c = window_boundaries(fit, windows)
    R = np.array([mon.value(t) for t in c])
    delta = np.diff(R)
    C = mon.covariance_matrix(c, c)
    Sig = C[1:, 1:] - C[:-1, 1:] - C[1:, :-1] + C[:-1, :-1]
    Sig = 0.5 * (Sig + Sig.T)
    w, U = np.linalg.eigh(Sig)
    keep = w > 1e-10 * max(w.max(), 0.0) if w.max() > 0 else np.zeros_like(w, bool)
    df = int(keep.sum())
    if df < len(delta):
        log.warning("window covariance has rank %d < %d; using a pseudo-inverse", df, len(delta))
    proj = U[:, keep].T @ delta
    stat = float(np.sum(proj ** 2 / w[keep])) if df else 0.0
    pval = float(stats.chi2.sf(stat, df)) if df else 1.0
    return GofReport(j, "chisq", stat, pval, df, tuple(c), tuple(delta), tuple(map(tuple, Sig)))


# ---------------------------------------------------------------- KS tests

def _components(fit, j):
    if j in ("all", None):
        return list(range(1, fit.ds.p + 1))
    return [int(j)]


def _sup_stat(fit, comps, K):
    mons = [Monitor(fit, c, K) for c in comps]
    vals = [m.path().sup_norm for m in mons]
    return mons, vals


def _gaussian_replicates(fit: PartlyFit, mons, seed: int, B: int) -> np.ndarray:
    """Sup-norm replicates of the limit process (sum over the listed components)."""
    aalen, d = fit.aalen, fit.design
    ev_sub = aalen.risk.event_subjects
    z = fit.ds.covariates
    U = np.concatenate([z[idx] * w[:, None] for idx, w in zip(ev_sub, aalen.event_weights)])
    owner = np.concatenate([np.full(len(idx), e) for e, idx in enumerate(ev_sub)])
    starts = np.flatnonzero(np.r_[True, owner[1:] != owner[:-1]])
    p = fit.ds.p
    Gi1 = aalen.G_inv[:, :p, :]                                  # (E, p, r)
    seeds = np.random.SeedSequence(seed).spawn(B)
    xi = np.stack([np.random.default_rng(s).standard_normal(U.shape[0]) for s in seeds], axis=1)
    X = np.add.reduceat(U[:, :, None] * xi[:, None, :], starts, axis=0) / np.sqrt(fit.n)  # (E, r, B)
    dW = np.einsum("epr,erb->epb", Gi1, X)                        # (E, p, B)
    VG = mons[0].VG
    h = mons[0].Gi @ np.einsum("epm,epb->mb", VG, dW)            # (m, B)
    total = np.zeros(B)
    Kn = len(fit.grid.knots)
    for mon in mons:
        jumps = np.zeros((Kn, B))
        jumps[mon.ev_k] = mon.K_events[:, None] * dW[:, mon.j - 1, :]
        R = np.cumsum(jumps, axis=0) - mon.psi @ h
        total += np.maximum(np.abs(R).max(0), np.abs(R - jumps).max(0))
    return total


@dataclass(frozen=True)
class BootstrapGenerator:
    """Draws datasets from the fitted model with reverse Kaplan-Meier censoring."""

    knots: np.ndarray
    Z: np.ndarray
    p: int
    names: tuple
    block: object
    theta: np.ndarray
    A2_knots: np.ndarray        # (K, q)
    jumps: np.ndarray           # (K, q) jump of A2 at each knot
    M: np.ndarray | None        # (K-1, q, p) drift matrices (plain weights)
    backfit: object
    cens_times: np.ndarray
    cens_surv: np.ndarray       # reverse KM just after each censoring time
    tau: float
    fit_kwargs: dict

    @classmethod
    def from_fit(cls, fit: PartlyFit, **fit_kwargs):
        grid = fit.grid
        K = len(grid.knots)
        jumps = np.zeros((K, fit.ds.q))
        jumps[grid.event_index] = fit.backfit.jumps
        drift = fit.backfit.drift
        M = drift.M if (drift.plain and fit.ds.p and fit.ds.q) else None
        t = np.minimum(fit.ds.times, grid.tau)
        cens = (fit.ds.status == 0) | (fit.ds.times > grid.tau)
        ct = np.unique(t[cens & (t < grid.tau)])
        at_risk = np.array([np.sum(t >= c) for c in ct], float)
        nc = np.array([np.sum((t == c) & cens) for c in ct], float)
        surv = np.cumprod(1.0 - nc / at_risk) if len(ct) else np.zeros(0)
        return cls(grid.knots, fit.ds.covariates, fit.ds.p, fit.ds.names, fit.block, fit.theta_hat,
                   fit.backfit.values, jumps, M, fit.backfit, ct, surv, grid.tau, fit_kwargs)

    def _censoring(self, rng, n):
        u = rng.random(n)
        # C = first censoring time at which the reverse KM drops to or below u
        idx = np.searchsorted(-self.cens_surv, -u, side="left")
        out = np.full(n, np.inf)
        ok = idx < len(self.cens_times)
        out[ok] = self.cens_times[idx[ok]]
        return out

    def cumulative(self, t) -> np.ndarray:
        """``H_i(t)`` for every subject at every entry of ``t`` (shape ``(n, len(t))``)."""
        t = np.atleast_1d(np.asarray(t, float))
        A1 = self.block.integrate(np.zeros_like(t), t, self.theta)[0] if self.p else np.zeros((len(t), 0))
        A2 = self.backfit(t) if self.Z.shape[1] > self.p else np.zeros((len(t), 0))
        return self.Z[:, : self.p] @ A1.T + self.Z[:, self.p:] @ A2.T

    def event_times(self, E: np.ndarray) -> np.ndarray:
        knots, p = self.knots, self.p
        Z1, Z2 = self.Z[:, :p], self.Z[:, p:]
        A1k = self.block.integrate(np.zeros_like(knots), knots, self.theta)[0] if p else np.zeros((len(knots), 0))
        Hk = Z1 @ A1k.T + Z2 @ self.A2_knots.T                      # (n, K)
        Hl = Hk - Z2 @ self.jumps.T                                   # left limits
        seq = np.empty((Hk.shape[0], 2 * len(knots)))
        seq[:, 0::2], seq[:, 1::2] = Hl, Hk
        seq = np.maximum.accumulate(seq, axis=1)                       # clamp to nondecreasing
        Hl_c, Hk_c = seq[:, 0::2], seq[:, 1::2]
        n = len(E)
        T = np.full(n, np.inf)
        k = np.array([np.searchsorted(Hk_c[i], E[i], side="left") for i in range(n)])
        hit = k < len(knots)
        for i in np.flatnonzero(hit):
            kk = k[i]
            if kk == 0 or E[i] > Hl_c[i, kk]:
                T[i] = knots[kk]                                      # inside a jump
                continue
            a, b = knots[kk - 1], knots[kk]
            base, target = Hk_c[i, kk - 1], E[i]
            lo, hi = a, b
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if base + self._interval_gain(i, kk, a, mid) < target:
                    lo = mid
                else:
                    hi = mid
                if hi - lo <= 1e-10 * self.tau:
                    break
            T[i] = 0.5 * (lo + hi)
        return T

    def _interval_gain(self, i, k, a, t):
        """Continuous increase of ``H_i`` over ``[a, t]`` inside interval ``k``."""
        p = self.p
        z1, z2 = self.Z[i, :p], self.Z[i, p:]
        if p == 0:
            return 0.0
        cum, _ = self.block.integrate(a, t, self.theta)
        g = z1 @ cum
        if z2.size:
            if self.M is not None:
                g += z2 @ (self.M[k - 1] @ cum)
            else:
                g += z2 @ self.backfit.drift.on_interval(k, a, t, self.block, self.theta)[0]
        return g

    def draw(self, rng: np.random.Generator) -> Dataset:
        n = self.Z.shape[0]
        T = self.event_times(rng.exponential(1.0, n))
        C = self._censoring(rng, n)
        cap = np.minimum(C, self.tau)
        t = np.minimum(T, cap)
        d = (T <= cap).astype(int)
        t = np.where(t <= 0, self.tau * 1e-12, t)
        return Dataset(t, d, self.Z, self.p, self.names)


def _bootstrap_job(args):
    gen, ss, comps, K = args
    rng = np.random.default_rng(ss)
    try:
        ds = gen.draw(rng)
        f = fit_partly(ds, gen.block, theta_init=gen.theta, **gen.fit_kwargs)
        return float(sum(Monitor(f, c, K).path().sup_norm for c in comps)), None
    except Exception as exc:
        return float("nan"), f"{type(exc).__name__}: {exc}"


def ks_test(fit: PartlyFit, j=1, method: str = "gaussian", B: int = 1000, seed: int | None = None,
            K=1.0, workers: int = 1) -> GofReport:
    """Sup-norm test ``max_t |R_j(t)|``; ``j='all'`` gives the simultaneous statistic ``sum_j ||R_j||``.

    The p-value is ``(1 + #{replicates >= observed}) / (B + 1)``.
    """
    if B < MIN_REPLICATES:
        raise GofError(f"B \u2265 {MIN_REPLICATES} required")
    if seed is None:
        raise GofError("an explicit seed is required for simulation-calibrated tests")
    comps = _components(fit, j)
    mons, vals = _sup_stat(fit, comps, K)
    stat = float(sum(vals))
    failures = 0
    if method == "gaussian":
        reps = _gaussian_replicates(fit, mons, seed, B)
    elif method == "bootstrap":
        gen = BootstrapGenerator.from_fit(fit, Vn_choice=fit.Vn_choice,
                                          step_b_weights="plain" if fit.weight_scheme == "plain" else "optimal")
        seeds = np.random.SeedSequence(seed).spawn(B)
        out = map_ordered(_bootstrap_job, [(gen, s, comps, K) for s in seeds], workers)
        reps = np.array([o[0] for o in out])
        errs = [o[1] for o in out if o[1] is not None]
        failures = len(errs)
        if failures > FAILURE_LIMIT * B:
            raise TooManyFailures(f"{failures} of {B} bootstrap refits failed; first: {errs[0]}")
        reps = reps[np.isfinite(reps)]
    else:
        raise GofError(f"unknown calibration method '{method}'")
    tol = 1e-12 * max(1.0, abs(stat))
    pval = (1 + int(np.sum(reps >= stat - tol))) / (len(reps) + 1)
    return GofReport(j, "ks", stat, float(pval), method=method, B=B, seed=seed,
                     component_statistics=tuple(vals), failures=failures)


# ---------------------------------------------------------------- size and power study

@dataclass(frozen=True)
class GofStudy:
    """p-values of the chi-squared and gaussian-calibrated KS tests over simulated datasets."""

    chisq_p: np.ndarray
    ks_p: np.ndarray
    seed: int
    reps: int
    failures: tuple = ()

    def rejection_rate(self, test: str, level: float = 0.05) -> float:
        p = {"chisq": self.chisq_p, "ks": self.ks_p}[test]
        return float(np.mean(p <= level))


def _study_job(args):
    sc, Z, ss, j, windows, B = args
    rng = np.random.default_rng(ss)
    ks_seed = int(ss.generate_state(1)[0])
    ds = sc.dataset(Z, rng)
    try:
        fit = fit_partly(ds, sc.fit_block(), tau=sc.fit_tau)
        pc = chi_squared_test(fit, j, windows).p_value
        pk = ks_test(fit, j, "gaussian", B=B, seed=ks_seed).p_value
        return pc, pk, None
    except Exception as exc:  # recorded, judged against the failure limit
        return np.nan, np.nan, f"{type(exc).__name__}: {exc}"


def run_gof_study(sc, reps: int, seed: int, j: int = 1, windows=4, B: int = 1000,
                  workers: int = 1) -> GofStudy:
    """Fit ``sc.fit_block()`` to ``reps`` datasets from ``sc`` and test component ``j``.

    Covariates are drawn once and held fixed, as in the Monte Carlo study.
    """
    from .simulate import replicate_seeds

    cov_ss, seeds = replicate_seeds(seed, reps)
    Z = sc.draw_covariates(np.random.default_rng(cov_ss))
    out = map_ordered(_study_job, [(sc, Z, s, j, windows, B) for s in seeds], workers)
    fails = tuple((i, o[2]) for i, o in enumerate(out) if o[2] is not None)
    if len(fails) > FAILURE_LIMIT * reps:
        raise TooManyFailures(f"{len(fails)} of {reps} replications failed; first: {fails[0][1]}")
    pc = np.array([o[0] for o in out if o[2] is None])
    pk = np.array([o[1] for o in out if o[2] is None])
    return GofStudy(pc, pk, seed, reps, fails)
