"""Nonparametric Aalen estimation with plain or estimated-optimal weights."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import COND_LIMIT, Dataset, RankError, RiskSets, StepPath, TimeGrid, build_time_grid
from .families import GL_ORDER, gauss_legendre

log = logging.getLogger(__name__)


class HazardFloorError(ValueError):
    """Estimated linear predictor too close to zero for optimal weights."""


# ---------------------------------------------------------------- weights

class WeightScheme:
    """Per-subject previsible weights ``w_i(s)``."""

    name = "custom"
    constant = False

    def at(self, s: np.ndarray, subjects: np.ndarray) -> np.ndarray:
        """Weights of shape ``(len(subjects), len(s))``."""
        raise NotImplementedError


class PlainWeights(WeightScheme):
    name = "plain"
    constant = True

    def at(self, s, subjects):
        return np.ones((len(subjects), np.size(s)))


class FunctionWeights(WeightScheme):
    """Wraps ``fn(s) -> array of n weights``."""

    def __init__(self, fn: Callable[[float], np.ndarray]):
        self.fn = fn

    def at(self, s, subjects):
        s = np.atleast_1d(s)
        return np.stack([np.asarray(self.fn(float(x)), float)[subjects] for x in s], axis=1)


class OptimalWeights(WeightScheme):
    """``w_i(s) = 1 / z_i^T alpha(s)`` from a pilot hazard-factor estimate."""

    name = "estimated-optimal"

    def __init__(self, ds: Dataset, alpha: Callable[[np.ndarray], np.ndarray], floor: float | None = None):
        self.z = ds.covariates
        self.alpha = alpha
        self.floor = floor

    def linear_predictor(self, s, subjects):
        a = np.asarray(self.alpha(np.atleast_1d(s)), float)  # (len(s), r)
        return self.z[subjects] @ a.T

    def at(self, s, subjects):
        lp = self.linear_predictor(s, subjects)
        if self.floor is not None and np.any(lp < self.floor):
            i, g = np.unravel_index(np.argmin(lp), lp.shape)
            raise HazardFloorError(
                f"fitted hazard {lp[i, g]:.3g} below floor {self.floor:.3g} "
                f"for subject {int(subjects[i])} at time {float(np.atleast_1d(s)[g]):.6g}"
            )
        return 1.0 / lp


def as_scheme(weights) -> WeightScheme:
    if weights is None or (isinstance(weights, str) and weights == "plain"):
        return PlainWeights()
    if isinstance(weights, WeightScheme):
        return weights
    if callable(weights):
        return FunctionWeights(weights)
    raise TypeError(f"unsupported weights {weights!r}")


def interval_nodes(grid: TimeGrid, order: int = GL_ORDER):
    """Gauss-Legendre nodes/weights on each inter-knot interval, shape ``(K-1, order)``."""
    return gauss_legendre(grid.knots[:-1], grid.knots[1:], order)


def weighted_moments(risk: RiskSets, k: int, scheme: WeightScheme, s: np.ndarray) -> np.ndarray:
    """``sum_{t_i >= knot_k} w_i(s) z_i z_i^T`` for each ``s`` (shape ``(len(s), r, r)``)."""
    idx = risk.at_risk(k)
    z = risk.ds.covariates[idx]
    w = scheme.at(s, idx)
    return np.einsum("ig,ij,il->gjl", w, z, z)


# ---------------------------------------------------------------- fit

@dataclass(frozen=True)
class AalenFit:
    """Aalen estimator ``A~(t)`` and everything needed for plug-in variances.

    Limit-scale quantities (``G_inv``, ``dH``) are those of ``sqrt(n)``-scaled
    processes; ``variance_path`` is the finite-sample covariance of ``A~(t)``.
    """

    ds: Dataset
    grid: TimeGrid
    risk: RiskSets
    increments: np.ndarray          # (E, r) jumps at grid.event_times
    cumulative: StepPath            # (K, r)
    G_inv: np.ndarray               # (E, r, r) inverse of n^{-1} sum Y w z z^T
    dH: np.ndarray                  # (E, r, r) n^{-1} sum w^2 z z^T dN
    event_weights: tuple            # weights of the event subjects at each event
    scheme: WeightScheme
    variance_path: StepPath         # (K, r, r)
    warnings: tuple = ()
    F_path: Callable | None = field(default=None, repr=False)

    @property
    def weight_scheme(self) -> str:
        return self.scheme.name

    @property
    def event_times(self) -> np.ndarray:
        return self.grid.event_times

    @property
    def n(self) -> int:
        return self.ds.n

    def se_path(self) -> StepPath:
        var = np.diagonal(self.variance_path.values, axis1=1, axis2=2)
        return StepPath(self.grid.knots, np.sqrt(np.maximum(var, 0.0)))

    def to_csv(self) -> str:
        r = self.ds.r
        vals = np.hstack([self.cumulative.values, self.se_path().values])
        labels = tuple(f"A_{j + 1}" for j in range(r)) + tuple(f"se_{j + 1}" for j in range(r))
        return StepPath(self.grid.knots, vals, labels).to_csv()


def fit_aalen(ds: Dataset, grid: TimeGrid | None = None, weights=None, variance: str = "counting") -> AalenFit:
    """Weighted least-squares Aalen estimator.

    At each event knot ``dA~ = [sum Y_i w_i z_i z_i^T]^{-1} sum w_i z_i dN_i``.
    If the moment matrix becomes ill-conditioned at some event the fit is
    truncated at the previous event (recorded in ``warnings``); failure at the
    first event raises :class:`RankError`.
    """
    if grid is None:
        grid = build_time_grid(ds)
    scheme = as_scheme(weights)
    risk = RiskSets(ds, grid)
    ev_k = grid.event_index
    E, r, n = len(ev_k), ds.r, ds.n

    if scheme.constant:
        S = risk.plain_moments()[ev_k]
        ev_w = [np.ones(len(idx)) for idx in risk.event_subjects]
    else:
        S = np.empty((E, r, r))
        ev_w = []
        for e, k in enumerate(ev_k):
            s = grid.knots[k:k + 1]
            S[e] = weighted_moments(risk, k, scheme, s)[0]
            idx = risk.event_subjects[e]
            ev_w.append(scheme.at(s, idx)[:, 0])
    ev_w = [np.asarray(w, float) for w in ev_w]

    cond = np.linalg.cond(S)
    bad = np.flatnonzero(~np.isfinite(cond) | (cond > COND_LIMIT))
    warnings = []
    if bad.size:
        first = bad[0]
        if first == 0:
            raise RankError(
                f"moment matrix singular at first event t={grid.knots[ev_k[0]]:g}; "
                "covariates are not linearly independent in the risk set"
            )
        new_tau = float(grid.knots[ev_k[first - 1]])
        msg = (f"rank failure at t={grid.knots[ev_k[first]]:g} (cond={cond[first]:.3g}); "
               f"fit truncated at tau={new_tau:g}")
        log.warning(msg)
        warnings.append(msg)
        grid = grid.truncated(new_tau)
        return fit_aalen_truncated(ds, grid, scheme, variance, warnings)

    zsum = np.zeros((E, r))
    Dw2 = np.zeros((E, r, r))
    z = ds.covariates
    for e, idx in enumerate(risk.event_subjects):
        zi = z[idx]
        zsum[e] = ev_w[e] @ zi
        Dw2[e] = (zi * ev_w[e][:, None] ** 2).T @ zi
    S_inv = np.linalg.inv(S)
    dA = np.einsum("ejk,ek->ej", S_inv, zsum)

    K = len(grid.knots)
    cum = np.zeros((K, r))
    cum[ev_k] = dA
    cum = np.cumsum(cum, axis=0)

    G_inv = n * S_inv
    dH = Dw2 / n
    fit = AalenFit(
        ds=ds, grid=grid, risk=risk, increments=dA,
        cumulative=StepPath(grid.knots, cum, tuple(f"A_{j + 1}" for j in range(r))),
        G_inv=G_inv, dH=dH, event_weights=tuple(ev_w), scheme=scheme,
        variance_path=StepPath(grid.knots, np.zeros((K, r, r))), warnings=tuple(warnings),
    )
    return _with_variance(fit, aalen_variance(fit, variance))


def fit_aalen_truncated(ds, grid, scheme, variance, warnings):
    fit = fit_aalen(ds, grid, scheme, variance)
    return _replace(fit, warnings=tuple(warnings) + fit.warnings)


def _replace(fit: AalenFit, **kw) -> AalenFit:
    from dataclasses import replace
    return replace(fit, **kw)


def _with_variance(fit: AalenFit, path: StepPath) -> AalenFit:
    return _replace(fit, variance_path=path)


def aalen_variance(fit: AalenFit, option: str = "counting") -> StepPath:
    """Plug-in covariance path ``n^{-1} int_0^t G_n^{-1} dH^ G_n^{-1}``.

    ``counting`` uses ``dH^ = n^{-1} sum w_i^2 z_i z_i^T dN_i`` (the default);
    ``risk-set`` uses ``n^{-1} sum Y_i w_i^2 z_i z_i^T z_i^T dA~``.
    """
    grid, n = fit.grid, fit.n
    ev_k = grid.event_index
    if option == "counting":
        dH = fit.dH
    elif option == "risk-set":
        dH = np.empty_like(fit.dH)
        z = fit.ds.covariates
        for e, k in enumerate(ev_k):
            idx = fit.risk.at_risk(k)
            w = fit.scheme.at(grid.knots[k:k + 1], idx)[:, 0]
            zi = z[idx]
            lp = zi @ fit.increments[e]
            dH[e] = (zi * (w ** 2 * lp)[:, None]).T @ zi / n
    else:
        raise ValueError(f"unknown variance option '{option}'")
    inc = np.einsum("eij,ejk,ekl->eil", fit.G_inv, dH, fit.G_inv) / n
    K, r = len(grid.knots), fit.ds.r
    out = np.zeros((K, r, r))
    out[ev_k] = inc
    out = np.cumsum(out, axis=0)
    out = 0.5 * (out + np.swapaxes(out, 1, 2))
    return StepPath(grid.knots, out)


# ---------------------------------------------------------------- smoothing

@dataclass(frozen=True)
class SmoothedAlpha:
    """Epanechnikov kernel smooth of Aalen increments with reflection at 0 and tau."""

    event_times: np.ndarray
    increments: np.ndarray
    bandwidth: float
    tau: float
    boundary: str = "reflection"

    def __call__(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, float))
        b = self.bandwidth
        out = np.zeros((s.shape[0], self.increments.shape[1]))
        centres = [self.event_times]
        if self.boundary == "reflection":
            centres += [-self.event_times, 2.0 * self.tau - self.event_times]
        chunk = max(1, 2_000_000 // max(1, len(self.event_times)))
        for lo in range(0, s.shape[0], chunk):
            ss = s[lo:lo + chunk]
            kw = np.zeros((ss.shape[0], len(self.event_times)))
            for c in centres:
                u = (ss[:, None] - c[None, :]) / b
                kw += np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u) / b, 0.0)
            out[lo:lo + chunk] = kw @ self.increments
        return out


def default_bandwidth(tau: float, n: int) -> float:
    return 1.5 * tau * n ** (-0.2)


def smooth_alpha(fit: AalenFit, bandwidth: float | None = None) -> SmoothedAlpha:
    if bandwidth is None:
        bandwidth = default_bandwidth(fit.grid.tau, fit.n)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    return SmoothedAlpha(fit.event_times, fit.increments, float(bandwidth), fit.grid.tau)


# ---------------------------------------------------------------- optimal weights

def f_matrix_on_intervals(risk: RiskSets, alpha: Callable, order: int = GL_ORDER, floor: float | None = None):
    """``F_n(s) = n^{-1} sum Y_i z_i z_i^T / z_i^T alpha(s)`` at interval nodes.

    Returns nodes, quadrature weights (both ``(K-1, G)``) and ``F`` of shape
    ``(K-1, G, r, r)``.
    """
    grid = risk.grid
    nodes, qw = interval_nodes(grid, order)
    scheme = OptimalWeights(risk.ds, alpha, floor)
    F = np.zeros(nodes.shape + (risk.ds.r, risk.ds.r))
    for k in range(1, len(grid.knots)):
        F[k - 1] = weighted_moments(risk, k, scheme, nodes[k - 1]) / risk.ds.n
    return nodes, qw, F


def f_matrix_at_events(risk: RiskSets, alpha: Callable, floor: float | None = None) -> np.ndarray:
    scheme = OptimalWeights(risk.ds, alpha, floor)
    grid = risk.grid
    return np.stack([
        weighted_moments(risk, k, scheme, grid.knots[k:k + 1])[0] for k in grid.event_index
    ]) / risk.ds.n


def hazard_floor(risk: RiskSets, alpha: Callable, order: int = GL_ORDER) -> float:
    """``1e-8`` times the largest fitted linear predictor over the evaluation points."""
    grid = risk.grid
    nodes, _ = interval_nodes(grid, order)
    pts = np.concatenate([grid.event_times, nodes.reshape(-1)])
    lp = risk.ds.covariates @ np.asarray(alpha(pts)).T
    return 1e-8 * float(np.max(lp))


def fit_aalen_optimal(
    ds: Dataset,
    grid: TimeGrid | None = None,
    bandwidth: float | None = None,
    alpha: Callable | None = None,
) -> AalenFit:
    """Aalen fit with estimated optimal weights ``1 / z_i^T alpha~(s)``.

    ``alpha`` defaults to the kernel smooth of a plain pilot fit. The returned
    fit carries ``F_path`` (the estimated ``F_n`` evaluator) and a variance path
    ``n^{-1} int_0^t F~_n(s)^{-1} ds``.
    """
    if grid is None:
        grid = build_time_grid(ds)
    if alpha is None:
        pilot = fit_aalen(ds, grid)
        grid = pilot.grid
        alpha = smooth_alpha(pilot, bandwidth)
    risk = RiskSets(ds, grid)
    floor = hazard_floor(risk, alpha)
    scheme = OptimalWeights(ds, alpha, floor)
    fit = fit_aalen(ds, grid, scheme)
    nodes, qw, F = f_matrix_on_intervals(fit.risk, alpha, floor=floor)
    F_inv = np.linalg.inv(F)
    inc = np.einsum("kg,kgij->kij", qw, F_inv) / ds.n
    K, r = len(fit.grid.knots), ds.r
    var = np.zeros((K, r, r))
    var[1:] = np.cumsum(inc, axis=0)
    return _replace(
        fit,
        variance_path=StepPath(fit.grid.knots, 0.5 * (var + np.swapaxes(var, 1, 2))),
        F_path=alpha,
    )
