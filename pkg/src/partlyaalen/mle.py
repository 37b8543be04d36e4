"""Full maximum likelihood when every regressor function is parametric."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import Dataset, build_time_grid
from .families import ParameterError, ParametricBlock, gauss_legendre

INFO_ORDER = 24


class ConvergenceError(RuntimeError):
    """An iterative fit did not converge."""


class HazardError(ValueError):
    """Fitted hazard is nonpositive at an observed event."""


def _exposure(ds: Dataset, tau):
    grid = build_time_grid(ds, tau)
    t = np.minimum(ds.times, grid.tau)
    d = ds.status.astype(bool) & (ds.times <= grid.tau)
    return t, d, grid.tau


def _check_block(ds: Dataset, block: ParametricBlock):
    if block.p != ds.r:
        raise ParameterError(f"likelihood needs a family for each of the {ds.r} columns, got {block.p}")


def _event_terms(ds, block, theta, t, d):
    idx = np.flatnonzero(d)
    z = ds.covariates[idx]
    alpha, grad = block.evaluate(t[idx], theta)
    lp = np.einsum("ij,ij->i", z, alpha)
    if np.any(lp <= 0):
        k = int(np.argmin(lp))
        raise HazardError(
            f"nonpositive fitted hazard {lp[k]:.3g} at event time {t[idx[k]]:.6g} (subject {int(idx[k])})"
        )
    zg = np.einsum("ij,ijm->im", z, grad)
    return idx, z, lp, zg


def log_likelihood(ds: Dataset, block: ParametricBlock, theta, tau="auto") -> float:
    """``sum_i [ sum_events log z_i^T alpha(s) - int_0^{t_i ^ tau} z_i^T alpha(s) ds ]``."""
    _check_block(ds, block)
    theta = block.check(theta)
    t, d, _ = _exposure(ds, tau)
    _, _, lp, _ = _event_terms(ds, block, theta, t, d)
    cum, _ = block.integrate(np.zeros_like(t), t, theta)
    return float(np.sum(np.log(lp)) - np.sum(ds.covariates * cum))


def score(ds: Dataset, block: ParametricBlock, theta, tau="auto") -> np.ndarray:
    """Analytic gradient ``u_n(theta)`` of :func:`log_likelihood`."""
    _check_block(ds, block)
    theta = block.check(theta)
    t, d, _ = _exposure(ds, tau)
    _, _, lp, zg = _event_terms(ds, block, theta, t, d)
    _, cum_grad = block.integrate(np.zeros_like(t), t, theta)
    return (zg / lp[:, None]).sum(axis=0) - np.einsum("ij,ijm->m", ds.covariates, cum_grad)


def observed_hessian(ds, block, theta, tau="auto") -> np.ndarray:
    """``i_n(theta)``, the second derivative of the log-likelihood."""
    theta = block.check(theta)
    t, d, _ = _exposure(ds, tau)
    idx, z, lp, zg = _event_terms(ds, block, theta, t, d)
    zh = np.einsum("ij,ijab->iab", z, block.hessian(t[idx], theta))
    ev = (zh / lp[:, None, None]).sum(0) - np.einsum("ia,ib->ab", zg / lp[:, None], zg / lp[:, None])
    cum_h = block.integrate_hessian(np.zeros_like(t), t, theta)
    return ev - np.einsum("ij,ijab->ab", ds.covariates, cum_h)


def information(ds, block, theta, tau="auto", order: int = INFO_ORDER) -> np.ndarray:
    """``J_n = n^{-1} sum_i int_0^{t_i ^ tau} (alpha*^T z_i)(alpha*^T z_i)^T / z_i^T alpha ds``.

    This equals ``int alpha*^T F_n alpha* ds`` and is evaluated by per-subject
    Gauss-Legendre quadrature.
    """
    theta = block.check(theta)
    t, _, _ = _exposure(ds, tau)
    nodes, w = gauss_legendre(np.zeros_like(t), t, order)  # (n, G)
    alpha, grad = block.evaluate(nodes, theta)
    z = ds.covariates
    lp = np.einsum("ij,igj->ig", z, alpha)
    if np.any(lp <= 0):
        raise HazardError("nonpositive fitted hazard inside an exposure interval")
    zg = np.einsum("ij,igjm->igm", z, grad)
    return np.einsum("ig,iga,igb->ab", w / lp, zg, zg) / ds.n


@dataclass(frozen=True)
class MleFit:
    block: ParametricBlock
    theta_hat: np.ndarray
    log_likelihood: float
    information: np.ndarray
    covariance: np.ndarray
    observed_information: np.ndarray | None
    trace: tuple
    converged: bool
    flagged: bool = False

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parameter", "estimate", "se"])
        for k, (est, se) in enumerate(zip(self.theta_hat, self.se)):
            w.writerow([f"theta_{k + 1}", repr(float(est)), repr(float(se))])
        return buf.getvalue()


def fit_mle(ds: Dataset, block: ParametricBlock, theta_init=None, tau="auto",
            max_iter: int = 100, tol: float = 1e-8) -> MleFit:
    """Newton-Raphson with step halving on the log-likelihood.

    Uses the observed information when the block supplies Hessians and it is
    negative definite, otherwise a scoring step with ``n J_n``.
    """
    _check_block(ds, block)
    if theta_init is None:
        from .aalen import fit_aalen
        af = fit_aalen(ds, build_time_grid(ds, tau))
        theta_init = block.initial_guess(af.grid.knots[1:], af.cumulative.values[1:])
    theta = block.check(theta_init)
    n, m = ds.n, block.m
    ll = log_likelihood(ds, block, theta, tau)
    trace = [(0, ll, float("nan"))]
    converged = False
    for it in range(1, max_iter + 1):
        u = score(ds, block, theta, tau)
        unorm = float(np.linalg.norm(u) / n)
        trace[-1] = (trace[-1][0], trace[-1][1], unorm)
        if unorm < tol * np.sqrt(m):
            converged = True
            break
        try:
            H = observed_hessian(ds, block, theta, tau)
            if np.any(np.linalg.eigvalsh(0.5 * (H + H.T)) >= 0):
                raise np.linalg.LinAlgError
            step = -np.linalg.solve(H, u)
        except (NotImplementedError, np.linalg.LinAlgError):
            step = np.linalg.solve(n * information(ds, block, theta, tau), u)
        lam, accepted = 1.0, False
        for _ in range(60):
            cand = theta + lam * step
            try:
                ll_new = log_likelihood(ds, block, cand, tau)
            except (ParameterError, HazardError):
                lam *= 0.5
                continue
            if ll_new >= ll - 1e-12 * abs(ll):
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break
        theta, ll = cand, ll_new
        trace.append((it, ll, float("nan")))
        if np.max(np.abs(lam * step)) < 1e-14 * (1 + np.max(np.abs(theta))):
            converged = float(np.linalg.norm(score(ds, block, theta, tau)) / n) < 1e-6
            break
    if not converged:
        raise ConvergenceError(f"MLE did not converge in {max_iter} iterations (score norm {unorm:.3g})")
    J = information(ds, block, theta, tau)
    try:
        obs = -observed_hessian(ds, block, theta, tau) / n
    except NotImplementedError:
        obs = None
    flagged = bool(np.any(np.linalg.eigvalsh(J) <= 0))
    if flagged:
        raise np.linalg.LinAlgError("information matrix is not positive definite at the optimum")
    return MleFit(block, theta, ll, J, np.linalg.inv(J) / n, obs, tuple(trace), converged, flagged)
