"""Two-step estimation in the partly parametric additive hazard model.

Step (a) fits the parametric block by minimising a weighted distance between
the parametric cumulative and the Aalen estimate of the first ``p`` columns.
Step (b) backfits the nonparametric block given ``theta_hat``. The joint
plug-in covariance of ``(A_(1)(t, theta_hat), A^_(2)(t))`` is available at any
``t`` in ``[0, tau]``.

Integrals against piecewise-constant empirical quantities are computed per
inter-knot interval: closed-form cumulatives where a family has them, and
Gauss-Legendre nodes (order 7) for products of parametric functions.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .aalen import (AalenFit, OptimalWeights, PlainWeights, SmoothedAlpha, WeightScheme,
                    f_matrix_at_events, f_matrix_on_intervals, fit_aalen, hazard_floor,
                    interval_nodes, smooth_alpha, weighted_moments)
from .data import Dataset, DataError, RiskSets, StepPath, TimeGrid, build_time_grid, guarded_inverse
from .families import ParameterError, ParametricBlock, gauss_legendre
from .mle import ConvergenceError

log = logging.getLogger(__name__)

V_CHOICES = ("default", "optimal")


# ---------------------------------------------------------------- step (a)

@dataclass(frozen=True)
class CriterionDesign:
    """Everything step (a) needs that does not depend on ``theta``.

    ``V_nodes`` is ``V_n`` at the interval quadrature nodes and ``V_events``
    at the event knots; ``dQ`` holds the limit-scale increments
    ``[G^{-1} dH G^{-1}]_11`` of the Aalen fit.
    """

    nodes: np.ndarray       # (K-1, G)
    qw: np.ndarray          # (K-1, G)
    V_nodes: np.ndarray     # (K-1, G, p, p)
    V_events: np.ndarray    # (E, p, p)
    event_times: np.ndarray  # (E,)
    dA1: np.ndarray         # (E, p)
    dQ: np.ndarray          # (E, p, p)
    choice: str


def _schur11(F, p):
    if F.shape[-1] == p:
        return F[..., :p, :p]
    F11, F12 = F[..., :p, :p], F[..., :p, p:]
    F21, F22 = F[..., p:, :p], F[..., p:, p:]
    return F11 - F12 @ np.linalg.solve(F22, F21)


def criterion_design(ds: Dataset, aalen: AalenFit, p: int, Vn_choice: str = "default",
                     smoothed: SmoothedAlpha | None = None) -> CriterionDesign:
    if Vn_choice not in V_CHOICES:
        raise ValueError(f"Vn_choice must be one of {V_CHOICES}")
    grid, risk = aalen.grid, aalen.risk
    nodes, qw = interval_nodes(grid)
    ev_k = grid.event_index
    if Vn_choice == "default":
        Vk = risk.plain_moments(slice(0, p), slice(0, p)) / ds.n      # (K, p, p)
        V_nodes = np.broadcast_to(Vk[1:, None], nodes.shape + (p, p)).copy()
        V_events = Vk[ev_k]
    else:
        if smoothed is None:
            raise ValueError("optimal V_n requires a smoothed hazard estimate")
        floor = hazard_floor(risk, smoothed)
        _, _, F = f_matrix_on_intervals(risk, smoothed, floor=floor)
        V_nodes = _schur11(F, p)
        V_events = _schur11(f_matrix_at_events(risk, smoothed, floor), p)
    dQ = np.einsum("eij,ejk,ekl->eil", aalen.G_inv, aalen.dH, aalen.G_inv)[:, :p, :p]
    return CriterionDesign(nodes, qw, V_nodes, V_events, grid.event_times,
                           aalen.increments[:, :p], dQ, Vn_choice)


def _terms(block: ParametricBlock, d: CriterionDesign, theta):
    a_n, g_n = block.evaluate(d.nodes, theta)
    a_e, g_e = block.evaluate(d.event_times, theta)
    return a_n, g_n, a_e, g_e


def _criterion_value(block, d, theta) -> float:
    a_n, _, a_e, _ = _terms(block, d, theta)
    quad = np.einsum("kg,kgi,kgij,kgj->", d.qw, a_n, d.V_nodes, a_n)
    lin = np.einsum("ei,eij,ej->", a_e, d.V_events, d.dA1)
    return float(quad - 2.0 * lin)


def _score_gamma(block, d, theta):
    a_n, g_n, a_e, g_e = _terms(block, d, theta)
    S = np.einsum("eim,eij,ej->m", g_e, d.V_events, d.dA1) \
        - np.einsum("kg,kgim,kgij,kgj->m", d.qw, g_n, d.V_nodes, a_n)
    Gam = np.einsum("kg,kgia,kgij,kgjb->ab", d.qw, g_n, d.V_nodes, g_n)
    return S, 0.5 * (Gam + Gam.T)


def criterion(ds: Dataset, aalen: AalenFit, block: ParametricBlock, theta,
              Vn_choice: str = "default", smoothed: SmoothedAlpha | None = None) -> float:
    """``C_n(theta) = int alpha^T V_n alpha ds - 2 sum_events alpha^T V_n dA~_(1)``."""
    theta = block.check(theta)
    d = criterion_design(ds, aalen, block.p, Vn_choice, smoothed)
    return _criterion_value(block, d, theta)


@dataclass(frozen=True)
class StepAResult:
    theta_hat: np.ndarray
    Gamma: np.ndarray
    Omega: np.ndarray
    n: int
    iterations: int
    residual: float

    @property
    def Lambda(self) -> np.ndarray:
        """Limit covariance ``Gamma^{-1} Omega Gamma^{-1}`` of ``sqrt(n)(theta_hat - theta)``."""
        Gi = np.linalg.inv(self.Gamma)
        L = Gi @ self.Omega @ Gi
        return 0.5 * (L + L.T)

    @property
    def covariance(self) -> np.ndarray:
        return self.Lambda / self.n


def _initial_theta(block, aalen):
    knots = aalen.grid.knots
    return block.initial_guess(knots[1:], aalen.cumulative.values[1:, : block.p])


def _curvature(block, d, theta, S, Gam):
    """Hessian of ``C_n / 2`` in the free coordinates, or None if unavailable."""
    try:
        hn = block.hessian(d.nodes, theta)
        he = block.hessian(d.event_times, theta)
    except NotImplementedError:
        return None
    a_n = block.evaluate(d.nodes, theta)[0]
    H = Gam + np.einsum("kg,kgiab,kgij,kgj->ab", d.qw, hn, d.V_nodes, a_n) \
        - np.einsum("eiab,eij,ej->ab", he, d.V_events, d.dA1)
    D = block.free_jacobian(theta)
    Hu = H * np.outer(D, D) - np.diag(np.where(block.positive, S * theta, 0.0))
    return 0.5 * (Hu + Hu.T)


def solve_step_a(block: ParametricBlock, d: CriterionDesign, theta_init, n: int,
                 max_iter: int = 100, tol: float = 1e-8) -> StepAResult:
    """Solve ``S_n(theta) = 0`` by minimising ``C_n`` with step halving.

    Each iteration tries a Newton step (when the full Hessian of ``C_n`` is
    available and positive definite) and otherwise the Gauss-Newton step that
    drops the second-derivative terms. Positive parameters are updated on the
    log scale.
    """
    theta = block.check(theta_init)
    C = _criterion_value(block, d, theta)
    it = 0
    for it in range(1, max_iter + 1):
        S, Gam = _score_gamma(block, d, theta)
        res = float(np.linalg.norm(S))
        if res < tol:
            break
        D = block.free_jacobian(theta)
        grad_u = D * S
        directions = []
        with np.errstate(over="ignore", invalid="ignore"):
            Hu = _curvature(block, d, theta, S, Gam)
        if Hu is not None and np.all(np.isfinite(Hu)) and np.all(np.linalg.eigvalsh(Hu) > 0):
            directions.append(np.linalg.solve(Hu, grad_u))
        try:
            directions.append(np.linalg.solve(Gam * np.outer(D, D), grad_u))
        except np.linalg.LinAlgError:
            directions.append(grad_u)
        u = block.to_free(theta)
        accepted = False
        for du in directions:
            lam = 1.0
            for _ in range(60):
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        cand = block.from_free(u + lam * du)
                        C_new = _criterion_value(block, d, block.check(cand))
                except ParameterError:
                    lam *= 0.5
                    continue
                if np.isfinite(C_new) and C_new <= C + 1e-14 * max(1.0, abs(C)):
                    accepted = True
                    break
                lam *= 0.5
            if accepted:
                break
        if not accepted:
            break
        if np.all(np.abs(cand - theta) <= 1e-15 * (1.0 + np.abs(theta))):
            theta = cand
            break
        theta, C = cand, C_new
    S, Gam = _score_gamma(block, d, theta)
    res = float(np.linalg.norm(S))
    if not res < tol:
        if not res <= 1e-6:
            raise ConvergenceError(f"step (a) did not converge: |S_n| = {res:.3g} after {it} iterations")
        log.warning("step (a) stopped at |S_n| = %.3g (machine precision limit)", res)
    if np.any(np.linalg.eigvalsh(Gam) <= 0):
        raise np.linalg.LinAlgError("Gamma_hat is not positive definite")
    _, _, _, g_e = _terms(block, d, theta)
    VG = np.einsum("eij,ejm->eim", d.V_events, g_e)
    Om = np.einsum("eia,eij,ejb->ab", VG, d.dQ, VG)
    return StepAResult(theta, Gam, 0.5 * (Om + Om.T), n, it, res)


def fit_step_a(ds: Dataset, aalen: AalenFit, block: ParametricBlock, Vn_choice: str = "default",
               theta_init=None, smoothed: SmoothedAlpha | None = None) -> StepAResult:
    """Minimise the criterion; returns ``theta_hat``, ``Gamma_hat`` and ``Omega_hat``."""
    if block.p != ds.p:
        raise ParameterError(f"block has {block.p} families but dataset has p={ds.p}")
    d = criterion_design(ds, aalen, block.p, Vn_choice, smoothed)
    if theta_init is None:
        theta_init = _initial_theta(block, aalen)
    return solve_step_a(block, d, theta_init, ds.n)


# ---------------------------------------------------------------- step (b)

class DriftOperator:
    """``M(s) = -G_22(s)^{-1} G_21(s)`` on each interval, with integrals against ``alpha_(1)``."""

    def __init__(self, risk: RiskSets, scheme: WeightScheme, p: int):
        self.risk, self.scheme, self.p = risk, scheme, p
        self.q = risk.ds.r - p
        self.plain = scheme.constant
        if self.plain and self.p and self.q:
            S = risk.plain_moments()[1:]
            S22 = guarded_inverse(S[:, p:, p:], "G_22 on an interval")
            self.M = -S22 @ S[:, p:, :p]          # (K-1, q, p)

    def _M_at(self, k: int, s: np.ndarray) -> np.ndarray:
        S = weighted_moments(self.risk, k, self.scheme, s)
        p = self.p
        return -np.linalg.solve(S[:, p:, p:], S[:, p:, :p])

    def on_interval(self, k: int, a: float, b: float, block: ParametricBlock, theta):
        """``int_a^b M alpha_(1) ds`` and ``int_a^b M alpha*_(1) ds`` inside interval ``k``."""
        m = block.m
        if not (self.p and self.q) or b <= a:
            return np.zeros(self.q), np.zeros((self.q, m))
        if self.plain:
            cum, cg = block.integrate(a, b, theta)
            return self.M[k - 1] @ cum, self.M[k - 1] @ cg
        x, w = gauss_legendre(a, b)
        M = self._M_at(k, x)
        al, g = block.evaluate(x, theta)
        return np.einsum("g,gqp,gp->q", w, M, al), np.einsum("g,gqp,gpm->qm", w, M, g)

    def all_intervals(self, block: ParametricBlock, theta):
        """Per-interval drift integrals, shapes ``(K-1, q)`` and ``(K-1, q, m)``."""
        knots = self.risk.grid.knots
        Kint, m = len(knots) - 1, block.m
        if not (self.p and self.q):
            return np.zeros((Kint, self.q)), np.zeros((Kint, self.q, m))
        if self.plain:
            cum, cg = block.integrate(knots[:-1], knots[1:], theta)
            return np.einsum("kqp,kp->kq", self.M, cum), np.einsum("kqp,kpm->kqm", self.M, cg)
        x, w = interval_nodes(self.risk.grid)
        al, g = block.evaluate(x, theta)
        d1, dg = np.zeros((Kint, self.q)), np.zeros((Kint, self.q, m))
        for k in range(1, Kint + 1):
            M = self._M_at(k, x[k - 1])
            d1[k - 1] = np.einsum("g,gqp,gp->q", w[k - 1], M, al[k - 1])
            dg[k - 1] = np.einsum("g,gqp,gpm->qm", w[k - 1], M, g[k - 1])
        return d1, dg


@dataclass(frozen=True)
class Backfit:
    """Backfitted ``A^_(2)``: jumps at events plus a continuous drift between knots."""

    grid: TimeGrid
    values: np.ndarray          # (K, q) at knots
    jumps: np.ndarray           # (E, q)
    drift: DriftOperator = field(repr=False)
    block: ParametricBlock = field(repr=False)
    theta: np.ndarray = field(repr=False)
    G22_inv: np.ndarray = field(repr=False)     # (E, q, q) limit scale
    event_weights: tuple = field(repr=False)

    def __call__(self, t):
        t = np.asarray(t, float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        out = np.empty((t.shape[0], self.values.shape[1]))
        knots = self.grid.knots
        for i, ti in enumerate(t):
            if ti < 0 or ti > self.grid.tau * (1 + 1e-12):
                raise ValueError(f"time {ti:g} outside [0, tau]")
            k = int(self.grid.locate(ti))
            out[i] = self.values[k]
            if ti > knots[k]:
                out[i] += self.drift.on_interval(k + 1, knots[k], ti, self.block, self.theta)[0]
        return out[0] if scalar else out

    def path(self, labels=()) -> StepPath:
        return StepPath(self.grid.knots, self.values, tuple(labels))


def _as_step_b_scheme(ds, weights, aalen: AalenFit | None = None, smoothed=None) -> WeightScheme:
    if weights is None or weights == "plain":
        return PlainWeights()
    if weights in ("optimal", "estimated-optimal"):
        if smoothed is None:
            if aalen is None:
                raise ValueError("optimal step (b) weights need a pilot Aalen fit")
            smoothed = smooth_alpha(aalen)
        risk = aalen.risk if aalen is not None else None
        floor = hazard_floor(risk, smoothed) if risk is not None else None
        return OptimalWeights(ds, smoothed, floor)
    if isinstance(weights, WeightScheme):
        return weights
    raise ValueError(f"unsupported step (b) weights {weights!r}")


def backfit_step_b(ds: Dataset, grid: TimeGrid, theta_hat, block: ParametricBlock, weights=None,
                   risk: RiskSets | None = None) -> Backfit:
    """``A^_(2)(t) = sum_{s_e <= t} G_22^{-1} n^{-1} sum w z_(2) dN - int_0^t G_22^{-1} G_21 alpha_(1) ds``."""
    p = block.p
    if p != ds.p:
        raise ParameterError(f"block has {p} families but dataset has p={ds.p}")
    theta = block.check(theta_hat) if block.m else np.zeros(0)
    scheme = weights if isinstance(weights, WeightScheme) else _as_step_b_scheme(ds, weights)
    risk = risk if risk is not None else RiskSets(ds, grid)
    q, n = ds.q, ds.n
    ev_k = grid.event_index
    E, K = len(ev_k), len(grid.knots)
    z2 = ds.z2
    if scheme.constant:
        S22 = risk.plain_moments(slice(p, None), slice(p, None))[ev_k]
        ev_w = [np.ones(len(idx)) for idx in risk.event_subjects]
    else:
        S22 = np.empty((E, q, q))
        ev_w = []
        for e, k in enumerate(ev_k):
            s = grid.knots[k:k + 1]
            S22[e] = weighted_moments(risk, k, scheme, s)[0][p:, p:]
            ev_w.append(np.asarray(scheme.at(s, risk.event_subjects[e])[:, 0], float))
    S22_inv = guarded_inverse(S22, "G_22 at an event") if q else S22
    zsum = np.stack([w @ z2[idx] for w, idx in zip(ev_w, risk.event_subjects)]) if E else np.zeros((0, q))
    jumps = np.einsum("eij,ej->ei", S22_inv, zsum)
    drift = DriftOperator(risk, scheme, p)
    d1, _ = drift.all_intervals(block, theta)
    inc = np.zeros((K, q))
    inc[1:] = d1
    inc[ev_k] += jumps
    values = np.cumsum(inc, axis=0)
    return Backfit(grid, values, jumps, drift, block, theta, n * S22_inv, tuple(ev_w))


# ---------------------------------------------------------------- joint covariance

@dataclass(frozen=True)
class JointCovariance:
    """Finite-sample covariance ``Xi(t)/n`` of ``(A_(1)(t, theta_hat), A^_(2)(t))``."""

    t: float
    matrix: np.ndarray
    xi11: np.ndarray
    xi21: np.ndarray
    xi22: np.ndarray
    n: int

    @property
    def limit(self) -> np.ndarray:
        """``Xi(t)`` at the ``sqrt(n)`` scale."""
        return self.matrix * self.n


def psd_repair(M: np.ndarray, what: str = "covariance") -> np.ndarray:
    M = 0.5 * (M + M.T)
    if M.size == 0:
        return M
    w, U = np.linalg.eigh(M)
    if w.min() < 0:
        if -w.min() > 1e-8 * max(np.trace(M), np.finfo(float).tiny):
            log.warning("%s had negative eigenvalue %.3g; floored at 0", what, w.min())
        M = (U * np.maximum(w, 0.0)) @ U.T
        M = 0.5 * (M + M.T)
    return M


@dataclass(frozen=True)
class PartlyFit:
    """Result of the two-step fit.

    Attributes hold the limit-scale ingredients of the plug-in covariance; use
    :meth:`xi` / :func:`joint_covariance` for ``Xi(t)``.
    """

    ds: Dataset
    block: ParametricBlock
    aalen: AalenFit
    step_a: StepAResult
    design: CriterionDesign
    backfit: Backfit
    Vn_choice: str
    weight_scheme: str
    smoothed: SmoothedAlpha | None = field(default=None, repr=False)
    _P22: np.ndarray = field(default=None, repr=False)     # (K, q, q)
    _C: np.ndarray = field(default=None, repr=False)       # (K, q, m)
    _J: np.ndarray = field(default=None, repr=False)       # (K, q, m)

    @property
    def grid(self) -> TimeGrid:
        return self.aalen.grid

    @property
    def theta_hat(self) -> np.ndarray:
        return self.step_a.theta_hat

    @property
    def Gamma_hat(self) -> np.ndarray:
        return self.step_a.Gamma

    @property
    def Omega_hat(self) -> np.ndarray:
        return self.step_a.Omega

    @property
    def theta_cov(self) -> np.ndarray:
        return self.step_a.covariance

    @property
    def theta_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.theta_cov))

    @property
    def n(self) -> int:
        return self.ds.n

    def A1(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        return self.block.integrate(np.zeros_like(t), t, self.theta_hat)[0]

    def A2(self, t) -> np.ndarray:
        return self.backfit(t)

    def _J_at(self, t: float) -> np.ndarray:
        grid = self.grid
        k = int(grid.locate(t))
        J = self._J[k].copy()
        if t > grid.knots[k]:
            J -= self.backfit.drift.on_interval(k + 1, grid.knots[k], t, self.block, self.theta_hat)[1]
        return J

    def xi(self, t: float) -> np.ndarray:
        """Limit-scale joint covariance ``Xi(t)`` (symmetrised, PSD-repaired)."""
        t = float(t)
        if t < 0 or t > self.grid.tau * (1 + 1e-12):
            raise ValueError(f"time {t:g} outside [0, tau]")
        p, q = self.ds.p, self.ds.q
        Lam = self.step_a.Lambda if self.block.m else np.zeros((0, 0))
        _, Astar = self.block.integrate(0.0, t, self.theta_hat)
        k = int(self.grid.locate(t))
        out = np.zeros((p + q, p + q))
        out[:p, :p] = Astar @ Lam @ Astar.T
        if q:
            J = self._J_at(t)
            C = self._C[k]
            if self.block.m:
                Gi = np.linalg.inv(self.Gamma_hat)
                CG = C @ Gi
                x22 = self._P22[k] + J @ Lam @ J.T - CG @ J.T - J @ CG.T
                x21 = (CG - J @ Lam) @ Astar.T
            else:
                x22, x21 = self._P22[k].copy(), np.zeros((q, p))
            out[p:, p:] = x22
            out[p:, :p] = x21
            out[:p, p:] = x21.T
        return psd_repair(out, f"Xi({t:g})")

    def to_theta_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parameter", "estimate", "se"])
        for k, (est, se) in enumerate(zip(self.theta_hat, self.theta_se)):
            w.writerow([f"theta_{k + 1}", repr(float(est)), repr(float(se))])
        return buf.getvalue()

    def A2_table(self) -> StepPath:
        """``A^_(2)`` at the knots with pointwise standard errors."""
        p, q = self.ds.p, self.ds.q
        knots = self.grid.knots
        se = np.zeros((len(knots), q))
        for i, t in enumerate(knots):
            se[i] = np.sqrt(np.maximum(np.diag(self.xi(t))[p:], 0.0) / self.n)
        names = self.ds.names[p:]
        labels = tuple(f"A_{c}" for c in names) + tuple(f"se_{c}" for c in names)
        return StepPath(knots, np.hstack([self.backfit.values, se]), labels)


def joint_covariance(fit: PartlyFit, t: float) -> JointCovariance:
    xi = fit.xi(t)
    p = fit.ds.p
    n = fit.n
    return JointCovariance(float(t), xi / n, xi[:p, :p] / n, xi[p:, :p] / n, xi[p:, p:] / n, n)


def _covariance_paths(ds, aalen: AalenFit, bf: Backfit, design: CriterionDesign, block, theta):
    """Cumulative limit-scale paths for the Xi_22 and cross terms at every knot."""
    grid = aalen.grid
    p, q, n, m = ds.p, ds.q, ds.n, block.m
    K, ev_k = len(grid.knots), grid.event_index
    z = ds.covariates
    E = len(ev_k)
    P = np.zeros((K, q, q))
    C = np.zeros((K, q, m))
    J = np.zeros((K, q, m))
    if q == 0:
        return P, C, J
    dHbb = np.empty((E, q, q))
    dHba = np.empty((E, q, ds.r))
    for e, idx in enumerate(aalen.risk.event_subjects):
        wb, wa = bf.event_weights[e], aalen.event_weights[e]
        z2 = z[idx, p:]
        dHbb[e] = (z2 * (wb ** 2)[:, None]).T @ z2 / n
        dHba[e] = (z2 * (wb * wa)[:, None]).T @ z[idx] / n
    G22i = bf.G22_inv
    P[ev_k] = np.einsum("eij,ejk,ekl->eil", G22i, dHbb, G22i)
    if m:
        _, _, _, g_e = _terms(block, design, theta)
        VG = np.einsum("eij,ejm->eim", design.V_events, g_e)
        HG = np.einsum("eqr,erp->eqp", dHba, aalen.G_inv[:, :, :p])
        C[ev_k] = np.einsum("eab,ebp,epm->eam", G22i, HG, VG)
        _, dg = bf.drift.all_intervals(block, theta)
        J[1:] = -dg
    return np.cumsum(P, 0), np.cumsum(C, 0), np.cumsum(J, 0)


def fit_partly(ds: Dataset, block: ParametricBlock, tau="auto", Vn_choice: str = "default",
               step_b_weights="plain", theta_init=None, bandwidth: float | None = None,
               aalen: AalenFit | None = None) -> PartlyFit:
    """Run step (a) and step (b) and precompute the covariance paths."""
    if block.p != ds.p:
        raise ParameterError(f"block has {block.p} families but dataset has p={ds.p}")
    if aalen is None:
        aalen = fit_aalen(ds, build_time_grid(ds, tau))
    grid = aalen.grid
    smoothed = None
    if Vn_choice == "optimal" or step_b_weights in ("optimal", "estimated-optimal"):
        smoothed = smooth_alpha(aalen, bandwidth)
    design = criterion_design(ds, aalen, block.p, Vn_choice, smoothed)
    if block.m:
        if theta_init is None:
            theta_init = _initial_theta(block, aalen)
        sa = solve_step_a(block, design, theta_init, ds.n)
    else:
        sa = StepAResult(np.zeros(0), np.zeros((0, 0)), np.zeros((0, 0)), ds.n, 0, 0.0)
    scheme = _as_step_b_scheme(ds, step_b_weights, aalen, smoothed)
    bf = backfit_step_b(ds, grid, sa.theta_hat, block, scheme, risk=aalen.risk)
    P, C, J = _covariance_paths(ds, aalen, bf, design, block, sa.theta_hat)
    return PartlyFit(ds, block, aalen, sa, design, bf, Vn_choice, scheme.name, smoothed, P, C, J)


# ---------------------------------------------------------------- survival curves

@dataclass(frozen=True)
class SurvivalTable:
    times: np.ndarray
    survival: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "survival", "se", "lo95", "hi95"])
        for row in zip(self.times, self.survival, self.se, self.lower, self.upper):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def survival_curve(fit: PartlyFit, z, times) -> SurvivalTable:
    """``S(t|z) = exp{-z_(1)^T A_(1)(t, theta_hat) - z_(2)^T A^_(2)(t)}`` with delta-method bands."""
    z = np.asarray(z, float).reshape(-1)
    if z.shape[0] != fit.ds.r:
        raise DataError(f"covariate vector has length {z.shape[0]}, expected {fit.ds.r}")
    times = np.atleast_1d(np.asarray(times, float))
    p = fit.ds.p
    surv, se = np.empty(len(times)), np.empty(len(times))
    for i, t in enumerate(times):
        H = z[:p] @ fit.A1(t) + (z[p:] @ fit.A2(t) if fit.ds.q else 0.0)
        surv[i] = np.exp(-H)
        se[i] = surv[i] * np.sqrt(max(z @ fit.xi(t) @ z, 0.0) / fit.n)
    lo = np.clip(surv - 1.96 * se, 0.0, 1.0)
    hi = np.clip(surv + 1.96 * se, 0.0, 1.0)
    return SurvivalTable(times, surv, se, lo, hi)
