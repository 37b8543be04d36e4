"""Asymptotic efficiency analytics.

Two pieces:

* closed forms for i.i.d. gamma(c, gamma) covariates, a common constant hazard
  rate ``alpha`` and shifted Pareto censoring ``rho(s) = (1 + alpha s/gamma)^(-k)``;
  every r x r matrix in that setup is a scalar times ``c^{-1} I_r + e_r e_r^T``;
* the piecewise-constant sieve information ``Omega_K`` and its limit as the
  partition of ``[0, tau]`` is refined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .families import GL_ORDER, ParametricBlock, gauss_legendre
from .data import guarded_inverse


@dataclass(frozen=True)
class GammaSetup:
    c: float
    gamma: float
    alpha: float
    r: int
    p: int = 0
    q: int | None = None
    k: float = 0.0

    def __post_init__(self):
        if not (self.c > 0 and self.gamma > 0 and self.alpha > 0):
            raise ValueError("c, gamma and alpha must be positive")
        if self.k < 0:
            raise ValueError("censoring exponent k must be >= 0")
        q = self.r - self.p if self.q is None else self.q
        if self.p < 0 or q < 0 or self.p + q != self.r:
            raise ValueError("need r = p + q with p, q >= 0")
        object.__setattr__(self, "q", q)

    @property
    def cr(self) -> float:
        return self.c * self.r


def gamma_moments(gs: GammaSetup, s):
    """Scalars ``f, g, h`` with ``F_0 = f M``, ``G_0 = g M``, ``dH_0 = h M ds``, ``M = c^{-1} I + e e^T``."""
    s = np.asarray(s, float)
    c, gam, a, cr = gs.c, gs.gamma, gs.alpha, gs.cr
    base = gam + a * s
    num = c ** 2 * gam ** cr
    g = num / base ** (cr + 2)
    f = num / ((cr + 1) * a * base ** (cr + 1))
    h = num * (cr + 2) * a / base ** (cr + 3)
    return f, g, h


def rho(gs: GammaSetup, s):
    """Censoring survival function ``(1 + alpha s / gamma)^(-k)``."""
    return (1.0 + gs.alpha * np.asarray(s, float) / gs.gamma) ** (-gs.k)


@dataclass(frozen=True)
class Structured:
    """The matrix ``diag * I + rank1 * e e^T`` of size ``dim``, kept as two scalars."""

    diag: float
    rank1: float
    dim: int

    def dense(self) -> np.ndarray:
        return self.diag * np.eye(self.dim) + self.rank1 * np.ones((self.dim, self.dim))

    def inverse(self) -> "Structured":
        a, b = self.diag, self.rank1
        return Structured(1.0 / a, -b / (a * (a + b * self.dim)), self.dim)

    def scaled(self, x: float) -> "Structured":
        return Structured(x * self.diag, x * self.rank1, self.dim)

    def __matmul__(self, other: "Structured") -> "Structured":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        a, b, c, d = self.diag, self.rank1, other.diag, other.rank1
        return Structured(a * c, a * d + b * c + b * d * self.dim, self.dim)

    def entry(self, i: int, j: int) -> float:
        return self.diag * (i == j) + self.rank1


def unit_structure(gs: GammaSetup, dim: int | None = None) -> Structured:
    """``c^{-1} I + e e^T``; every second-moment matrix of the gamma setup is a multiple of it."""
    return Structured(1.0 / gs.c, 1.0, gs.r if dim is None else dim)


def gamma_matrices(gs: GammaSetup, s: float) -> tuple[Structured, Structured, Structured]:
    """``F_0(s)``, ``G_0(s)`` and ``dH_0(s)/ds`` as structured matrices."""
    f, g, h = (float(x) for x in gamma_moments(gs, s))
    M = unit_structure(gs)
    return M.scaled(f), M.scaled(g), M.scaled(h)


def are_weights(gs: GammaSetup) -> float:
    """Variance ratio of plain-weight to optimal-weight Aalen estimators, ``(cr + 2)/(cr + 1)``."""
    return (gs.cr + 2.0) / (gs.cr + 1.0)


def int_f_rho(gs: GammaSetup) -> float:
    """``int_0^infinity f rho ds = c^2 / {alpha^2 (cr + 1)(cr + k)}``."""
    if gs.cr + gs.k <= 0:
        return np.inf
    return gs.c ** 2 / (gs.alpha ** 2 * (gs.cr + 1) * (gs.cr + gs.k))


def int_inv_f_rho(gs: GammaSetup, t) -> np.ndarray:
    """``int_0^t ds / (f rho)`` in closed form."""
    cr, k = gs.cr, gs.k
    u = gs.alpha * np.asarray(t, float) / gs.gamma
    return (cr + 1) / (cr + k + 2) * gs.gamma ** 2 / gs.c ** 2 * ((1 + u) ** (cr + k + 2) - 1)


def _v(gs: GammaSetup, u):
    return (1.0 + u) ** (gs.cr + gs.k + 2) - 1.0


def _check_u(u):
    u = np.asarray(u, float)
    if np.any(u <= 0):
        raise ValueError("scaled time u must be positive")
    return u


def ineff_parametric(gs: GammaSetup, u) -> np.ndarray:
    """Variance of the best nonparametric estimator of ``A_j(t)`` over that of ``theta_hat_j t``.

    ``[(1 + u)^(cr+k+2) - 1] / {(cr + k)(cr + k + 2) u^2}`` with ``u = alpha t / gamma``.
    """
    u = _check_u(u)
    a = gs.cr + gs.k
    return _v(gs, u) / (a * (a + 2) * u ** 2)


def ineff_backfit(gs: GammaSetup, u, printed: bool = False) -> np.ndarray:
    """Variance of the best nonparametric estimator of ``A_j(t)``, ``j > p``, over that of the backfit.

    ``[(1+c(r-1))/(1+cr)] v / {[(1+c(q-1))/(1+cq)] v + c^2 kappa u^2}`` with
    ``v = (1+u)^(cr+k+2) - 1`` and ``kappa = p (cr+k)(cr+k+2) / {(1+cq)(1+cr)}``.
    ``printed=True`` evaluates the variant with ``1 - cr`` and ``1 - cq`` in the
    two leading denominators, kept for comparison.
    """
    u = _check_u(u)
    c, r, q, p, k = gs.c, gs.r, gs.q, gs.p, gs.k
    if q < 1:
        raise ValueError("backfit ratio needs q >= 1")
    cr, cq = c * r, c * q
    v = _v(gs, u)
    kappa = p * (cr + k) * (cr + k + 2) / ((1 + cq) * (1 + cr))
    sgn = -1.0 if printed else 1.0
    num = (1 + c * (r - 1)) / (1 + sgn * cr) * v
    den = (1 + c * (q - 1)) / (1 + sgn * cq) * v + c ** 2 * kappa * u ** 2
    return num / den


def backfit_variances(gs: GammaSetup, t):
    """Limit variances ``(best nonparametric, backfit)`` of ``A_j(t)`` for a nonparametric column.

    Built from the structured blocks of ``M = c^{-1} I + e e^T`` with a constant
    parametric family: ``int_0^t (f rho)^{-1} [M^{-1}]_jj`` against
    ``int_0^t (f rho)^{-1} [M_22^{-1}]_jj + t^2 [M_22^{-1} M_21 Omega^{-1} M_12 M_22^{-1}]_jj``
    with ``Omega = int f rho ([M^{-1}]_11)^{-1}``.
    """
    if gs.q < 1:
        raise ValueError("need q >= 1")
    M_inv = unit_structure(gs).inverse()
    M22_inv = unit_structure(gs, gs.q).inverse()
    I = int_inv_f_rho(gs, t)
    nonpm = I * M_inv.entry(0, 0)
    semi = I * M22_inv.entry(0, 0)
    if gs.p:
        P11 = Structured(M_inv.diag, M_inv.rank1, gs.p)     # [M^{-1}]_11 = Omega^{-1} * int f rho
        row = M22_inv.diag + M22_inv.rank1 * gs.q          # M_22^{-1} e_q = row * e_q
        quad = gs.p * (P11.diag + P11.rank1 * gs.p)         # e_p^T [M^{-1}]_11 e_p
        semi = semi + np.asarray(t, float) ** 2 * row ** 2 * quad / int_f_rho(gs)
    return nonpm, semi


def gamma_F(gs: GammaSetup) -> Callable[[np.ndarray], np.ndarray]:
    """``s -> F(s) = f(s) rho(s) (c^{-1} I + e e^T)`` with shape ``s.shape + (r, r)``."""
    def F(s):
        f, _, _ = gamma_moments(gs, s)
        return (f * rho(gs, s))[..., None, None] * unit_structure(gs).dense()
    return F


def empirical_F(Z: np.ndarray, times: np.ndarray, alpha: Callable, chunk: int = 256):
    """``s -> n^{-1} sum_i 1{t_i >= s} z_i z_i^T / z_i^T alpha(s)`` from data and a hazard-factor evaluator."""
    Z = np.asarray(Z, float)
    times = np.asarray(times, float)

    def F(s):
        s = np.asarray(s, float)
        flat = s.reshape(-1)
        out = np.empty((flat.size, Z.shape[1], Z.shape[1]))
        for lo in range(0, flat.size, chunk):
            ss = flat[lo:lo + chunk]
            lp = Z @ np.asarray(alpha(ss)).T
            w = (times[:, None] >= ss[None, :]) / lp
            out[lo:lo + chunk] = np.einsum("ig,ij,il->gjl", w, Z, Z) / Z.shape[0]
        return out.reshape(s.shape + out.shape[1:])

    return F


# ---------------------------------------------------------------- sieve

@dataclass(frozen=True)
class SieveSpec:
    K: int
    tau: float
    block: ParametricBlock
    theta: np.ndarray
    F: Callable[[np.ndarray], np.ndarray]
    order: int = GL_ORDER

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class SieveInformation:
    Omega11: np.ndarray         # (m, m)
    Omega12: np.ndarray         # (K, m, q) window columns
    Omega22: np.ndarray         # (K, q, q) diagonal blocks
    Omega_K_11_inv: np.ndarray  # (m, m) = (Omega11 - sum_l O12_l O22_l^{-1} O21_l)^{-1}


def sieve_information(ss: SieveSpec) -> SieveInformation:
    """Information of the sieve model with ``alpha_(2)`` piecewise constant on ``K`` equal windows."""
    p = ss.block.p
    v = np.linspace(0.0, ss.tau, ss.K + 1)
    x, w = gauss_legendre(v[:-1], v[1:], ss.order)             # (K, G)
    F = ss.F(x)                                                  # (K, G, r, r)
    _, g = ss.block.evaluate(x, ss.theta)                        # (K, G, p, m)
    O11 = np.einsum("lg,lgim,lgij,lgjn->mn", w, g, F[..., :p, :p], g)
    O12 = np.einsum("lg,lgim,lgij->lmj", w, g, F[..., :p, p:])
    O22 = np.einsum("lg,lgij->lij", w, F[..., p:, p:])
    O22i = guarded_inverse(O22, "sieve window block")
    schur = O11 - np.einsum("lmi,lij,lnj->mn", O12, O22i, O12)
    schur = 0.5 * (schur + schur.T)
    return SieveInformation(O11, O12, O22, np.linalg.inv(schur))


def sieve_limit(block: ParametricBlock, theta, F: Callable, tau: float, windows: int = 4000,
                order: int = GL_ORDER) -> np.ndarray:
    """``{int_0^tau alpha*^T (F_11 - F_12 F_22^{-1} F_21) alpha* ds}^{-1}`` by composite quadrature."""
    p = block.p
    v = np.linspace(0.0, tau, windows + 1)
    x, w = gauss_legendre(v[:-1], v[1:], order)
    Fx = F(x)
    F11, F12, F22 = Fx[..., :p, :p], Fx[..., :p, p:], Fx[..., p:, p:]
    S = F11 - F12 @ np.linalg.solve(F22, np.swapaxes(F12, -1, -2)) if F22.shape[-1] else F11
    _, g = block.evaluate(x, theta)
    M = np.einsum("lg,lgim,lgij,lgjn->mn", w, g, S, g)
    return np.linalg.inv(0.5 * (M + M.T))


def sieve_convergence(block: ParametricBlock, theta, F: Callable, tau: float,
                      K_grid: Sequence[int] = (10, 20, 40, 80, 160, 320)) -> list[dict]:
    """Relative distance of ``Omega_K^{11}`` to its limit for each ``K``."""
    lim = sieve_limit(block, theta, F, tau)
    rows = []
    for K in K_grid:
        res = sieve_information(SieveSpec(int(K), tau, block, np.asarray(theta, float), F))
        err = np.linalg.norm(res.Omega_K_11_inv - lim) / np.linalg.norm(lim)
        rows.append({"K": int(K), "relative_error": float(err),
                     "Omega_K_11_inv": res.Omega_K_11_inv, "limit": lim})
    return rows
