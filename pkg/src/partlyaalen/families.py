"""Parametric hazard-factor functions with analytic derivatives and cumulatives."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

GL_ORDER = 7
_GL_X, _GL_W = np.polynomial.legendre.leggauss(GL_ORDER)


class ParameterError(ValueError):
    """Parameter outside a family's admissible region."""


def gauss_legendre(a, b, order: int = GL_ORDER):
    """Nodes and weights mapping the reference rule onto ``[a, b]`` (broadcast over a, b)."""
    if order == GL_ORDER:
        x, w = _GL_X, _GL_W
    else:
        x, w = np.polynomial.legendre.leggauss(order)
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


class HazardFamily:
    """A regressor function ``alpha(s, theta)`` for one covariate.

    Subclasses implement ``value``, ``grad`` and ``hess``. Families with
    ``closed_form = True`` also override the cumulative methods; otherwise
    cumulatives are computed by Gauss-Legendre quadrature of order 7.
    """

    name = "custom"
    n_params = 1
    closed_form = False
    #: parameters that must stay positive; optimizers work on their logarithm
    positive: tuple[bool, ...] = (False,)

    def check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.n_params:
            raise ParameterError(f"{self.name} family takes {self.n_params} parameter(s)")
        if not np.all(np.isfinite(theta)):
            raise ParameterError(f"{self.name}: non-finite parameter")
        return theta

    def value(self, s, theta) -> np.ndarray:
        raise NotImplementedError

    def grad(self, s, theta) -> np.ndarray:
        raise NotImplementedError

    def hess(self, s, theta) -> np.ndarray:
        raise NotImplementedError

    def _quad(self, fn, t0, t1, theta):
        nodes, weights = gauss_legendre(t0, t1)
        vals = fn(nodes.reshape(-1), theta)
        vals = vals.reshape(nodes.shape + vals.shape[1:])
        w = weights.reshape(weights.shape + (1,) * (vals.ndim - weights.ndim))
        return np.sum(vals * w, axis=nodes.ndim - 1)

    def cumulative(self, t0, t1, theta) -> np.ndarray:
        """``int_{t0}^{t1} alpha(s, theta) ds``."""
        return self._quad(self.value, t0, t1, self.check(theta))

    def cumulative_grad(self, t0, t1, theta) -> np.ndarray:
        return self._quad(self.grad, t0, t1, self.check(theta))

    def cumulative_hess(self, t0, t1, theta) -> np.ndarray:
        return self._quad(self.hess, t0, t1, self.check(theta))

    def cumulative_monomial(self, theta):
        """``(c, e)`` with ``A(t) = c t**e`` when the cumulative is a monomial, else None."""
        return None

    def initial_guess(self, t: np.ndarray, cum: np.ndarray) -> np.ndarray:
        raise ParameterError(f"{self.name} family needs an explicit initial value")

    def __repr__(self):
        return f"{type(self).__name__}()"


class ConstantFamily(HazardFamily):
    """``alpha(s) = theta``."""

    name = "constant"
    closed_form = True

    def value(self, s, theta):
        theta = self.check(theta)
        return np.full(np.shape(s), theta[0])

    def grad(self, s, theta):
        return np.ones(np.shape(s) + (1,))

    def hess(self, s, theta):
        return np.zeros(np.shape(s) + (1, 1))

    def cumulative(self, t0, t1, theta):
        theta = self.check(theta)
        return theta[0] * (np.asarray(t1, float) - np.asarray(t0, float))

    def cumulative_grad(self, t0, t1, theta):
        return (np.asarray(t1, float) - np.asarray(t0, float))[..., None]

    def cumulative_hess(self, t0, t1, theta):
        return np.zeros(np.broadcast(np.asarray(t0), np.asarray(t1)).shape + (1, 1))

    def cumulative_monomial(self, theta):
        return float(self.check(theta)[0]), 1.0

    def initial_guess(self, t, cum):
        return np.array([np.dot(cum, t) / np.dot(t, t)])


class LinearFamily(HazardFamily):
    """``alpha(s) = theta s`` (linear in time)."""

    name = "linear"
    closed_form = True

    def value(self, s, theta):
        theta = self.check(theta)
        return theta[0] * np.asarray(s, float)

    def grad(self, s, theta):
        return np.asarray(s, float)[..., None]

    def hess(self, s, theta):
        return np.zeros(np.shape(s) + (1, 1))

    def cumulative(self, t0, t1, theta):
        theta = self.check(theta)
        return 0.5 * theta[0] * (np.asarray(t1, float) ** 2 - np.asarray(t0, float) ** 2)

    def cumulative_grad(self, t0, t1, theta):
        return (0.5 * (np.asarray(t1, float) ** 2 - np.asarray(t0, float) ** 2))[..., None]

    def cumulative_hess(self, t0, t1, theta):
        return np.zeros(np.broadcast(np.asarray(t0), np.asarray(t1)).shape + (1, 1))

    def cumulative_monomial(self, theta):
        return 0.5 * float(self.check(theta)[0]), 2.0

    def initial_guess(self, t, cum):
        h = 0.5 * np.asarray(t, float) ** 2
        return np.array([np.dot(cum, h) / np.dot(h, h)])


class PowerFamily(HazardFamily):
    """Weibull-shape ``alpha(s) = theta1 theta2 s**(theta2 - 1)``, cumulative ``theta1 t**theta2``."""

    name = "power"
    n_params = 2
    closed_form = True
    positive = (True, True)

    def check(self, theta):
        theta = super().check(theta)
        if theta[0] <= 0 or theta[1] <= 0:
            raise ParameterError("power family requires theta1 > 0 and theta2 > 0")
        return theta

    def _pow(self, s, e):
        s = np.asarray(s, float)
        if e < 0 and np.any(s == 0):
            raise ParameterError("power family is unbounded at s = 0 when theta2 < 1")
        return s ** e

    def value(self, s, theta):
        a, b = self.check(theta)
        return a * b * self._pow(s, b - 1.0)

    def grad(self, s, theta):
        a, b = self.check(theta)
        s = np.asarray(s, float)
        sp = self._pow(s, b - 1.0)
        logs = np.log(np.where(s > 0, s, 1.0))
        return np.stack([b * sp, a * sp * (1.0 + b * logs)], axis=-1)

    def hess(self, s, theta):
        a, b = self.check(theta)
        s = np.asarray(s, float)
        sp = self._pow(s, b - 1.0)
        logs = np.log(np.where(s > 0, s, 1.0))
        d_ab = sp * (1.0 + b * logs)
        d_bb = a * sp * logs * (2.0 + b * logs)
        out = np.empty(s.shape + (2, 2))
        out[..., 0, 0] = 0.0
        out[..., 0, 1] = out[..., 1, 0] = d_ab
        out[..., 1, 1] = d_bb
        return out

    @staticmethod
    def _cum_parts(t, b):
        t = np.asarray(t, float)
        tb = np.where(t > 0, t, 1.0) ** b * (t > 0)
        logt = np.log(np.where(t > 0, t, 1.0))
        return tb, logt

    def cumulative(self, t0, t1, theta):
        a, b = self.check(theta)
        return a * (self._cum_parts(t1, b)[0] - self._cum_parts(t0, b)[0])

    def cumulative_grad(self, t0, t1, theta):
        a, b = self.check(theta)

        def g(t):
            tb, lt = self._cum_parts(t, b)
            return np.stack([tb, a * tb * lt], axis=-1)

        return g(t1) - g(t0)

    def cumulative_hess(self, t0, t1, theta):
        a, b = self.check(theta)

        def h(t):
            tb, lt = self._cum_parts(t, b)
            out = np.zeros(tb.shape + (2, 2))
            out[..., 0, 1] = out[..., 1, 0] = tb * lt
            out[..., 1, 1] = a * tb * lt ** 2
            return out

        return h(t1) - h(t0)

    def cumulative_monomial(self, theta):
        a, b = self.check(theta)
        return float(a), float(b)

    def initial_guess(self, t, cum):
        ok = (t > 0) & (cum > 0)
        if ok.sum() >= 2:
            slope, icpt = np.polyfit(np.log(t[ok]), np.log(cum[ok]), 1)
            if slope > 0 and np.isfinite(icpt):
                return np.array([np.exp(icpt), slope])
        return np.array([max(cum[-1], 1e-3) / t[-1], 1.0])


class CustomFamily(HazardFamily):
    """Family defined by user-supplied evaluators.

    ``value(s, theta)``, ``grad(s, theta)`` (shape ``s.shape + (m,)``) and
    optionally ``hess``; cumulatives fall back to quadrature unless
    ``cumulative`` and ``cumulative_grad`` are given.
    """

    def __init__(self, value, grad, n_params, hess=None, cumulative=None,
                 cumulative_grad=None, positive=None, name="custom"):
        self._value, self._grad, self._hess = value, grad, hess
        self._cum, self._cum_grad = cumulative, cumulative_grad
        self.n_params = int(n_params)
        self.positive = tuple(positive) if positive is not None else (False,) * self.n_params
        self.name = name
        self.closed_form = cumulative is not None and cumulative_grad is not None

    def value(self, s, theta):
        return np.asarray(self._value(np.asarray(s, float), self.check(theta)), float)

    def grad(self, s, theta):
        return np.asarray(self._grad(np.asarray(s, float), self.check(theta)), float)

    def hess(self, s, theta):
        if self._hess is None:
            raise NotImplementedError(f"{self.name}: no Hessian supplied")
        return np.asarray(self._hess(np.asarray(s, float), self.check(theta)), float)

    def cumulative(self, t0, t1, theta):
        if self._cum is not None:
            theta = self.check(theta)
            return np.asarray(self._cum(t1, theta), float) - np.asarray(self._cum(t0, theta), float)
        return super().cumulative(t0, t1, theta)

    def cumulative_grad(self, t0, t1, theta):
        if self._cum_grad is not None:
            theta = self.check(theta)
            return np.asarray(self._cum_grad(t1, theta), float) - np.asarray(self._cum_grad(t0, theta), float)
        return super().cumulative_grad(t0, t1, theta)


FAMILIES = {"constant": ConstantFamily, "power": PowerFamily, "linear": LinearFamily}


def make_family(kind: str) -> HazardFamily:
    try:
        return FAMILIES[kind]()
    except KeyError:
        raise ParameterError(f"unknown family '{kind}' (choose from {sorted(FAMILIES)})") from None


class ParametricBlock:
    """Ordered families for the ``p`` parametric columns, each with its own parameter slice."""

    def __init__(self, families: Sequence[HazardFamily | str]):
        self.families = tuple(make_family(f) if isinstance(f, str) else f for f in families)
        sizes = [f.n_params for f in self.families]
        ends = np.cumsum([0] + sizes)
        self.slices = tuple(slice(int(a), int(b)) for a, b in zip(ends[:-1], ends[1:]))
        self.m = int(ends[-1])
        self.positive = np.array([flag for f in self.families for flag in f.positive], dtype=bool)

    @property
    def p(self) -> int:
        return len(self.families)

    def split(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.m:
            raise ParameterError(f"expected {self.m} parameters, got {theta.shape[0]}")
        return [theta[sl] for sl in self.slices]

    def check(self, theta) -> np.ndarray:
        for fam, th in zip(self.families, self.split(theta)):
            fam.check(th)
        return np.asarray(theta, float).reshape(-1)

    def evaluate(self, s, theta):
        """Stacked ``alpha_(1)(s)`` of shape ``s.shape + (p,)`` and gradient ``s.shape + (p, m)``."""
        s = np.asarray(s, dtype=float)
        alpha = np.zeros(s.shape + (self.p,))
        grad = np.zeros(s.shape + (self.p, self.m))
        for j, (fam, th, sl) in enumerate(zip(self.families, self.split(theta), self.slices)):
            alpha[..., j] = fam.value(s, th)
            grad[..., j, sl] = fam.grad(s, th)
        return alpha, grad

    def hessian(self, s, theta):
        """Second derivatives, shape ``s.shape + (p, m, m)`` (block-diagonal in parameters)."""
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape + (self.p, self.m, self.m))
        for j, (fam, th, sl) in enumerate(zip(self.families, self.split(theta), self.slices)):
            out[..., j, sl, sl] = fam.hess(s, th)
        return out

    def integrate(self, t0, t1, theta):
        """``int_{t0}^{t1}`` of ``alpha_(1)`` and of its gradient, broadcast over ``t0, t1``."""
        shape = np.broadcast(np.asarray(t0), np.asarray(t1)).shape
        cum = np.zeros(shape + (self.p,))
        cum_grad = np.zeros(shape + (self.p, self.m))
        for j, (fam, th, sl) in enumerate(zip(self.families, self.split(theta), self.slices)):
            cum[..., j] = fam.cumulative(t0, t1, th)
            cum_grad[..., j, sl] = fam.cumulative_grad(t0, t1, th)
        return cum, cum_grad

    def integrate_hessian(self, t0, t1, theta):
        shape = np.broadcast(np.asarray(t0), np.asarray(t1)).shape
        out = np.zeros(shape + (self.p, self.m, self.m))
        for j, (fam, th, sl) in enumerate(zip(self.families, self.split(theta), self.slices)):
            out[..., j, sl, sl] = fam.cumulative_hess(t0, t1, th)
        return out

    def initial_guess(self, t, cum) -> np.ndarray:
        """Moment-matching start values from cumulative curves ``cum[:, j]`` on times ``t``."""
        return np.concatenate([f.initial_guess(t, cum[:, j]) for j, f in enumerate(self.families)])

    # unconstrained coordinates: log for positive parameters
    def to_free(self, theta):
        theta = np.asarray(theta, float)
        return np.where(self.positive, np.log(np.where(self.positive, theta, 1.0)), theta)

    def from_free(self, u):
        u = np.asarray(u, float)
        return np.where(self.positive, np.exp(np.where(self.positive, u, 0.0)), u)

    def free_jacobian(self, theta):
        """``d theta / d u`` (diagonal)."""
        return np.where(self.positive, theta, 1.0)

    def __repr__(self):
        return f"ParametricBlock({[f.name for f in self.families]})"


def block_from_spec(entries: Sequence[dict]) -> tuple[ParametricBlock, list[str], np.ndarray | None]:
    """Build a block from config entries ``{column, family, init}``.

    Returns the block, the column names in order, and the concatenated initial
    values (None when any entry lacks ``init``).
    """
    fams, cols, inits = [], [], []
    for e in entries:
        if "column" not in e or "family" not in e:
            raise ParameterError(f"parametric entry {e!r} needs 'column' and 'family'")
        fam = make_family(e["family"])
        fams.append(fam)
        cols.append(e["column"])
        init = e.get("init")
        if init is not None:
            init = np.atleast_1d(np.asarray(init, float))
            if init.shape[0] != fam.n_params:
                raise ParameterError(f"init for column '{e['column']}' needs {fam.n_params} value(s)")
        inits.append(init)
    theta0 = None if any(i is None for i in inits) or not inits else np.concatenate(inits)
    return ParametricBlock(fams), cols, theta0
