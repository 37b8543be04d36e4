import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from partlyaalen.efficiency import (GammaSetup, SieveSpec, Structured, are_weights, backfit_variances, gamma_F,
                                    gamma_matrices, gamma_moments, ineff_backfit, ineff_parametric, int_f_rho,
                                    int_inv_f_rho, rho, sieve_convergence, sieve_information, sieve_limit)
from partlyaalen.families import ParametricBlock

UNIT = GammaSetup(c=1.0, gamma=1.0, alpha=1.0, r=2, p=1)


class TestMoments:
    def test_values_at_zero(self):
        f, g, h = gamma_moments(UNIT, 0.0)
        assert (f, g, h) == (pytest.approx(1 / 3, rel=1e-15), 1.0, 4.0)

    @pytest.mark.parametrize("gs", [UNIT, GammaSetup(0.7, 1.3, 0.4, 3, k=1.5)])
    def test_derivatives(self, gs):
        s, h = 0.7, 1e-5
        f1, g1, _ = gamma_moments(gs, s + h)
        f0, g0, _ = gamma_moments(gs, s - h)
        _, g, hh = gamma_moments(gs, s)
        assert np.isclose((f1 - f0) / (2 * h), -g, rtol=1e-6)
        assert np.isclose((g1 - g0) / (2 * h), -hh, rtol=1e-6)

    def test_decay(self):
        assert all(x < 1e-20 for x in gamma_moments(UNIT, 1e8))

    def test_matrices_against_monte_carlo(self):
        # F_0(s) = E[1{T >= s} z z^T / z^T alpha] with T | z exponential(z^T alpha)
        gs = GammaSetup(c=2.0, gamma=1.5, alpha=0.8, r=2)
        rng = np.random.default_rng(0)
        Z = rng.gamma(gs.c, 1 / gs.gamma, (400_000, 2))
        lp = Z.sum(1) * gs.alpha
        s = 0.6
        surv = np.exp(-lp * s)
        emp = np.einsum("i,ij,ik->jk", surv / lp, Z, Z) / len(Z)
        F, G, _ = gamma_matrices(gs, s)
        np.testing.assert_allclose(emp, F.dense(), rtol=0.02)
        np.testing.assert_allclose(np.einsum("i,ij,ik->jk", surv, Z, Z) / len(Z), G.dense(), rtol=0.02)

    def test_validation(self):
        with pytest.raises(ValueError):
            GammaSetup(c=0.0, gamma=1.0, alpha=1.0, r=2)
        with pytest.raises(ValueError):
            GammaSetup(c=1.0, gamma=1.0, alpha=1.0, r=2, p=1, q=2)


class TestStructured:
    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.1, 10), st.floats(-0.05, 5), st.integers(1, 6))
    def test_inverse(self, a, b, dim):
        S = Structured(a, b, dim)
        np.testing.assert_allclose(S.inverse().dense() @ S.dense(), np.eye(dim), atol=1e-12)

    def test_product(self):
        A, B = Structured(1.5, 0.3, 4), Structured(0.2, -0.7, 4)
        np.testing.assert_allclose((A @ B).dense(), A.dense() @ B.dense(), atol=1e-14)
        assert A.entry(1, 1) == 1.8 and A.entry(0, 2) == 0.3


class TestWeights:
    def test_value(self):
        assert are_weights(GammaSetup(1.0, 1.0, 1.0, 2)) == 4 / 3

    def test_limits(self):
        assert np.isclose(are_weights(GammaSetup(1e9, 1.0, 1.0, 2)), 1.0)
        assert np.isclose(are_weights(GammaSetup(1e-9, 1.0, 1.0, 2)), 2.0)


class TestParametricRatio:
    def test_values(self):
        assert ineff_parametric(GammaSetup(1.0, 1.0, 1.0, 2), 1.0) == 1.875
        assert np.isclose(ineff_parametric(GammaSetup(0.5, 1.0, 1.0, 2), 1.0), 7 / 3, rtol=1e-15)

    @pytest.mark.parametrize("c,r,k,t", [(1.0, 2, 0.0, 1.0), (0.5, 3, 1.0, 0.4), (2.0, 1, 2.5, 1.7)])
    def test_against_quadrature(self, c, r, k, t):
        gs = GammaSetup(c, 1.3, 0.9, r, k=k)
        frho = lambda s: gamma_moments(gs, s)[0] * rho(gs, s)
        I_inf = integrate.quad(frho, 0, np.inf, epsabs=0, epsrel=1e-12)[0]
        I_t = integrate.quad(lambda s: 1 / frho(s), 0, t, epsabs=0, epsrel=1e-12)[0]
        assert np.isclose(I_inf, int_f_rho(gs), rtol=1e-6)
        assert np.isclose(I_t, int_inv_f_rho(gs, t), rtol=1e-6)
        u = gs.alpha * t / gs.gamma
        assert np.isclose(ineff_parametric(gs, u), I_t * I_inf / t ** 2, rtol=1e-6)

    def test_nonpositive_u(self):
        with pytest.raises(ValueError):
            ineff_parametric(UNIT, 0.0)


class TestBackfitRatio:
    def test_large_u_limit(self):
        gs = GammaSetup(0.8, 1.0, 1.0, 3, p=1)
        c, r, q = gs.c, gs.r, gs.q
        lim = (1 + c * (r - 1)) * (1 + c * q) / ((1 + c * (q - 1)) * (1 + c * r))
        assert np.isclose(ineff_backfit(gs, 1e4), lim, rtol=1e-6)

    def test_no_parametric_part(self):
        gs = GammaSetup(0.8, 1.0, 1.0, 3, p=0)
        np.testing.assert_allclose(ineff_backfit(gs, np.array([0.1, 1.0, 5.0])), 1.0, rtol=1e-14)

    def test_at_least_one_on_a_grid(self):
        u = np.geomspace(1e-3, 50, 40)
        for c in (0.1, 0.5, 1.0, 3.0):
            for k in (0.0, 1.0, 4.0):
                for p, q in ((1, 1), (1, 2), (2, 1), (3, 2)):
                    gs = GammaSetup(c, 1.0, 1.0, p + q, p=p, k=k)
                    assert np.all(ineff_backfit(gs, u) >= 1 - 1e-12)

    @pytest.mark.parametrize("c,p,q,k", [(1.0, 1, 1, 0.0), (0.4, 2, 1, 1.0), (2.5, 1, 3, 0.5)])
    def test_matches_structured_algebra(self, c, p, q, k):
        gs = GammaSetup(c, 1.0, 1.0, p + q, p=p, k=k)
        t = np.array([0.2, 1.0, 3.0])
        nonpm, semi = backfit_variances(gs, t)
        np.testing.assert_allclose(nonpm / semi, ineff_backfit(gs, t), rtol=1e-12)

    def test_printed_variant_differs(self):
        gs = GammaSetup(0.3, 1.0, 1.0, 2, p=1)
        assert not np.isclose(ineff_backfit(gs, 1.0, printed=True), ineff_backfit(gs, 1.0))

    def test_requires_nonparametric_column(self):
        with pytest.raises(ValueError):
            ineff_backfit(GammaSetup(1.0, 1.0, 1.0, 2, p=2), 1.0)


CONST = ParametricBlock(["constant"])


class TestSieve:
    def test_single_window_two_block_formula(self):
        F = gamma_F(UNIT)
        quad = lambda fn: integrate.quad(fn, 0, 1, epsabs=0, epsrel=1e-13)[0]
        o11 = quad(lambda s: F(s)[0, 0])
        o12 = quad(lambda s: F(s)[0, 1])
        o22 = quad(lambda s: F(s)[1, 1])
        # high order so that only the block algebra is being compared
        res = sieve_information(SieveSpec(1, 1.0, CONST, np.array([1.0]), F, order=30))
        np.testing.assert_allclose(res.Omega_K_11_inv, [[1 / (o11 - o12 ** 2 / o22)]], rtol=1e-10)

    def test_orthogonal_blocks(self):
        F = lambda s: np.broadcast_to(np.diag([2.0, 3.0]), np.shape(s) + (2, 2)) * (1 + np.asarray(s))[..., None, None]
        for K in (1, 5, 40):
            res = sieve_information(SieveSpec(K, 1.0, CONST, np.array([1.0]), F))
            np.testing.assert_allclose(res.Omega_K_11_inv, np.linalg.inv(res.Omega11), rtol=1e-13)

    def test_gamma_setup_value(self):
        lim = sieve_limit(CONST, [1.0], gamma_F(UNIT), 1.0)
        assert np.isclose(lim[0, 0], 16 / 3, rtol=1e-10)

    def test_power_family_converges(self):
        blk = ParametricBlock(["power"])
        rows = sieve_convergence(blk, [1.0, 1.5], gamma_F(UNIT), 1.0)
        err = np.array([r["relative_error"] for r in rows])
        K = np.array([r["K"] for r in rows])
        assert np.all(np.diff(err) < 0) and err[-1] < 1e-3
        slope = np.polyfit(np.log(K), np.log(err), 1)[0]
        assert -1.5 <= slope <= -0.7

    def test_validation(self):
        with pytest.raises(ValueError):
            SieveSpec(0, 1.0, CONST, np.array([1.0]), gamma_F(UNIT))
