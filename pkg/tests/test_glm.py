import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tuckreg.glm import (GlmFamily, InvalidResponseError, SingularFitError, deviance,
                         family_eval, irls_fit, loglik)

NORMAL = GlmFamily("normal")
BERNOULLI = GlmFamily("bernoulli")
POISSON = GlmFamily("poisson")

LOGIT_X = np.array([[1, -1.0], [1, -0.5], [1, 0.0], [1, 0.3], [1, 0.8], [1, 1.2], [1, 1.5],
                    [1, -0.2]])
LOGIT_Y = np.array([0, 0, 1, 0, 1, 1, 1, 0.0])
# plain Newton iteration on the Bernoulli log-likelihood, run to machine precision
LOGIT_COEF = np.array([-0.8381542575647993, 3.9365129329651327])


def newton_logit(x, y, iters=60):
    b = np.zeros(x.shape[1])
    for _ in range(iters):
        mu = 1 / (1 + np.exp(-x @ b))
        h = (x * (mu * (1 - mu))[:, None]).T @ x
        b = b + np.linalg.solve(h, x.T @ (y - mu))
    return b


class TestFamilyEval:
    def test_bernoulli_at_zero(self):
        mu, mp, var = family_eval(BERNOULLI, np.array([0.0]))
        assert mu[0] == 0.5 and mp[0] == 0.25 and var[0] == 0.25

    def test_poisson_at_zero(self):
        mu, mp, var = family_eval(POISSON, np.array([0.0]))
        assert mu[0] == 1 and mp[0] == 1 and var[0] == 1

    def test_normal_identity(self):
        eta = np.array([-1.5, 0.0, 2.25])
        mu, mp, var = family_eval(GlmFamily("normal", dispersion=2.0), eta)
        np.testing.assert_array_equal(mu, eta)
        np.testing.assert_array_equal(mp, 1.0)
        np.testing.assert_array_equal(var, 2.0)

    def test_non_finite_eta(self):
        with pytest.raises(ValueError):
            family_eval(NORMAL, np.array([0.0, np.nan]))

    @settings(max_examples=50, deadline=None)
    @given(st.sampled_from(["normal", "bernoulli", "poisson"]),
           st.lists(st.floats(-20, 20), min_size=2, max_size=10, unique=True))
    def test_mean_increasing(self, kind, etas):
        eta = np.sort(np.array(etas))
        mu, mp, var = family_eval(GlmFamily(kind), eta)
        assert np.all(np.diff(mu) >= 0) and np.all(mp > 0) and np.all(var > 0)


class TestResponseValidation:
    def test_bernoulli_values(self):
        with pytest.raises(InvalidResponseError):
            loglik(BERNOULLI, np.array([0.0, 2.0]), np.zeros(2))

    def test_poisson_values(self):
        with pytest.raises(InvalidResponseError):
            loglik(POISSON, np.array([1.5]), np.zeros(1))
        with pytest.raises(InvalidResponseError):
            loglik(POISSON, np.array([-1.0]), np.zeros(1))

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            GlmFamily("gamma")


class TestDeviance:
    def test_normal_exact_fit(self):
        y = np.array([1.0, -2.0, 3.5])
        assert deviance(NORMAL, y, y) == 0

    def test_bernoulli_saturating(self):
        assert deviance(BERNOULLI, np.array([1.0]), np.array([40.0])) < 1e-15

    def test_poisson_hand_formula(self):
        # 2 * sum(y log(y / mu) - (y - mu)) with mu = (1, 2), y = (0, 2): 2 * (1 + 0) = 2
        assert deviance(POISSON, np.array([0.0, 2.0]), np.array([0.0, np.log(2.0)])) == \
            pytest.approx(2.0, abs=1e-14)

    def test_normal_convention(self):
        y, eta = np.array([1.0, 2.0]), np.array([0.0, 0.0])
        assert deviance(GlmFamily("normal", dispersion=2.0), y, eta) == pytest.approx(2.5)

    def test_poisson_loglik_hand_value(self):
        # y log mu - mu - log y!
        got = loglik(POISSON, np.array([3.0]), np.array([np.log(2.0)]))
        assert got == pytest.approx(3 * np.log(2.0) - 2.0 - np.log(6.0), rel=1e-14)

    def test_profiled_normal_loglik(self):
        y, eta = np.array([1.0, -1.0, 0.5, 0.0]), np.zeros(4)
        rss = float(np.sum(y**2))
        assert loglik(NORMAL, y, eta) == pytest.approx(-2 * (np.log(2 * np.pi * rss / 4) + 1))


class TestIrls:
    def test_normal_is_least_squares(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(40, 3))
        y = x @ [1.0, -2.0, 0.5] + rng.normal(size=40)
        fit = irls_fit(x, y, NORMAL)
        ols = np.linalg.lstsq(x, y, rcond=None)[0]
        np.testing.assert_allclose(fit.coef, ols, atol=1e-10)
        assert fit.converged

    def test_poisson_intercept(self):
        fit = irls_fit(np.ones((3, 1)), np.array([1.0, 2.0, 3.0]), POISSON)
        assert fit.coef[0] == pytest.approx(np.log(2.0), abs=1e-10)

    def test_bernoulli_newton_oracle(self):
        np.testing.assert_allclose(newton_logit(LOGIT_X, LOGIT_Y), LOGIT_COEF, atol=1e-12)
        fit = irls_fit(LOGIT_X, LOGIT_Y, BERNOULLI)
        np.testing.assert_allclose(fit.coef, LOGIT_COEF, atol=1e-8)

    def test_offset(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(30, 2))
        off = rng.normal(size=30)
        y = rng.poisson(np.exp(0.3 * x[:, 0] + off)).astype(float)
        fit = irls_fit(x, y, POISSON, offset=off)
        mu = np.exp(x @ fit.coef + off)
        assert np.max(np.abs(x.T @ (y - mu))) < 1e-6

    def test_singular_design(self):
        x = np.column_stack([np.ones(5), np.ones(5)])
        with pytest.raises(SingularFitError):
            irls_fit(x, np.arange(5.0), NORMAL)
        fit = irls_fit(x, np.arange(5.0), NORMAL, on_singular="lstsq")
        assert fit.coef.sum() == pytest.approx(2.0)

    def test_separable_data_stays_finite(self):
        x = np.column_stack([np.ones(6), np.arange(6.0)])
        y = np.array([0, 0, 0, 1, 1, 1.0])
        fit = irls_fit(x, y, BERNOULLI, max_iter=100)
        assert np.all(np.isfinite(fit.coef)) and np.isfinite(fit.loglik)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(["bernoulli", "poisson"]), st.integers(0, 10_000))
    def test_monotone_and_stationary(self, kind, seed):
        rng = np.random.default_rng(seed)
        x = np.column_stack([np.ones(60), rng.normal(size=(60, 2))])
        eta = x @ np.array([0.2, 0.8, -0.5])
        if kind == "bernoulli":
            y = (rng.random(60) < 1 / (1 + np.exp(-eta))).astype(float)
        else:
            y = rng.poisson(np.exp(eta)).astype(float)
        fam = GlmFamily(kind)
        start = rng.normal(size=3) * 2
        fit = irls_fit(x, y, fam, start=start)
        assert np.all(np.diff(fit.loglik_trace) >= -1e-10 * (1 + abs(fit.loglik)))
        if fit.converged and not (kind == "bernoulli" and np.max(np.abs(fit.coef)) > 15):
            mu, mp, var = family_eval(fam, x @ fit.coef)
            assert np.max(np.abs(x.T @ ((y - mu) * mp / var))) < 1e-6
