import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import gammaln

from conftest import small_model_configs
from dpvar.configs import Config
from dpvar.errors import SingularDesignError, UndefinedCorrelationError, UsageError
from dpvar.stats import (
    binomial_tail,
    ols_log_regression,
    significance_stars,
    spearman,
    student_t_sf,
)


def t_pdf(x, dof):
    log_norm = gammaln((dof + 1) / 2) - gammaln(dof / 2) - 0.5 * math.log(dof * math.pi)
    return math.exp(log_norm - (dof + 1) / 2 * math.log1p(x * x / dof))


@pytest.mark.parametrize("t,dof", [(2.0, 10), (0.5, 3), (-1.2, 7), (4.0, 30)])
def test_t_sf_matches_quadrature(t, dof):
    ref, _ = integrate.quad(t_pdf, t, np.inf, args=(dof,), epsabs=1e-13)
    assert student_t_sf(t, dof) == pytest.approx(ref, rel=1e-8)


def test_t_sf_reference_points():
    assert student_t_sf(2.0, 10) == pytest.approx(0.036694017385370196, rel=1e-9)
    assert student_t_sf(0.0, 5) == 0.5
    # large dof approaches the normal tail
    assert student_t_sf(1.96, 1e7) == pytest.approx(0.5 * math.erfc(1.96 / math.sqrt(2)), rel=1e-5)
    with pytest.raises(UsageError):
        student_t_sf(1.0, 0)


def test_binomial_tail_examples():
    assert binomial_tail(2, 0.5, 2) == pytest.approx(0.25)
    assert binomial_tail(10, 0.05**0.1, 10) == pytest.approx(0.05, rel=1e-12)
    assert binomial_tail(5, 0.3, 0) == 1.0
    direct = sum(math.comb(12, j) * 0.4**j * 0.6 ** (12 - j) for j in range(5, 13))
    assert binomial_tail(12, 0.4, 5) == pytest.approx(direct, rel=1e-12)
    with pytest.raises(UsageError):
        binomial_tail(3, 0.5, 4)


def test_binomial_tail_monotone():
    ps = np.linspace(0.01, 0.99, 50)
    tails = [binomial_tail(20, p, 14) for p in ps]
    assert np.all(np.diff(tails) > 0)
    vs = [binomial_tail(20, 0.6, v) for v in range(21)]
    assert np.all(np.diff(vs) < 0)


def test_spearman_examples():
    assert spearman([1, 2, 3, 4, 5], [5, 6, 7, 8, 7]) == pytest.approx(0.8207826816681233)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    with pytest.raises(UndefinedCorrelationError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(UsageError):
        spearman([1], [2])


def test_spearman_invariant_under_monotone_maps(rng):
    x, y = rng.normal(size=40), rng.normal(size=40)
    base = spearman(x, y)
    assert spearman(np.exp(x), y**3) == pytest.approx(base, rel=1e-12)


def test_significance_stars():
    assert [significance_stars(p) for p in (0.0005, 0.005, 0.02, 0.2)] == ["***", "**", "*", ""]


def test_noiseless_recovery():
    configs = small_model_configs()
    coefs = (0.13, 0.37, 0.51)
    records = [
        (c, 0.7 + coefs[0] * math.log(c.b) + coefs[1] * math.log(c.steps) + coefs[2] * math.log(c.eta))
        for c in configs
    ]
    res = ols_log_regression(records)
    assert res.coefficients == pytest.approx(coefs, abs=1e-10)
    assert res.intercept == pytest.approx(0.7, abs=1e-9)
    assert res.r_squared == pytest.approx(1.0)
    assert res.dof == len(configs) - 4


def test_against_lstsq_and_residual_orthogonality(rng):
    configs = small_model_configs()
    y = rng.normal(size=len(configs))
    res = ols_log_regression(list(zip(configs, y)))
    X = np.column_stack(
        [np.ones(len(configs))]
        + [[f(c) for c in configs] for f in (lambda c: math.log(c.b), lambda c: math.log(c.steps), lambda c: math.log(c.eta))]
    )
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    assert res.intercept == pytest.approx(beta[0], abs=1e-10)
    assert res.coefficients == pytest.approx(beta[1:], abs=1e-10)
    resid = y - X @ beta
    assert np.abs(X.T @ resid).max() < 1e-10
    cov = resid @ resid / res.dof * np.linalg.inv(X.T @ X)
    assert res.standard_errors == pytest.approx(np.sqrt(np.diag(cov))[1:], rel=1e-8)
    for t, p in zip(res.t_statistics, res.p_values):
        assert p == pytest.approx(2 * student_t_sf(abs(t), res.dof))


def test_constant_response():
    configs = small_model_configs()
    res = ols_log_regression([(c, 2.5) for c in configs])
    assert res.coefficients == pytest.approx([0, 0, 0], abs=1e-12)
    assert res.intercept == pytest.approx(2.5)
    assert res.r_squared == 1.0


def test_singular_design_names_collinear_terms():
    configs = small_model_configs()
    records = [(c, 1.0 + 0.1 * i) for i, c in enumerate(configs)]
    with pytest.raises(SingularDesignError) as info:
        ols_log_regression(records, covariates=("log_b", "log_T", "log_C"))
    message = str(info.value)
    assert "log_b" in message and "log_T" in message and "log_C" in message
    assert "intercept" not in message


def test_regression_usage_errors():
    records = [(Config(2**i, 10, 1e-3), float(i)) for i in range(1, 4)]
    with pytest.raises(UsageError):
        ols_log_regression(records, covariates=("log_b", "log_x"))
    with pytest.raises(UsageError):
        ols_log_regression(records, covariates=("log_b", "log_T", "log_eta"))
    rows = ols_log_regression(records, covariates=("log_b",)).rows()
    assert [r[0] for r in rows] == ["intercept", "log_b"]
