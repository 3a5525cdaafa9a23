"""Log-space OLS, Spearman correlation and tail probabilities."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, special
from scipy.stats import rankdata

from dpvar.configs import Config
from dpvar.errors import SingularDesignError, UndefinedCorrelationError, UsageError

COVARIATES = {
    "log_b": lambda c: math.log(c.b),
    "log_T": lambda c: math.log(c.steps),
    "log_eta": lambda c: math.log(c.eta),
    "log_C": lambda c: math.log(c.compute),
}


@dataclass(frozen=True)
class RegressionResult:
    covariate_names: tuple[str, ...]
    coefficients: np.ndarray
    standard_errors: np.ndarray
    t_statistics: np.ndarray
    p_values: np.ndarray
    intercept: Optional[float]
    intercept_se: Optional[float]
    intercept_t: Optional[float]
    intercept_p: Optional[float]
    dof: int
    r_squared: float

    def rows(self):
        """(name, coefficient, std error, t, p) per term, intercept first when present."""
        out = []
        if self.intercept is not None:
            out.append(("intercept", self.intercept, self.intercept_se, self.intercept_t, self.intercept_p))
        for i, name in enumerate(self.covariate_names):
            out.append(
                (
                    name,
                    float(self.coefficients[i]),
                    float(self.standard_errors[i]),
                    float(self.t_statistics[i]),
                    float(self.p_values[i]),
                )
            )
        return out


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def student_t_sf(t: float, dof: float) -> float:
    """P[T > t] for Student's t with ``dof`` degrees of freedom."""
    if not dof >= 1:
        raise UsageError(f"dof must be >= 1, got {dof}")
    if t == 0:
        return 0.5
    tail = 0.5 * special.betainc(0.5 * dof, 0.5, dof / (dof + t * t))
    return float(tail if t > 0 else 1.0 - tail)


def binomial_tail(r: int, p: float, v: int) -> float:
    """P[Binomial(r, p) >= v], via the regularized incomplete beta function."""
    if not 0 <= v <= r:
        raise UsageError(f"need 0 <= v <= r, got v={v}, r={r}")
    if not 0.0 <= p <= 1.0:
        raise UsageError(f"p must lie in [0, 1], got {p}")
    if v == 0:
        return 1.0
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 1.0
    return float(special.betainc(v, r - v + 1, p))


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise UsageError("spearman needs two 1-d sequences of equal length")
    if x.size < 2:
        raise UsageError("spearman needs at least two observations")
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    sx, sy = math.sqrt(rx @ rx), math.sqrt(ry @ ry)
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("rank correlation undefined for a constant input")
    return float(np.clip((rx @ ry) / (sx * sy), -1.0, 1.0))


def _collinear_names(X: np.ndarray, names: Sequence[str]) -> list[str]:
    # Columns carrying weight in the numerical null space of the scaled design.
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    _, s, vt = np.linalg.svd(X / scale, full_matrices=True)
    tol = max(X.shape) * np.finfo(float).eps * (s[0] if s.size else 1.0) * 1e3
    rank = int((s > tol).sum())
    null = vt[rank:]
    involved = np.abs(null).max(axis=0) > 1e-6
    return [n for n, hit in zip(names, involved) if hit]


def ols_log_regression(
    records: Sequence[tuple[Config, float]],
    covariates: Sequence[str] = ("log_b", "log_T", "log_eta"),
    intercept: bool = True,
) -> RegressionResult:
    """Least squares of ``y`` on log-transformed hyperparameters.

    Solved by a column-pivoted QR decomposition; standard errors use the
    unbiased residual variance and p-values are two-sided Student-t.
    """
    names = list(covariates)
    unknown = [n for n in names if n not in COVARIATES]
    if unknown or len(set(names)) != len(names):
        raise UsageError(f"covariates must be distinct members of {sorted(COVARIATES)}, got {names}")
    n = len(records)
    k = len(names) + int(intercept)
    if k == 0:
        raise UsageError("regression needs at least one term")
    if n <= k:
        raise UsageError(f"need more than {k} records, got {n}")
    y = np.array([float(v) for _, v in records])
    if not np.all(np.isfinite(y)):
        raise UsageError("responses must be finite")
    columns = [[COVARIATES[name](c) for c, _ in records] for name in names]
    X = np.column_stack(([np.ones(n)] if intercept else []) + columns)
    terms = (["intercept"] if intercept else []) + names

    q, r, perm = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag[-1] <= diag[0] * 1e-10 * max(n, k):
        raise SingularDesignError(
            f"design matrix is rank deficient; collinear terms: {_collinear_names(X, terms)}"
        )
    beta = np.empty(k)
    beta[perm] = linalg.solve_triangular(r, q.T @ y)
    resid = y - X @ beta
    dof = n - k
    s2 = float(resid @ resid) / dof
    r_inv = linalg.solve_triangular(r, np.eye(k))
    cov_diag = np.empty(k)
    cov_diag[perm] = (r_inv**2).sum(axis=1) * s2
    se = np.sqrt(cov_diag)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.sign(beta) * np.inf))
    p = np.array([min(1.0, 2.0 * student_t_sf(abs(v), dof)) if np.isfinite(v) else 0.0 for v in t])

    centered = y - y.mean() if intercept else y
    tss = float(centered @ centered)
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 1.0

    off = int(intercept)
    return RegressionResult(
        covariate_names=tuple(names),
        coefficients=beta[off:],
        standard_errors=se[off:],
        t_statistics=t[off:],
        p_values=p[off:],
        intercept=float(beta[0]) if intercept else None,
        intercept_se=float(se[0]) if intercept else None,
        intercept_t=float(t[0]) if intercept else None,
        intercept_p=float(p[0]) if intercept else None,
        dof=dof,
        r_squared=r2,
    )
