"""Threshold-sweep evaluation of selection methods on a scored pool.

A utility threshold ``u`` slides across the sorted distinct utility means.
At each threshold the subpool of points with utility at most ``u`` (lower
test loss is better) is formed; every method picks one point from it and is
scored against the oracle, the subpool member with the lowest empirical
privacy score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from dpvar.configs import Pool, Relations, ScoredConfig
from dpvar.errors import DegenerateMetricError, UsageError

METHODS = ("ours", "best_utility", "worst_utility", "oracle")
RISK_KINDS = ("relative", "absolute")
DEFAULT_TRIALS = 5000


@dataclass(frozen=True)
class ThresholdRisk:
    threshold: float
    selected_score: float
    oracle_score: float
    risk: float


@dataclass(frozen=True)
class RiskReport:
    method: str
    risk_kind: str
    per_threshold: tuple[ThresholdRisk, ...]
    mean_risk: float
    resample_stats: Optional[tuple[float, float]] = None
    trials: int = field(default=0)


def subpool(pool: Pool, u: float) -> Pool:
    return Pool(e for e in pool.entries if e.utility_mean <= u)


def _check(method: str, risk_kind: str) -> None:
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {METHODS}")
    if risk_kind not in RISK_KINDS:
        raise UsageError(f"unknown risk kind {risk_kind!r}; choose from {RISK_KINDS}")


def _select_index(rel: Relations, mask, utilities, scores, method: str) -> int:
    if method == "ours":
        return rel.select(mask, utilities)
    if method == "best_utility":
        return rel.pick(mask, utilities)
    if method == "worst_utility":
        return rel.pick(mask, utilities, largest=True)
    return rel.pick(mask, scores)


def select_by_method(pool: Pool, method: str) -> ScoredConfig:
    if len(pool) == 0:
        raise UsageError("cannot select from an empty pool")
    _check(method, RISK_KINDS[0])
    entries = pool.entries
    rel = Relations([e.config for e in entries])
    utilities = np.array([e.utility_mean for e in entries])
    scores = np.array([e.score_mean for e in entries])
    mask = np.ones(len(entries), dtype=bool)
    return entries[_select_index(rel, mask, utilities, scores, method)]


def _risk(selected: float, oracle: float, kind: str) -> float:
    if kind == "absolute":
        return selected - oracle
    if oracle <= 0:
        raise DegenerateMetricError(
            f"relative risk undefined for oracle score {oracle!r}; use the absolute risk kind"
        )
    return (selected - oracle) / oracle


def _mean(values) -> float:
    # Shift by the first value so identical inputs reproduce it bit for bit.
    values = list(values)
    base = values[0]
    return base + math.fsum(v - base for v in values) / len(values)


def _sweep(rel: Relations, utilities, scores, method: str, risk_kind: str) -> list[ThresholdRisk]:
    rows = []
    for u in np.unique(utilities):
        mask = utilities <= u
        selected = float(scores[_select_index(rel, mask, utilities, scores, method)])
        oracle = float(scores[rel.pick(mask, scores)])
        rows.append(ThresholdRisk(float(u), selected, oracle, _risk(selected, oracle, risk_kind)))
    return rows


def threshold_sweep(pool: Pool, method: str, risk_kind: str = "relative") -> RiskReport:
    """Risk of ``method`` at every distinct utility threshold of ``pool``."""
    if len(pool) == 0:
        raise UsageError("cannot sweep an empty pool")
    _check(method, risk_kind)
    entries = pool.entries
    rel = Relations([e.config for e in entries])
    utilities = np.array([e.utility_mean for e in entries])
    scores = np.array([e.score_mean for e in entries])
    rows = _sweep(rel, utilities, scores, method, risk_kind)
    return RiskReport(method, risk_kind, tuple(rows), _mean(r.risk for r in rows))


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent generator for one trial, derived from (seed, trial)."""
    return np.random.default_rng(np.random.SeedSequence([seed, trial]))


def monte_carlo_sweep(
    pool: Pool,
    method: str,
    risk_kind: str = "relative",
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
) -> RiskReport:
    """Average ``threshold_sweep`` over layouts resampled from per-config Gaussians.

    Each trial draws all utilities, then all scores, from Normal(mean, std)
    using its own generator ``trial_rng(seed, trial)``.  A zero std leaves the
    mean unchanged.  Resampled scores are used as-is, even when negative.
    """
    if trials < 1:
        raise UsageError("trials must be >= 1")
    base = threshold_sweep(pool, method, risk_kind)
    entries = pool.entries
    rel = Relations([e.config for e in entries])
    u_mean = np.array([e.utility_mean for e in entries])
    u_std = np.array([e.utility_std for e in entries])
    s_mean = np.array([e.score_mean for e in entries])
    s_std = np.array([e.score_std for e in entries])
    risks = []
    for t in range(trials):
        rng = trial_rng(seed, t)
        utilities = rng.normal(u_mean, u_std)
        scores = rng.normal(s_mean, s_std)
        risks.append(_mean(r.risk for r in _sweep(rel, utilities, scores, method, risk_kind)))
    mean = _mean(risks)
    std = math.sqrt(math.fsum((r - mean) ** 2 for r in risks) / (trials - 1)) if trials > 1 else 0.0
    return RiskReport(method, risk_kind, base.per_threshold, mean, (mean, std), trials)
