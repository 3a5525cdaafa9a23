"""Membership-guessing audits and their conversion to an epsilon lower bound.

An auditor makes ``r`` membership guesses about planted canaries and gets
``v`` right.  Under epsilon-DP each guess is correct with probability at
most ``p(eps) = e^eps / (1 + e^eps)``, so a high ``v`` rules out small
epsilons.  ``epsilon_hat`` reports the boundary epsilon at which observing
``v`` or more correct guesses has probability exactly ``confidence``; every
smaller epsilon is rejected at that level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from dpvar.errors import UsageError
from dpvar.stats import binomial_tail

EPS_TOLERANCE = 1e-4
EPS_CEILING = 50.0


@dataclass(frozen=True)
class AuditOutcome:
    guesses_made: int
    guesses_correct: int
    total_canaries: int
    confidence: float = 0.05
    boundary_ties: bool = False

    def __post_init__(self):
        r, v, m = self.guesses_made, self.guesses_correct, self.total_canaries
        if not 0 <= v <= r <= m:
            raise UsageError(f"need 0 <= v <= r <= m, got v={v}, r={r}, m={m}")
        if not 0 < self.confidence <= 0.5:
            raise UsageError(f"confidence must lie in (0, 0.5], got {self.confidence}")


def guesses_from_losses(
    member_losses: Sequence[float],
    nonmember_losses: Sequence[float],
    k: Optional[int] = None,
    confidence: float = 0.05,
) -> AuditOutcome:
    """Guess the ``k`` lowest-loss canaries as members, the ``k`` highest as non-members.

    Ties are broken by position in the pooled list (members first), and
    ``boundary_ties`` records whether a tie straddled either guess cutoff.
    """
    members = np.asarray(member_losses, dtype=float)
    nonmembers = np.asarray(nonmember_losses, dtype=float)
    if members.size != nonmembers.size or members.size == 0:
        raise UsageError("member and non-member canary sets must be non-empty and equal-sized")
    m = members.size + nonmembers.size
    if k is None:
        k = m // 4
    if not 0 <= k <= members.size:
        raise UsageError(f"k must lie in [0, {members.size}], got {k}")
    losses = np.concatenate([members, nonmembers])
    is_member = np.arange(m) < members.size
    order = np.argsort(losses, kind="stable")
    low, high = order[:k], order[m - k:]
    v = int(is_member[low].sum() + (~is_member[high]).sum())
    sorted_losses = losses[order]
    ties = False
    if 0 < k < m:
        ties = bool(sorted_losses[k - 1] == sorted_losses[k] or sorted_losses[m - k - 1] == sorted_losses[m - k])
    return AuditOutcome(2 * k, v, m, confidence, ties)


def epsilon_hat(outcome: AuditOutcome) -> float:
    """Audited lower bound on epsilon from a binomial tail test.

    Returns 0 when ``v`` correct guesses are not surprising even at epsilon 0.
    Otherwise bisects in epsilon to ``EPS_TOLERANCE`` and returns the lower
    end of the final bracket, so the reported value never overshoots.
    """
    r, v, alpha = outcome.guesses_made, outcome.guesses_correct, outcome.confidence

    def tail(eps: float) -> float:
        return binomial_tail(r, float(expit(eps)), v)

    if r == 0 or tail(0.0) >= alpha:
        return 0.0
    lo, hi = 0.0, 1.0
    while tail(hi) < alpha:
        lo, hi = hi, 2.0 * hi
        if hi > EPS_CEILING:
            return lo
    while hi - lo > EPS_TOLERANCE:
        mid = 0.5 * (lo + hi)
        if tail(mid) < alpha:
            lo = mid
        else:
            hi = mid
    return lo


def simulate_audit(epsilon: float, r: int, confidence: float, rng: np.random.Generator) -> float:
    """epsilon_hat for one audit where each of ``r`` guesses is right w.p. p(epsilon)."""
    v = int(rng.binomial(r, float(expit(epsilon))))
    return epsilon_hat(AuditOutcome(r, v, r, confidence))


def all_correct_epsilon(r: int, confidence: float) -> float:
    """Closed form of the boundary when every guess is correct."""
    p = confidence ** (1.0 / r)
    return math.log(p / (1.0 - p))
