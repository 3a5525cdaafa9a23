"""Noise-multiplier calibration for DP-SGD.

Epsilon is strictly decreasing in sigma for fixed (q, T, delta), so the
calibrated sigma is found by bracketing the target and shrinking the bracket
with false-position steps taken in (log sigma, log epsilon) coordinates,
where the curve is close to a straight line.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

from dpvar.accountant import (
    DEFAULT_GRID_STEP,
    MechanismSpec,
    PrivacyParams,
    pld_epsilon,
    rdp_epsilon,
)
from dpvar.errors import CalibrationError, ConfigurationError, ResourceError, UsageError

log = logging.getLogger(__name__)

ACCOUNTANTS = ("pld", "rdp")
SIGMA_LIMITS = (1e-6, 1e6)


@dataclass(frozen=True)
class CalibrationRequest:
    n: int
    b: int
    steps: int
    target: PrivacyParams
    accountant: str = "pld"
    tolerance: float = 1e-4
    grid_step: float = DEFAULT_GRID_STEP
    rdp_conversion: str = "improved"

    def __post_init__(self):
        if not 1 <= self.b <= self.n:
            raise UsageError(f"need 1 <= b <= n, got b={self.b}, n={self.n}")
        if self.steps < 1:
            raise UsageError(f"steps must be >= 1, got {self.steps}")
        if self.accountant not in ACCOUNTANTS:
            raise UsageError(f"accountant must be one of {ACCOUNTANTS}, got {self.accountant!r}")
        if not 0 < self.tolerance < 0.1:
            raise UsageError(f"tolerance must lie in (0, 0.1), got {self.tolerance}")

    @property
    def q(self) -> float:
        return self.b / self.n


def default_delta(n: int) -> float:
    """The n^-1.1 rule for delta."""
    if n < 2:
        raise UsageError(f"dataset size must be >= 2, got {n}")
    return math.exp(-1.1 * math.log(n))


def epsilon_for(req: CalibrationRequest, sigma: float) -> float:
    spec = MechanismSpec(req.q, sigma, req.steps)
    if req.accountant == "rdp":
        return rdp_epsilon(spec, req.target.delta, conversion=req.rdp_conversion)
    try:
        return pld_epsilon(spec, req.target.delta, grid_step=req.grid_step)
    except (ConfigurationError, ResourceError):
        # The loss range explodes as sigma -> 0; such sigmas are far too small.
        return math.inf


def _find_bracket(f: Callable[[float], float], lo: float, hi: float, target: float):
    """Expand [lo, hi] geometrically until f(lo) > target >= f(hi)."""
    f_lo, f_hi = f(lo), f(hi)
    while f_hi > target:
        lo, f_lo = hi, f_hi
        hi *= 2.0
        if hi > SIGMA_LIMITS[1]:
            raise CalibrationError(f"target epsilon {target} unattainable for sigma <= {SIGMA_LIMITS[1]}")
        f_hi = f(hi)
    while f_lo <= target:
        hi, f_hi = lo, f_lo
        lo /= 2.0
        if lo < SIGMA_LIMITS[0]:
            raise CalibrationError(f"target epsilon {target} is met even at sigma={SIGMA_LIMITS[0]}")
        f_lo = f(lo)
    return lo, f_lo, hi, f_hi


def _solve(f: Callable[[float], float], target: float, lo: float, hi: float, tol: float) -> float:
    lo, f_lo, hi, f_hi = _find_bracket(f, lo, hi, target)
    y_target = math.log(target)
    # Illinois weights: halve the stale endpoint's residual when one side repeats.
    w_lo = w_hi = 1.0
    last = None
    for _ in range(200):
        if f_hi >= target * (1.0 - tol) or hi / lo - 1.0 <= 10.0 * tol:
            break
        x_lo, x_hi = math.log(lo), math.log(hi)
        if math.isfinite(f_lo) and f_hi > 0:
            r_lo = w_lo * (math.log(f_lo) - y_target)
            r_hi = w_hi * (math.log(f_hi) - y_target)
            x = x_hi - r_hi * (x_hi - x_lo) / (r_hi - r_lo)
            width = x_hi - x_lo
            x = min(max(x, x_lo + 0.01 * width), x_hi - 0.01 * width)
        else:
            x = 0.5 * (x_lo + x_hi)
        mid = math.exp(x)
        f_mid = f(mid)
        if f_mid > target:
            lo, f_lo, w_lo = mid, f_mid, 1.0
            w_hi = w_hi / 2.0 if last == "lo" else 1.0
            last = "lo"
        else:
            hi, f_hi, w_hi = mid, f_mid, 1.0
            w_lo = w_lo / 2.0 if last == "hi" else 1.0
            last = "hi"
    return hi


def calibrate_sigma(req: CalibrationRequest) -> float:
    """Smallest noise multiplier (to ``req.tolerance``) meeting ``req.target``.

    The returned sigma satisfies epsilon(sigma) <= target epsilon under the
    chosen accountant, and epsilon(sigma * (1 - 10 * tolerance)) exceeds it.
    """
    target = req.target.epsilon
    if target <= 0:
        raise CalibrationError("epsilon = 0 needs infinite noise")
    if req.accountant == "pld":
        # RDP upper-bounds the true epsilon, so its sigma is a tight upper guess.
        guess = calibrate_sigma(
            CalibrationRequest(req.n, req.b, req.steps, req.target, "rdp", req.tolerance)
        )
        lo, hi = 0.85 * guess, guess
    else:
        lo, hi = 1e-2, 1e2
    sigma = _solve(lambda s: epsilon_for(req, s), target, lo, hi, req.tolerance)
    log.debug("calibrated sigma=%.6g for %s", sigma, req)
    return sigma
