"""Privacy accounting for the Poisson-subsampled Gaussian mechanism.

Two accountants are provided:

* a Renyi (RDP) accountant using the integer-order binomial expansion of the
  subsampled-Gaussian moment, composed linearly and converted to
  (epsilon, delta) with either the classic or the improved rule;
* a numerical privacy-loss-distribution (PLD) accountant which discretizes
  the privacy loss of the dominating pair on a uniform grid, rounding every
  loss up (pessimistic), and composes by FFT convolution with
  exponentiation by squaring.

Both adjacency directions are tracked by the PLD accountant:

``remove``
    P = (1 - q) N(0, s^2) + q N(1, s^2) against Q = N(0, s^2).
``add``
    P = N(0, s^2) against Q = (1 - q) N(0, s^2) + q N(1, s^2).

The reported delta is the larger of the two hockey-stick divergences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import fft, signal, special

from dpvar.errors import (
    ConfigurationError,
    NumericalRangeError,
    ResourceError,
    UnattainableTargetError,
    UsageError,
)

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 513))
DEFAULT_GRID_STEP = 1e-4
DEFAULT_TRUNCATION_MASS = 1e-12
DEFAULT_MAX_POINTS = 1 << 24

_NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class MechanismSpec:
    """T-fold composition of the Poisson-subsampled Gaussian mechanism."""

    q: float
    sigma: float
    steps: int

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise UsageError(f"sampling rate must lie in [0, 1], got {self.q}")
        if not self.sigma > 0.0 or not math.isfinite(self.sigma):
            raise UsageError(f"noise multiplier must be positive, got {self.sigma}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise UsageError(f"steps must be a positive integer, got {self.steps}")

    @classmethod
    def from_sizes(cls, n: int, b: int, sigma: float, steps: int) -> "MechanismSpec":
        return cls(q=b / n, sigma=sigma, steps=steps)


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon >= 0.0:
            raise UsageError(f"epsilon must be non-negative, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise UsageError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise UsageError("orders and values differ in length")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise UsageError("orders must be strictly increasing")
        if any(a < 2 for a in self.orders):
            raise UsageError("orders must be >= 2")
        if any(v < 0 for v in self.values):
            raise UsageError("RDP values must be non-negative")


@dataclass(frozen=True, eq=False)
class PrivacyLossDistribution:
    """Privacy loss random variable on the grid ``(offset + i) * grid_step``.

    ``masses[i]`` is the probability of loss ``(offset + i) * grid_step``;
    ``infinity_mass`` is the probability of an infinite loss, which also
    absorbs any upper tail dropped during truncation.
    """

    grid_step: float
    offset: int
    masses: np.ndarray
    infinity_mass: float = 0.0
    pessimistic: bool = True

    def __post_init__(self):
        if not self.grid_step > 0:
            raise UsageError("grid_step must be positive")
        masses = np.asarray(self.masses, dtype=float)
        if masses.ndim != 1 or masses.size == 0:
            raise UsageError("masses must be a non-empty 1-d array")
        if np.any(masses < 0) or self.infinity_mass < 0:
            raise UsageError("masses must be non-negative")
        total = float(masses.sum()) + self.infinity_mass
        if abs(total - 1.0) > _NORMALIZATION_TOL:
            raise UsageError(f"total mass {total!r} is not 1")
        masses.setflags(write=False)
        object.__setattr__(self, "masses", masses)

    @property
    def min_loss(self) -> float:
        return self.offset * self.grid_step

    @property
    def max_loss(self) -> float:
        return (self.offset + self.masses.size - 1) * self.grid_step

    @property
    def losses(self) -> np.ndarray:
        return (self.offset + np.arange(self.masses.size)) * self.grid_step

    @classmethod
    def point_mass(cls, loss: float = 0.0, grid_step: float = DEFAULT_GRID_STEP):
        return cls(grid_step, math.ceil(loss / grid_step - 1e-9), np.ones(1))


@dataclass(frozen=True)
class PldPair:
    """Loss distributions for the remove and add adjacency directions."""

    remove: PrivacyLossDistribution
    add: PrivacyLossDistribution

    @property
    def infinity_mass(self) -> float:
        return max(self.remove.infinity_mass, self.add.infinity_mass)

    def directions(self) -> tuple[PrivacyLossDistribution, PrivacyLossDistribution]:
        return self.remove, self.add


Pld = Union[PrivacyLossDistribution, PldPair]


# ---------------------------------------------------------------------------
# RDP accountant


def _log_binomial(n: int, k: np.ndarray) -> np.ndarray:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def rdp_one_step(q: float, sigma: float, alpha: int) -> float:
    """Renyi divergence of order ``alpha`` for one subsampled-Gaussian step."""
    if not 0.0 <= q <= 1.0:
        raise UsageError(f"sampling rate must lie in [0, 1], got {q}")
    if not sigma > 0:
        raise UsageError(f"noise multiplier must be positive, got {sigma}")
    if int(alpha) != alpha or alpha < 2:
        raise UsageError(f"order must be an integer >= 2, got {alpha}")
    alpha = int(alpha)
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    k = np.arange(alpha + 1, dtype=float)
    log_terms = (
        _log_binomial(alpha, k)
        + (alpha - k) * math.log1p(-q)
        + k * math.log(q)
        + k * (k - 1) / (2.0 * sigma**2)
    )
    log_moment = special.logsumexp(log_terms)
    value = log_moment / (alpha - 1)
    if not math.isfinite(value):
        raise NumericalRangeError(f"RDP bound overflowed at order {alpha}, sigma={sigma}")
    return max(value, 0.0)


def _rdp_orders(q: float, sigma: float, orders: np.ndarray) -> np.ndarray:
    """Vectorized :func:`rdp_one_step` over integer orders."""
    if q == 0.0:
        return np.zeros(orders.size)
    if q == 1.0:
        return orders / (2.0 * sigma**2)
    top = int(orders.max())
    k = np.arange(top + 1, dtype=float)
    a = orders[:, None].astype(float)
    with np.errstate(invalid="ignore"):
        log_terms = (
            special.gammaln(a + 1)
            - special.gammaln(k + 1)
            - special.gammaln(np.maximum(a - k, 0) + 1)
            + (a - k) * math.log1p(-q)
            + k * math.log(q)
            + k * (k - 1) / (2.0 * sigma**2)
        )
    log_terms = np.where(k[None, :] <= a, log_terms, -np.inf)
    values = special.logsumexp(log_terms, axis=1) / (orders - 1.0)
    if not np.all(np.isfinite(values)):
        raise NumericalRangeError(f"RDP bound overflowed for sigma={sigma}")
    return np.maximum(values, 0.0)


def rdp_curve(spec: MechanismSpec, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    if len(orders) == 0:
        raise UsageError("orders must be non-empty")
    if any(int(a) != a or a < 2 for a in orders):
        raise UsageError("orders must be integers >= 2")
    arr = np.asarray(orders, dtype=int)
    values = spec.steps * _rdp_orders(spec.q, spec.sigma, arr)
    return RdpCurve(tuple(int(a) for a in arr), tuple(float(v) for v in values))


def rdp_to_dp(curve: RdpCurve, delta: float, conversion: str = "classic") -> float:
    """Smallest epsilon over the curve's orders at the given delta.

    ``classic`` is ``rdp + log(1/delta) / (alpha - 1)``.  ``improved`` is the
    hypothesis-testing conversion
    ``rdp + log((alpha - 1) / alpha) - (log(delta) + log(alpha)) / (alpha - 1)``,
    which is never looser.
    """
    if not curve.orders:
        raise UsageError("cannot convert an empty RDP curve")
    if not 0.0 < delta < 1.0:
        raise UsageError(f"delta must lie in (0, 1), got {delta}")
    orders = np.asarray(curve.orders, dtype=float)
    values = np.asarray(curve.values)
    if conversion == "classic":
        eps = values + math.log(1.0 / delta) / (orders - 1.0)
    elif conversion == "improved":
        eps = (
            values
            + np.log1p(-1.0 / orders)
            - (math.log(delta) + np.log(orders)) / (orders - 1.0)
        )
    else:
        raise UsageError(f"unknown conversion {conversion!r}")
    return max(float(eps.min()), 0.0)


# ---------------------------------------------------------------------------
# PLD construction


def _log_mixture_ratio(x: np.ndarray, q: float, sigma: float) -> np.ndarray:
    """log((1-q) + q exp((2x-1)/(2 sigma^2))), increasing in x."""
    z = (2.0 * x - 1.0) / (2.0 * sigma**2)
    if q == 1.0:
        return z
    return np.logaddexp(math.log1p(-q), math.log(q) + z)


def _inverse_log_mixture_ratio(loss: np.ndarray, q: float, sigma: float) -> np.ndarray:
    """x such that the log ratio equals ``loss``; -inf below log(1-q)."""
    loss = np.asarray(loss, dtype=float)
    inner = np.expm1(loss) + q
    with np.errstate(divide="ignore", invalid="ignore"):
        x = sigma**2 * (np.log(inner) - math.log(q)) + 0.5
    return np.where(inner > 0, x, -np.inf)


def _normal_cdf_diff(lo: np.ndarray, hi: np.ndarray, mean: float, sd: float) -> np.ndarray:
    """P(lo <= X < hi) for X ~ N(mean, sd^2), accurate in both tails."""
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    upper = a > 0
    # Above the mean, survival differences avoid cancellation near 1.
    out = np.where(upper, special.ndtr(-a) - special.ndtr(-b), special.ndtr(b) - special.ndtr(a))
    return np.maximum(out, 0.0)


def _interval_mass(lo, hi, q: float, sigma: float, mixture: bool) -> np.ndarray:
    if not mixture:
        return _normal_cdf_diff(lo, hi, 0.0, sigma)
    base = _normal_cdf_diff(lo, hi, 0.0, sigma) if q < 1.0 else 0.0
    shifted = _normal_cdf_diff(lo, hi, 1.0, sigma)
    return (1.0 - q) * base + q * shifted


def _check_points(k_lo: int, k_hi: int, max_points: int, grid_step: float) -> None:
    if k_hi - k_lo + 1 > max_points:
        raise ConfigurationError(
            f"loss range [{k_lo * grid_step:.4g}, {k_hi * grid_step:.4g}] needs "
            f"{k_hi - k_lo + 1} grid points at step {grid_step}; limit is {max_points}"
        )


def _remove_direction(q, sigma, grid_step, tail, max_points) -> PrivacyLossDistribution:
    # x ~ (1-q) N(0, s^2) + q N(1, s^2); loss increasing in x.
    x_lo = sigma * special.ndtri(tail)
    x_hi = 1.0 - sigma * special.ndtri(tail)
    k_lo = math.ceil(float(_log_mixture_ratio(np.array(x_lo), q, sigma)) / grid_step)
    k_hi = math.ceil(float(_log_mixture_ratio(np.array(x_hi), q, sigma)) / grid_step)
    k_hi = max(k_hi, k_lo)
    _check_points(k_lo, k_hi, max_points, grid_step)
    ks = np.arange(k_lo, k_hi + 1)
    upper = _inverse_log_mixture_ratio(ks * grid_step, q, sigma)
    lower = np.concatenate(([-np.inf], upper[:-1]))
    masses = _interval_mass(lower, upper, q, sigma, mixture=True)
    inf_mass = float(_interval_mass(upper[-1:], np.array([np.inf]), q, sigma, mixture=True)[0])
    return _normalized(grid_step, k_lo, masses, inf_mass)


def _add_direction(q, sigma, grid_step, tail, max_points) -> PrivacyLossDistribution:
    # x ~ N(0, s^2); loss = -log ratio, decreasing in x, bounded by -log(1-q).
    x_hi = -sigma * special.ndtri(tail)
    x_lo = sigma * special.ndtri(tail)
    k_lo = math.ceil(-float(_log_mixture_ratio(np.array(x_hi), q, sigma)) / grid_step)
    k_hi = math.ceil(-float(_log_mixture_ratio(np.array(x_lo), q, sigma)) / grid_step)
    if q < 1.0:
        k_hi = min(k_hi, math.ceil(-math.log1p(-q) / grid_step))
    k_hi = max(k_hi, k_lo)
    _check_points(k_lo, k_hi, max_points, grid_step)
    ks = np.arange(k_lo, k_hi + 1)
    # loss in ((k-1)d, kd]  <=>  x in [x(-kd), x(-(k-1)d))
    x_left = _inverse_log_mixture_ratio(-ks * grid_step, q, sigma)
    x_right = np.concatenate(([np.inf], x_left[:-1]))
    masses = _interval_mass(x_left, x_right, q, sigma, mixture=False)
    inf_mass = float(_normal_cdf_diff(np.array([-np.inf]), x_left[-1:], 0.0, sigma)[0])
    return _normalized(grid_step, k_lo, masses, inf_mass)


def _normalized(grid_step, offset, masses, inf_mass) -> PrivacyLossDistribution:
    total = masses.sum() + inf_mass
    # Interval masses telescope to 1 up to ndtr round-off; fold the residue
    # into the finite part so the invariant holds exactly.
    masses = masses * ((1.0 - inf_mass) / masses.sum()) if total > 0 else masses
    return PrivacyLossDistribution(grid_step, int(offset), masses, inf_mass, True)


def pld_single_step(
    q: float,
    sigma: float,
    grid_step: float = DEFAULT_GRID_STEP,
    truncation_mass: float = DEFAULT_TRUNCATION_MASS,
    max_points: int = DEFAULT_MAX_POINTS,
) -> PldPair:
    """Pessimistic PLDs of one subsampled-Gaussian step, both directions.

    Half of ``truncation_mass`` bounds the lower tail, which is lumped into
    the first grid point; the other half bounds the upper tail, which is
    moved to ``infinity_mass``.
    """
    if not 0.0 <= q <= 1.0:
        raise UsageError(f"sampling rate must lie in [0, 1], got {q}")
    if not sigma > 0:
        raise UsageError(f"noise multiplier must be positive, got {sigma}")
    if not grid_step > 0:
        raise ConfigurationError(f"grid_step must be positive, got {grid_step}")
    if not 0.0 < truncation_mass <= 1e-3:
        raise ConfigurationError(f"truncation_mass must lie in (0, 1e-3], got {truncation_mass}")
    if q == 0.0:
        point = PrivacyLossDistribution.point_mass(0.0, grid_step)
        return PldPair(point, point)
    tail = truncation_mass / 2.0
    return PldPair(
        _remove_direction(q, sigma, grid_step, tail, max_points),
        _add_direction(q, sigma, grid_step, tail, max_points),
    )


# ---------------------------------------------------------------------------
# Composition


def _trim(masses: np.ndarray, offset: int, budget: float):
    """Lump the lower tail upward and cut the upper tail, each within ``budget``."""
    cum = np.cumsum(masses)
    lo = min(int(np.searchsorted(cum, budget, side="right")), masses.size - 1)
    tail = np.cumsum(masses[::-1])
    hi = max(masses.size - int(np.searchsorted(tail, budget, side="right")), lo + 1)
    dropped = float(masses[hi:].sum())
    kept = masses[lo:hi].copy()
    kept[0] += masses[:lo].sum()
    return kept, offset + lo, dropped


def _log_mgf(masses: np.ndarray, losses: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """log E[exp(lam * L)] for each entry of ``lam``, shifted to avoid overflow."""
    out = np.empty(lam.size)
    positive = lam > 0
    for sel, ref in ((positive, losses[-1]), (~positive, losses[0])):
        if sel.any():
            scaled = np.exp(np.outer(lam[sel], losses - ref)) @ masses
            out[sel] = lam[sel] * ref + np.log(scaled)
    return out


def _composed_support(pld: PrivacyLossDistribution, steps: int, budget: float) -> tuple[int, int]:
    """Grid indices bracketing all but ``budget`` mass of each composed tail (Chernoff)."""
    masses = pld.masses / pld.masses.sum()
    losses = pld.losses
    lam = np.geomspace(1e-2, 1e3, 48)
    log_budget = math.log(budget)
    upper = (steps * _log_mgf(masses, losses, lam) - log_budget) / lam
    lower = -(steps * _log_mgf(masses, losses, -lam) - log_budget) / lam
    hi = min(float(upper.min()), steps * losses[-1])
    lo = max(float(lower.max()), steps * losses[0])
    return math.floor(lo / pld.grid_step - 1e-9), math.ceil(hi / pld.grid_step + 1e-9)


def _compose_one(
    pld: PrivacyLossDistribution, steps: int, truncation_mass: float, max_points: int
) -> PrivacyLossDistribution:
    if steps == 1:
        return pld
    finite = (1.0 - pld.infinity_mass) ** steps
    if pld.masses.size == 1:
        return PrivacyLossDistribution(
            pld.grid_step, pld.offset * steps, np.array([finite]), 1.0 - finite, pld.pessimistic
        )
    budget = truncation_mass / 4.0
    k_lo, k_hi = _composed_support(pld, steps, budget)
    length = k_hi - k_lo + 1
    if length > max_points:
        raise ResourceError(
            f"composed support needs {length} grid points; limit is {max_points}"
        )
    size = fft.next_fast_len(max(length, pld.masses.size), real=True)
    base = fft.rfft(pld.masses / pld.masses.sum(), size)
    spectrum = None
    remaining = steps
    while True:
        if remaining & 1:
            spectrum = base if spectrum is None else spectrum * base
        remaining >>= 1
        if not remaining:
            break
        base = base * base
        base /= base[0].real
    composed = fft.irfft(spectrum, size)
    # Circular index p holds loss index steps * offset + p (mod size).
    composed = np.roll(composed, -((k_lo - steps * pld.offset) % size))[:length]
    np.maximum(composed, 0.0, out=composed)
    # Upper mass outside the window may have wrapped downward; charge it to infinity.
    inf_mass = min(1.0 - finite + budget, 1.0)
    composed *= (1.0 - inf_mass) / composed.sum()
    masses, offset, dropped = _trim(composed, k_lo, budget)
    return PrivacyLossDistribution(
        pld.grid_step, offset, masses, inf_mass + dropped, pld.pessimistic
    )


def pld_compose(
    pld: Pld,
    steps: int,
    truncation_mass: float = DEFAULT_TRUNCATION_MASS,
    max_points: int = DEFAULT_MAX_POINTS,
) -> Pld:
    """``steps``-fold self-composition by exponentiating the characteristic function.

    The output grid is sized from a Chernoff bound on the composed loss so
    the circular FFT convolution does not alias beyond ``truncation_mass``;
    that budget is charged to ``infinity_mass``.
    """
    if int(steps) != steps or steps < 1:
        raise UsageError(f"steps must be a positive integer, got {steps}")
    steps = int(steps)
    if isinstance(pld, PldPair):
        return PldPair(
            _compose_one(pld.remove, steps, truncation_mass, max_points),
            _compose_one(pld.add, steps, truncation_mass, max_points),
        )
    return _compose_one(pld, steps, truncation_mass, max_points)


def mechanism_pld(
    spec: MechanismSpec,
    grid_step: float = DEFAULT_GRID_STEP,
    truncation_mass: float = DEFAULT_TRUNCATION_MASS,
    max_points: int = DEFAULT_MAX_POINTS,
) -> PldPair:
    """PLD pair of the full T-step mechanism.

    The single-step tail budget is divided by T so that the composed
    infinity mass stays near ``truncation_mass`` rather than growing with T.
    """
    single = pld_single_step(
        spec.q, spec.sigma, grid_step, truncation_mass / spec.steps, max_points
    )
    return pld_compose(single, spec.steps, truncation_mass / 2.0, max_points)


# ---------------------------------------------------------------------------
# Queries


def _hockey_stick(pld: PrivacyLossDistribution, epsilon: float) -> float:
    losses = pld.losses
    mask = losses > epsilon
    if not mask.any():
        return pld.infinity_mass
    tail = -np.expm1(epsilon - losses[mask])
    return float(np.dot(tail, pld.masses[mask])) + pld.infinity_mass


def delta_at_epsilon(pld: Pld, epsilon: float) -> float:
    """Hockey-stick divergence; for a pair, the larger of the two directions."""
    if isinstance(pld, PldPair):
        return min(max(_hockey_stick(p, epsilon) for p in pld.directions()), 1.0)
    return min(_hockey_stick(pld, epsilon), 1.0)


def _tail_table(pld: PrivacyLossDistribution) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive suffix sums ``sum_{i>=j} m_i`` and ``sum_{i>=j} m_i exp(l_j - l_i)``."""
    cached = pld.__dict__.get("_tail_cache")
    if cached is None:
        masses = np.asarray(pld.masses)
        tail_mass = np.cumsum(masses[::-1])[::-1]
        decay = math.exp(-pld.grid_step)
        tail_weighted = signal.lfilter([1.0], [1.0, -decay], masses[::-1])[::-1]
        cached = (tail_mass, tail_weighted)
        pld.__dict__["_tail_cache"] = cached
    return cached


def _epsilon_one(pld: PrivacyLossDistribution, delta: float) -> float:
    if delta <= pld.infinity_mass:
        raise UnattainableTargetError(
            f"delta={delta:g} is not above the infinity mass {pld.infinity_mass:g}; "
            "reduce truncation_mass"
        )
    if _hockey_stick(pld, 0.0) <= delta:
        return 0.0
    losses = pld.losses
    tail_mass, tail_weighted = _tail_table(pld)
    # delta at eps = l_j, non-increasing in j
    at_grid = tail_mass - tail_weighted + pld.infinity_mass
    start = int(np.searchsorted(losses, 0.0, side="left"))
    # First j >= start whose divergence is within the target.
    j = start + int(np.searchsorted(-at_grid[start:], -delta, side="left"))
    j = min(j, losses.size - 1)
    # On (l_{j-1}, l_j] the divergence is tail_mass[j] + inf - exp(eps - l_j) * tail_weighted[j].
    ratio = (tail_mass[j] + pld.infinity_mass - delta) / tail_weighted[j]
    eps = losses[j] + math.log(ratio) if ratio > 0 else losses[j]
    floor = losses[j - 1] if j > start else 0.0
    return float(min(max(eps, floor, 0.0), losses[j]))


def epsilon_at_delta(pld: Pld, delta: float) -> float:
    """Smallest epsilon >= 0 whose hockey-stick divergence is at most ``delta``."""
    if not 0.0 < delta < 1.0:
        raise UsageError(f"delta must lie in (0, 1), got {delta}")
    if isinstance(pld, PldPair):
        return max(_epsilon_one(p, delta) for p in pld.directions())
    return _epsilon_one(pld, delta)


def gaussian_delta_oracle(sigma: float, epsilon: float) -> float:
    """Exact delta(epsilon) of the Gaussian mechanism with sensitivity 1."""
    if not sigma > 0:
        raise UsageError(f"noise multiplier must be positive, got {sigma}")
    a = 0.5 / sigma - epsilon * sigma
    b = -0.5 / sigma - epsilon * sigma
    value = special.ndtr(a) - math.exp(epsilon + special.log_ndtr(b))
    return float(min(max(value, 0.0), 1.0))


def pld_epsilon(spec: MechanismSpec, delta: float, **kwargs) -> float:
    return epsilon_at_delta(mechanism_pld(spec, **kwargs), delta)


def rdp_epsilon(
    spec: MechanismSpec,
    delta: float,
    orders: Sequence[int] = DEFAULT_ORDERS,
    conversion: str = "improved",
) -> float:
    return rdp_to_dp(rdp_curve(spec, orders), delta, conversion)
