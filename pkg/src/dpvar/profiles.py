"""Privacy profiles: the epsilon(delta) curve of a mechanism.

Mechanisms calibrated to the same (epsilon, delta) all pass through that
point, but their profiles need not coincide elsewhere.  ``crossing_report``
locates where two profiles swap order on a shared delta grid.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from dpvar.accountant import (
    DEFAULT_GRID_STEP,
    MechanismSpec,
    Pld,
    epsilon_at_delta,
    mechanism_pld,
)
from dpvar.errors import UnattainableTargetError, UsageError

log = logging.getLogger(__name__)

# Real orders > 1 for the closed-form Gaussian reference curve.
DENSE_ORDERS = 1.0 + np.geomspace(1e-4, 1e5, 20001)


def default_delta_grid(points: int = 200, low: float = 1e-10, high: float = 1e-2) -> np.ndarray:
    return np.geomspace(low, high, points)


@dataclass(frozen=True)
class PrivacyProfile:
    spec: Optional[MechanismSpec]
    points: tuple[tuple[float, float], ...]
    dropped: int = 0

    def __post_init__(self):
        deltas = [d for d, _ in self.points]
        if any(b <= a for a, b in zip(deltas, deltas[1:])):
            raise UsageError("profile deltas must be strictly increasing")

    @property
    def deltas(self) -> np.ndarray:
        return np.array([d for d, _ in self.points])

    @property
    def epsilons(self) -> np.ndarray:
        return np.array([e for _, e in self.points])

    def epsilon_at(self, delta: float) -> float:
        """Interpolate epsilon linearly in log(delta)."""
        deltas = self.deltas
        if not deltas[0] <= delta <= deltas[-1]:
            raise UsageError(f"delta={delta:g} outside profile range")
        return float(np.interp(math.log(delta), np.log(deltas), self.epsilons))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["delta", "epsilon"])
            for d, e in self.points:
                writer.writerow([repr(d), repr(e)])

    @classmethod
    def from_csv(cls, path) -> "PrivacyProfile":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["delta", "epsilon"]:
                raise UsageError(f"{path}: expected header 'delta,epsilon'")
            try:
                points = tuple((float(d), float(e)) for d, e in reader)
            except ValueError as exc:
                raise UsageError(f"{path}: {exc}") from None
        return cls(None, points)


def _sorted_grid(delta_grid) -> np.ndarray:
    grid = np.unique(np.asarray(delta_grid, dtype=float))
    if grid.size == 0:
        raise UsageError("delta grid is empty")
    if grid[0] <= 0 or grid[-1] >= 1:
        raise UsageError("delta grid must lie in (0, 1)")
    return grid


def compute_profile(
    spec: MechanismSpec,
    delta_grid: Optional[Sequence[float]] = None,
    grid_step: float = DEFAULT_GRID_STEP,
    pld: Optional[Pld] = None,
) -> PrivacyProfile:
    """Query the PLD accountant once per grid delta.

    Deltas the discretization cannot certify (at or below the infinity mass)
    are dropped and counted in ``PrivacyProfile.dropped``.
    """
    grid = _sorted_grid(default_delta_grid() if delta_grid is None else delta_grid)
    if pld is None:
        pld = mechanism_pld(spec, grid_step=grid_step)
    points = []
    dropped = 0
    for delta in grid:
        try:
            points.append((float(delta), epsilon_at_delta(pld, float(delta))))
        except UnattainableTargetError:
            dropped += 1
    if dropped:
        log.warning("dropped %d unattainable delta points for %s", dropped, spec)
    return PrivacyProfile(spec, tuple(points), dropped)


def closed_form_profile(
    sigma: float,
    steps: int,
    delta_grid: Optional[Sequence[float]] = None,
    orders: Sequence[float] = DENSE_ORDERS,
) -> PrivacyProfile:
    """Moments-accountant reference: full-batch Gaussian RDP ``T a / (2 s^2)``.

    Depends on (sigma, T) only through T / sigma^2, so scaling sigma by
    sqrt(k) and T by k leaves it unchanged.
    """
    if not sigma > 0:
        raise UsageError(f"noise multiplier must be positive, got {sigma}")
    if steps < 1:
        raise UsageError(f"steps must be >= 1, got {steps}")
    grid = _sorted_grid(default_delta_grid() if delta_grid is None else delta_grid)
    alpha = np.asarray(orders, dtype=float)
    rho = steps / (2.0 * sigma**2)
    log_inv = np.log(1.0 / grid)
    eps = (rho * alpha[None, :] + log_inv[:, None] / (alpha[None, :] - 1.0)).min(axis=1)
    points = tuple((float(d), float(max(e, 0.0))) for d, e in zip(grid, eps))
    return PrivacyProfile(MechanismSpec(1.0, sigma, steps), points)


@dataclass(frozen=True)
class CrossingReport:
    """Pointwise ordering of two profiles on a shared delta grid.

    ``signs[i]`` is the sign of ``eps_a - eps_b`` at ``deltas[i]``;
    ``crossings`` lists the delta intervals across which the sign flips.
    """

    deltas: tuple[float, ...]
    signs: tuple[int, ...]
    crossings: tuple[tuple[float, float], ...]
    order_at_min_delta: int
    order_at_max_delta: int
    max_abs_difference: float = field(default=0.0)

    @property
    def n_crossings(self) -> int:
        return len(self.crossings)


def crossing_report(a: PrivacyProfile, b: PrivacyProfile, atol: float = 1e-12) -> CrossingReport:
    da, db = a.deltas, b.deltas
    if da.shape != db.shape or not np.allclose(da, db, rtol=1e-12, atol=0):
        raise UsageError("profiles must share the same delta grid")
    diff = a.epsilons - b.epsilons
    signs = np.where(np.abs(diff) <= atol, 0, np.sign(diff)).astype(int)
    crossings = []
    prev = None
    for i, s in enumerate(signs):
        if s == 0:
            continue
        if prev is not None and s != signs[prev]:
            crossings.append((float(da[prev]), float(da[i])))
        prev = i
    return CrossingReport(
        deltas=tuple(float(d) for d in da),
        signs=tuple(int(s) for s in signs),
        crossings=tuple(crossings),
        order_at_min_delta=int(signs[0]),
        order_at_max_delta=int(signs[-1]),
        max_abs_difference=float(np.abs(diff).max()),
    )
