"""Hyperparameter configurations and the pairwise empirical-privacy heuristics.

A configuration ``(b, T, eta)`` is predicted to have better (lower)
empirical-privacy risk than another when:

individual
    ``T1 <= T2``, ``b1 <= b2`` and ``eta1 <= eta2`` with at least one strict.
compute
    equal compute ``C = b * T``, equal ``eta`` and ``b1 > b2``.
updates
    equal updates ``U = C * eta`` and ``eta1 < eta2``.

Equalities on the composite quantities are tested on log values with a
relative tolerance, since ``U`` is a product of floats.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from dpvar.errors import UsageError

DEFAULT_RTOL = 1e-9

FIRST = "a"
SECOND = "b"


@dataclass(frozen=True)
class Config:
    b: int
    steps: int
    eta: float
    clip: float = 1.0

    def __post_init__(self):
        for name in ("b", "steps", "eta", "clip"):
            value = getattr(self, name)
            if not value > 0 or not math.isfinite(value):
                raise UsageError(f"{name} must be positive, got {value}")

    @property
    def compute(self) -> float:
        return float(self.b) * float(self.steps)

    @property
    def updates(self) -> float:
        return self.compute * self.eta

    @property
    def key(self) -> tuple[int, int, float, float]:
        return (self.b, self.steps, self.eta, self.clip)


@dataclass(frozen=True)
class ScoredConfig:
    config: Config
    utility_mean: float
    score_mean: float
    utility_std: float = 0.0
    score_std: float = 0.0
    seeds: int = 1

    def __post_init__(self):
        if self.seeds < 1:
            raise UsageError("seeds must be >= 1")
        if self.utility_std < 0 or self.score_std < 0:
            raise UsageError("standard deviations must be non-negative")
        if self.seeds == 1 and self.score_std != 0:
            raise UsageError("score_std must be 0 for a single seed")


@dataclass(frozen=True)
class Pool:
    entries: tuple[ScoredConfig, ...]

    def __init__(self, entries: Iterable[ScoredConfig]):
        entries = tuple(entries)
        seen = set()
        for e in entries:
            if e.config.key in seen:
                raise UsageError(f"duplicate configuration {e.config.key}")
            seen.add(e.config.key)
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _same(x: float, y: float, rtol: float) -> bool:
    return abs(math.log(x) - math.log(y)) <= rtol


def compare_individual(a: Config, b: Config, rtol: float = DEFAULT_RTOL) -> Optional[str]:
    del rtol  # individual hyperparameters are compared exactly
    a_vals = (a.steps, a.b, a.eta)
    b_vals = (b.steps, b.b, b.eta)
    if a_vals == b_vals:
        return None
    if all(x <= y for x, y in zip(a_vals, b_vals)):
        return FIRST
    if all(y <= x for x, y in zip(a_vals, b_vals)):
        return SECOND
    return None


def compare_compute(a: Config, b: Config, rtol: float = DEFAULT_RTOL) -> Optional[str]:
    if not (_same(a.compute, b.compute, rtol) and _same(a.eta, b.eta, rtol)):
        return None
    if a.b > b.b:
        return FIRST
    if b.b > a.b:
        return SECOND
    return None


def compare_updates(a: Config, b: Config, rtol: float = DEFAULT_RTOL) -> Optional[str]:
    if not _same(a.updates, b.updates, rtol) or _same(a.eta, b.eta, rtol):
        return None
    return FIRST if a.eta < b.eta else SECOND


HEURISTICS: dict[str, Callable[..., Optional[str]]] = {
    "individual": compare_individual,
    "compute": compare_compute,
    "updates": compare_updates,
}


@dataclass(frozen=True)
class AccuracyRecord:
    heuristic: str
    applicable: int
    correct: int

    @property
    def accuracy(self) -> Optional[float]:
        return self.correct / self.applicable if self.applicable else None


def heuristic_accuracy(pool: Pool, heuristic: str, rtol: float = DEFAULT_RTOL) -> AccuracyRecord:
    """Fraction of applicable pairs where the predicted side has the strictly lower score."""
    if heuristic not in HEURISTICS:
        raise UsageError(f"unknown heuristic {heuristic!r}; choose from {sorted(HEURISTICS)}")
    if len(pool) < 2:
        raise UsageError("need at least two configurations")
    compare = HEURISTICS[heuristic]
    applicable = correct = 0
    for x, y in itertools.combinations(pool.entries, 2):
        side = compare(x.config, y.config, rtol)
        if side is None:
            continue
        applicable += 1
        better, worse = (x, y) if side == FIRST else (y, x)
        # Ties in score count against the heuristic.
        if better.score_mean < worse.score_mean:
            correct += 1
    return AccuracyRecord(heuristic, applicable, correct)


def _tie_key(e: ScoredConfig):
    return (e.config.eta, e.config.steps, e.config.b)


class Relations:
    """Pairwise sequential-selection relations among a fixed list of configurations.

    ``beats1[j, i]``: same updates, ``eta_j`` strictly smaller (step 1 drops i).
    ``beats2[j, i]``: same updates and compute, ``b_j`` larger (step 2 drops i).
    ``dominates[j, i]``: j is preferred to i under the individual heuristic.

    Equality of the composite quantities is pairwise within ``rtol`` on logs.
    Built once, the relations let many subpools (masks) be screened cheaply.
    """

    def __init__(self, configs: Sequence[Config], rtol: float = DEFAULT_RTOL):
        b = np.array([c.b for c in configs], dtype=float)
        steps = np.array([c.steps for c in configs], dtype=float)
        eta = np.array([c.eta for c in configs], dtype=float)
        log_u = np.log(np.array([c.updates for c in configs], dtype=float))
        log_c = np.log(np.array([c.compute for c in configs], dtype=float))
        log_eta = np.log(eta)

        def close(v):
            return np.abs(v[:, None] - v[None, :]) <= rtol

        same_u = close(log_u)
        self.beats1 = same_u & (log_eta[:, None] < log_eta[None, :] - rtol)
        self.beats2 = same_u & close(log_c) & (b[:, None] > b[None, :])
        self.dominates = (
            (steps[:, None] <= steps[None, :])
            & (b[:, None] <= b[None, :])
            & (eta[:, None] <= eta[None, :])
        )
        np.fill_diagonal(self.dominates, False)
        order = sorted(range(len(configs)), key=lambda i: (eta[i], steps[i], b[i]))
        self.tie_rank = np.empty(len(configs), dtype=int)
        self.tie_rank[order] = np.arange(len(configs))

    @staticmethod
    def _screen(mask: np.ndarray, beats: np.ndarray) -> np.ndarray:
        return mask & ~(beats & mask[:, None]).any(axis=0)

    def survivors(self, mask: np.ndarray) -> np.ndarray:
        """Steps 1 to 3 of the selection applied to the subpool ``mask``."""
        kept = self._screen(mask, self.beats1)
        kept = self._screen(kept, self.beats2)
        return self._screen(kept, self.dominates)

    def pick(self, mask: np.ndarray, values: np.ndarray, largest: bool = False) -> int:
        """Index of the extreme ``values`` entry in ``mask``; ties by (eta, T, b)."""
        idx = np.flatnonzero(mask)
        v = values[idx]
        best = v.max() if largest else v.min()
        tied = idx[v == best]
        return int(tied[np.argmin(self.tie_rank[tied])])

    def select(self, mask: np.ndarray, utilities: np.ndarray) -> int:
        return self.pick(self.survivors(mask), utilities, largest=True)


def select_algorithm1(pool: Pool, rtol: float = DEFAULT_RTOL) -> ScoredConfig:
    """Sequential selection: updates, then compute, then individual, then worst utility.

    1. Among configurations with equal updates keep the smallest learning rate.
    2. Among survivors with equal updates and compute keep the largest batch.
    3. Drop survivors dominated under the individual heuristic.
    4. Return the survivor with the worst utility (largest test loss).
    """
    if len(pool) == 0:
        raise UsageError("cannot select from an empty pool")
    entries = pool.entries
    rel = Relations([e.config for e in entries], rtol)
    utilities = np.array([e.utility_mean for e in entries])
    return entries[rel.select(np.ones(len(entries), dtype=bool), utilities)]
