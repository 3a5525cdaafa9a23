"""Pool files: one JSON object per line, one line per (configuration, seed).

Each line has exactly the fields ``b, T, eta, c, seed, utility, scores``;
``scores`` lists per-secret empirical privacy values.  Ingesting aggregates
the scores of each line (mean or max over secrets), then summarizes every
configuration by the mean and standard deviation over its seeds.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dpvar.configs import Config, Pool, ScoredConfig
from dpvar.dpsgd_sim import SCORE_AGGREGATES, GridRun, aggregate_scores
from dpvar.errors import ParseError, UsageError, ValidationError

FIELDS = ("b", "T", "eta", "c", "seed", "utility", "scores")


@dataclass(frozen=True)
class PoolRecord:
    b: int
    T: int
    eta: float
    c: float
    seed: int
    utility: float
    scores: tuple[float, ...]

    def __post_init__(self):
        if not self.scores:
            raise ValidationError("scores must be non-empty")
        if not math.isfinite(self.utility) or not all(math.isfinite(s) for s in self.scores):
            raise ValidationError("utility and scores must be finite")

    @property
    def config(self) -> Config:
        return Config(self.b, self.T, self.eta, self.c)

    def to_json(self) -> str:
        d = asdict(self)
        d["scores"] = list(self.scores)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_run(cls, run: GridRun) -> "PoolRecord":
        c = run.config
        return cls(c.b, c.steps, c.eta, c.clip, run.seed, run.utility, run.scores)


def _as_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
        raise ValueError(f"{name} must be an integer")
    return int(value)


def _as_float(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"{name} must be a number")
    return float(value)


def parse_record(line: str) -> PoolRecord:
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("expected a JSON object")
    if set(obj) != set(FIELDS):
        raise ValueError(f"fields must be exactly {sorted(FIELDS)}, got {sorted(obj)}")
    scores = obj["scores"]
    if not isinstance(scores, list):
        raise ValueError("scores must be a list")
    return PoolRecord(
        b=_as_int(obj["b"], "b"),
        T=_as_int(obj["T"], "T"),
        eta=_as_float(obj["eta"], "eta"),
        c=_as_float(obj["c"], "c"),
        seed=_as_int(obj["seed"], "seed"),
        utility=_as_float(obj["utility"], "utility"),
        scores=tuple(_as_float(s, "score") for s in scores),
    )


def read_records(path) -> list[PoolRecord]:
    """Parse a pool file, rejecting malformed lines and repeated (config, seed) pairs."""
    records = []
    seen = set()
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = parse_record(line)
                rec.config  # validates the hyperparameters
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            except (ValueError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            key = (rec.config.key, rec.seed)
            if key in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate configuration and seed {key}")
            seen.add(key)
            records.append(rec)
    if not records:
        raise ValidationError(f"{path}: no records")
    return records


def _spread(values: Sequence[float], population: bool) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=0 if population else 1))


def aggregate_records(
    records: Iterable[PoolRecord], score_agg: str = "mean", population_std: bool = False
) -> Pool:
    if score_agg not in SCORE_AGGREGATES:
        raise UsageError(f"score aggregate must be one of {SCORE_AGGREGATES}")
    groups: dict[tuple, list[PoolRecord]] = {}
    for rec in records:
        groups.setdefault(rec.config.key, []).append(rec)
    entries = []
    for recs in groups.values():
        recs.sort(key=lambda r: r.seed)
        utilities = [r.utility for r in recs]
        scores = [aggregate_scores(r.scores, score_agg) for r in recs]
        entries.append(
            ScoredConfig(
                recs[0].config,
                utility_mean=float(np.mean(utilities)),
                score_mean=float(np.mean(scores)),
                utility_std=_spread(utilities, population_std),
                score_std=_spread(scores, population_std),
                seeds=len(recs),
            )
        )
    return Pool(entries)


def ingest_pool(path, score_agg: str = "mean", population_std: bool = False) -> Pool:
    return aggregate_records(read_records(path), score_agg, population_std)


def _pattern(k: int, population: bool) -> np.ndarray:
    # Zero-mean offsets whose standard deviation (same ddof as ingest) is 1.
    z = np.arange(k) - (k - 1) / 2.0
    return z / np.std(z, ddof=0 if population else 1)


def synthesize_records(pool: Pool, population_std: bool = False) -> list[PoolRecord]:
    """Per-seed records whose aggregates reproduce the pool's statistics.

    A pool keeps only means and spreads, so the seed-level values are
    reconstructed as ``mean + std * z`` with a fixed standardized pattern.
    """
    out = []
    for e in pool.entries:
        c = e.config
        if e.seeds == 1:
            out.append(PoolRecord(c.b, c.steps, c.eta, c.clip, 0, e.utility_mean, (e.score_mean,)))
            continue
        z = _pattern(e.seeds, population_std)
        for seed in range(e.seeds):
            out.append(
                PoolRecord(
                    c.b,
                    c.steps,
                    c.eta,
                    c.clip,
                    seed,
                    float(e.utility_mean + e.utility_std * z[seed]),
                    (float(e.score_mean + e.score_std * z[seed]),),
                )
            )
    return out


def write_records(records: Iterable[PoolRecord], path) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def export_pool(pool: Pool, path, population_std: bool = False) -> None:
    write_records(synthesize_records(pool, population_std), path)
