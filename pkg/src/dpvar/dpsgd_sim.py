"""Small-scale DP-SGD and DP-Adam on binary logistic regression.

Every step clips per-sample gradients to norm ``c``, adds Gaussian noise of
scale ``sigma * c`` to their sum and divides by the batch size, then takes an
SGD or Adam step.  Planted canaries give a surrogate empirical-privacy score
(how much lower their loss is than that of unseen reference points), so the
simulator can emit complete pools for the selection and risk modules.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.special import expit

from dpvar.configs import Config
from dpvar.errors import DivergenceError, UsageError

log = logging.getLogger(__name__)

SAMPLERS = ("poisson", "shuffle")
OPTIMIZERS = ("sgd", "adam")
SCORE_AGGREGATES = ("mean", "max")


@dataclass(frozen=True)
class SimDataset:
    features: np.ndarray
    labels: np.ndarray
    canary_flags: np.ndarray = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.features, dtype=float))
        y = np.asarray(self.labels, dtype=float)
        if x.shape[0] != y.shape[0]:
            raise UsageError("features and labels differ in length")
        if not np.all((y == 0) | (y == 1)):
            raise UsageError("labels must be 0 or 1")
        flags = np.zeros(y.shape[0], dtype=bool) if self.canary_flags is None else np.asarray(self.canary_flags, bool)
        if flags.shape != y.shape:
            raise UsageError("canary_flags must match labels")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "canary_flags", flags)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "SimDataset":
        return SimDataset(self.features[idx], self.labels[idx], self.canary_flags[idx])


@dataclass(frozen=True)
class ModelParams:
    """Weights followed by the bias term."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or not np.all(np.isfinite(w)):
            raise UsageError("weights must be a finite 1-d vector")
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls, dim: int) -> "ModelParams":
        return cls(np.zeros(dim + 1))


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    gamma: float = 1e-8
    t: int = 0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise UsageError("Adam decay rates must lie in [0, 1)")
        if not self.gamma > 0:
            raise UsageError("gamma must be positive")
        if np.any(np.asarray(self.v) < 0):
            raise UsageError("second moments must be non-negative")

    @classmethod
    def zeros(cls, size: int, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), **kw)


@dataclass(frozen=True)
class TrainSpec:
    """One DP training run.  ``clip=False`` disables clipping (the c = inf sentinel)."""

    config: Config
    sigma: float
    sampler: str = "poisson"
    optimizer: str = "sgd"
    seed: int = 0
    clip: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    gamma: float = 1e-8

    def __post_init__(self):
        if not self.sigma >= 0:
            raise UsageError(f"sigma must be >= 0, got {self.sigma}")
        if self.sampler not in SAMPLERS:
            raise UsageError(f"sampler must be one of {SAMPLERS}")
        if self.optimizer not in OPTIMIZERS:
            raise UsageError(f"optimizer must be one of {OPTIMIZERS}")
        if not self.clip and self.sigma > 0:
            raise UsageError("noise scale sigma * c is undefined without clipping")


@dataclass(frozen=True)
class TrainResult:
    params: ModelParams
    trace: tuple[tuple[int, float, int], ...]
    skipped_steps: int = 0

    def trace_csv(self) -> str:
        lines = ["step,loss,batch_size"]
        lines += [f"{s},{loss!r},{size}" for s, loss, size in self.trace]
        return "\n".join(lines) + "\n"


def _augment(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def logistic_loss(params: ModelParams, x, y):
    """Per-example cross-entropy ``log(1 + e^z) - y z`` with ``z = w . [x, 1]``."""
    z = _augment(x) @ params.weights
    return np.logaddexp(0.0, z) - np.asarray(y, dtype=float) * z


def logistic_grad(params: ModelParams, x, y) -> np.ndarray:
    """Gradient of ``logistic_loss``; rows are per-example when ``x`` is 2-d."""
    xa = _augment(x)
    if xa.shape[-1] != params.weights.shape[0]:
        raise UsageError("feature and parameter dimensions disagree")
    residual = expit(xa @ params.weights) - np.asarray(y, dtype=float)
    return residual[..., None] * xa


def clip_gradient(g, c: Optional[float]) -> np.ndarray:
    """Scale ``g`` (or each row of it) to norm at most ``c``; ``None`` means no clipping."""
    g = np.asarray(g, dtype=float)
    if c is None:
        return g
    if not c > 0:
        raise UsageError(f"clipping norm must be positive, got {c}")
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(1.0, norms / c)


def privatized_gradient(grads, c: Optional[float], sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Noisy mean ``(sum_i clip(g_i, c) + N(0, sigma^2 c^2 I)) / |S|``."""
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    size = grads.shape[0]
    if size == 0:
        raise UsageError("empty batch")
    clipped = clip_gradient(grads, c)
    if c is not None:
        assert np.all(np.linalg.norm(clipped, axis=1) <= c * (1 + 1e-12))
    total = clipped.sum(axis=0)
    if sigma > 0:
        if c is None:
            raise UsageError("noise needs a finite clipping norm")
        total = total + rng.normal(0.0, sigma * c, size=total.shape)
    return total / size


def adam_update(state: AdamState, params: ModelParams, g, eta: float) -> tuple[ModelParams, AdamState]:
    """One AdamUpdate with the stabilizer inside the root: ``m_hat / sqrt(v_hat + gamma)``."""
    g = np.asarray(g, dtype=float)
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    w = params.weights - eta * m_hat / np.sqrt(v_hat + state.gamma)
    return ModelParams(w), replace(state, m=m, v=v, t=t)


def draw_batch(n: int, b: int, rng: np.random.Generator) -> np.ndarray:
    """Poisson subsample: each index kept independently with probability b / n."""
    if not 0 <= b <= n:
        raise UsageError(f"need 0 <= b <= n, got b={b}, n={n}")
    return np.flatnonzero(rng.random(n) < b / n)


def batch_stream(n: int, b: int, steps: int, sampler: str, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Index sets for ``steps`` iterations.

    The shuffle sampler walks a fresh permutation each epoch in blocks of
    ``b`` and drops the final ``n mod b`` indices of every epoch.
    """
    if sampler == "poisson":
        for _ in range(steps):
            yield draw_batch(n, b, rng)
        return
    if sampler != "shuffle":
        raise UsageError(f"sampler must be one of {SAMPLERS}")
    if not 1 <= b <= n:
        raise UsageError(f"need 1 <= b <= n, got b={b}, n={n}")
    per_epoch = n // b
    perm = None
    for t in range(steps):
        j = t % per_epoch
        if j == 0:
            perm = rng.permutation(n)
        yield np.sort(perm[j * b:(j + 1) * b])


def mean_loss(params: ModelParams, data: SimDataset) -> float:
    return float(np.mean(logistic_loss(params, data.features, data.labels)))


def train(spec: TrainSpec, data: SimDataset, init: Optional[ModelParams] = None) -> TrainResult:
    """Run ``spec.config.steps`` private steps and return the final parameters.

    The trace holds ``(step, full training loss after the step, batch size)``.
    Empty Poisson batches leave the parameters unchanged and are counted.
    """
    cfg = spec.config
    if cfg.b > len(data):
        raise UsageError(f"batch size {cfg.b} exceeds dataset size {len(data)}")
    sampler_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    params = init if init is not None else ModelParams.zeros(data.dim)
    state = AdamState.zeros(params.weights.size, beta1=spec.beta1, beta2=spec.beta2, gamma=spec.gamma)
    c = cfg.clip if spec.clip else None
    trace = []
    skipped = 0
    for step, idx in enumerate(batch_stream(len(data), cfg.b, cfg.steps, spec.sampler, sampler_rng), start=1):
        if idx.size == 0:
            skipped += 1
        else:
            grads = logistic_grad(params, data.features[idx], data.labels[idx])
            g = privatized_gradient(grads, c, spec.sigma, noise_rng)
            try:
                if spec.optimizer == "sgd":
                    params = ModelParams(params.weights - cfg.eta * g)
                else:
                    params, state = adam_update(state, params, g, cfg.eta)
            except UsageError:
                # ModelParams rejects non-finite weights.
                raise DivergenceError(f"non-finite parameters at step {step}") from None
        loss = mean_loss(params, data)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite training loss at step {step}")
        trace.append((step, loss, int(idx.size)))
    if skipped:
        log.info("skipped %d empty batches", skipped)
    return TrainResult(params, tuple(trace), skipped)


def param_distance(a: ModelParams, b: ModelParams) -> float:
    if a.weights.shape != b.weights.shape:
        raise UsageError("parameter vectors differ in dimension")
    return float(np.linalg.norm(a.weights - b.weights))


def functional_distance(a: ModelParams, b: ModelParams, heldout: SimDataset) -> float:
    """Mean over held-out points of ``||(p_a, 1 - p_a) - (p_b, 1 - p_b)||_2``."""
    if len(heldout) == 0:
        raise UsageError("held-out set is empty")
    xa = _augment(heldout.features)
    pa, pb = expit(xa @ a.weights), expit(xa @ b.weights)
    return float(math.sqrt(2.0) * np.mean(np.abs(pa - pb)))


def mean_pairwise_distance(models: Sequence[ModelParams], heldout: Optional[SimDataset] = None) -> float:
    """Average distance over all unordered model pairs (functional if ``heldout`` given)."""
    if len(models) < 2:
        raise UsageError("need at least two models")
    total, count = 0.0, 0
    for i in range(len(models)):
        for j in range(i + 1, len(models)):
            d = param_distance(models[i], models[j]) if heldout is None else functional_distance(models[i], models[j], heldout)
            total += d
            count += 1
    return total / count


def canary_exposure(model: ModelParams, canaries: SimDataset, references: SimDataset) -> np.ndarray:
    """Per-canary score: mean reference loss minus the canary's loss."""
    if len(canaries) != len(references) or len(canaries) == 0:
        raise UsageError("canary and reference sets must be non-empty and equal-sized")
    ref = float(np.mean(logistic_loss(model, references.features, references.labels)))
    return ref - logistic_loss(model, canaries.features, canaries.labels)


def aggregate_scores(scores: Sequence[float], how: str = "mean") -> float:
    values = np.asarray(scores, dtype=float)
    if values.size == 0:
        raise UsageError("no scores to aggregate")
    if how == "mean":
        return float(values.mean())
    if how == "max":
        return float(values.max())
    raise UsageError(f"score aggregate must be one of {SCORE_AGGREGATES}")


@dataclass(frozen=True)
class SyntheticTask:
    """Training set with planted canaries plus held-out and reference points."""

    train: SimDataset
    heldout: SimDataset
    canaries: SimDataset
    references: SimDataset


def make_task(
    n: int = 2000,
    dim: int = 5,
    n_canaries: int = 20,
    n_heldout: int = 1000,
    seed: int = 0,
) -> SyntheticTask:
    """Gaussian features with labels from a planted logistic model.

    Canaries and references are drawn alike around one distant center with
    coin-flip labels, so nothing but training on the canaries themselves
    lowers their loss.
    """
    if n_canaries >= n:
        raise UsageError("too many canaries for the dataset size")
    rng = np.random.default_rng(seed)
    w_true = rng.normal(size=dim)
    w_true *= 2.0 / np.linalg.norm(w_true)

    def sample(count):
        x = rng.normal(size=(count, dim))
        y = (rng.random(count) < expit(x @ w_true)).astype(float)
        return x, y

    center = 3.0 * rng.normal(size=dim)

    def outliers(count):
        x = rng.normal(size=(count, dim)) + center
        y = (rng.random(count) < 0.5).astype(float)
        return x, y

    x, y = sample(n - n_canaries)
    cx, cy = outliers(n_canaries)
    rx, ry = outliers(n_canaries)
    hx, hy = sample(n_heldout)
    flags = np.r_[np.zeros(n - n_canaries, bool), np.ones(n_canaries, bool)]
    return SyntheticTask(
        train=SimDataset(np.vstack([x, cx]), np.r_[y, cy], flags),
        heldout=SimDataset(hx, hy),
        canaries=SimDataset(cx, cy, np.ones(n_canaries, bool)),
        references=SimDataset(rx, ry),
    )


@dataclass(frozen=True)
class GridRun:
    config: Config
    sigma: float
    seed: int
    utility: float
    scores: tuple[float, ...] = field(default=())


def _run_one(args) -> GridRun:
    cfg, sigma, seed, task, sampler, optimizer = args
    result = train(TrainSpec(cfg, sigma, sampler=sampler, optimizer=optimizer, seed=seed), task.train)
    utility = mean_loss(result.params, task.heldout)
    scores = canary_exposure(result.params, task.canaries, task.references)
    return GridRun(cfg, sigma, seed, utility, tuple(float(s) for s in scores))


def run_grid(
    configs: Sequence[Config],
    sigmas: Sequence[float],
    task: SyntheticTask,
    seeds: Sequence[int] = (0,),
    sampler: str = "poisson",
    optimizer: str = "sgd",
    workers: int = 1,
) -> list[GridRun]:
    """Train every (config, seed) and record held-out loss and canary scores.

    Runs are independent and fully seeded, so ``workers > 1`` spreads them
    over processes without changing the output or its order.
    """
    if len(configs) != len(sigmas):
        raise UsageError("need one sigma per configuration")
    jobs = [(cfg, sigma, seed, task, sampler, optimizer) for cfg, sigma in zip(configs, sigmas) for seed in seeds]
    if workers <= 1 or len(jobs) == 1:
        return [_run_one(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))
