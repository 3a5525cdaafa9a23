"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the report lines are
written past pytest's output capture so they always appear.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from conftest import PLANTED, planted_score, random_pool, small_model_configs
from dpvar import cli
from dpvar.accountant import MechanismSpec, PrivacyParams, delta_at_epsilon, gaussian_delta_oracle, mechanism_pld
from dpvar.auditing import AuditOutcome, epsilon_hat, simulate_audit
from dpvar.calibration import CalibrationRequest, calibrate_sigma
from dpvar.configs import FIRST, HEURISTICS, SECOND, Config, Pool, ScoredConfig, heuristic_accuracy, select_algorithm1
from dpvar.dpsgd_sim import (
    ModelParams,
    SimDataset,
    TrainSpec,
    clip_gradient,
    draw_batch,
    logistic_grad,
    logistic_loss,
    privatized_gradient,
    train,
)
from dpvar.profiles import closed_form_profile, compute_profile, crossing_report, default_delta_grid
from dpvar.risk_eval import monte_carlo_sweep, threshold_sweep
from dpvar.stats import ols_log_regression

N1, TARGET1 = 180_000, PrivacyParams(4.0, 1e-6)
# (b, T) -> (PLD sigma, RDP sigma)
SETUP_1 = {
    (4096, 150): (0.800, 0.852),
    (4096, 500): (0.962, 1.01),
    (4096, 2000): (1.43, 1.50),
    (2048, 1000): (0.814, 0.857),
    (4096, 1000): (1.14, 1.20),
    (8192, 1000): (1.91, 2.01),
}
N2, TARGET2 = 50_000, PrivacyParams(8.0, 5e-6)
SETUP_2 = {
    (4096, 250): (1.09, 1.15),
    (4096, 500): (1.36, 1.43),
    (4096, 1000): (1.77, 1.87),
    (1024, 500): (0.672, 0.706),
    (2048, 500): (0.889, 0.933),
}
# (n, T, epsilon) -> sigma, b = 4096, delta = 1e-6
SIGMA_GRID = {
    (180_000, 150, 1.0): 1.51,
    (180_000, 2000, 8.0): 0.96,
    (45_000, 2000, 4.0): 4.94,
}


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


def sigma(n, b, steps, target, accountant):
    return calibrate_sigma(CalibrationRequest(n, b, steps, target, accountant))


def rel_errors(table, n, target, column, accountant):
    return {k: sigma(n, k[0], k[1], target, accountant) / v[column] - 1 for k, v in table.items()}


def worst(errs):
    key = max(errs, key=lambda k: abs(errs[k]))
    return key, errs[key]


def test_criterion_01_setup1_pld(report):
    start = time.perf_counter()
    errs = rel_errors(SETUP_1, N1, TARGET1, 0, "pld")
    elapsed = time.perf_counter() - start
    key, err = worst(errs)
    ok = all(abs(e) <= 0.02 for e in errs.values()) and elapsed < 10
    report(1, ok, f"setup 1 PLD: worst {key} {err:+.2%} (tol 2%), {elapsed:.1f}s (limit 10s)")


def test_criterion_02_setup1_rdp(report):
    start = time.perf_counter()
    errs = rel_errors(SETUP_1, N1, TARGET1, 1, "rdp")
    elapsed = time.perf_counter() - start
    key, err = worst(errs)
    ok = all(abs(e) <= 0.03 for e in errs.values()) and elapsed < 5
    report(2, ok, f"setup 1 RDP: worst {key} {err:+.2%} (tol 3%), {elapsed:.1f}s (limit 5s)")


def test_criterion_03_setup2(report):
    pld = rel_errors(SETUP_2, N2, TARGET2, 0, "pld")
    rdp = rel_errors(SETUP_2, N2, TARGET2, 1, "rdp")
    (kp, ep), (kr, er) = worst(pld), worst(rdp)
    ok = all(abs(e) <= 0.02 for e in pld.values()) and all(abs(e) <= 0.03 for e in rdp.values())
    report(3, ok, f"setup 2: PLD worst {kp} {ep:+.2%} (tol 2%), RDP worst {kr} {er:+.2%} (tol 3%)")


def test_criterion_04_sigma_grid(report):
    errs = {
        key: sigma(key[0], 4096, key[1], PrivacyParams(key[2], 1e-6), "pld") / expected - 1
        for key, expected in SIGMA_GRID.items()
    }
    key, err = worst(errs)
    ok = all(abs(e) <= 0.03 for e in errs.values())
    report(4, ok, f"sigma grid spot checks: worst (n, T, eps)={key} {err:+.2%} (tol 3%)")


def test_criterion_05_profile_properties(report):
    start = time.perf_counter()
    grid = default_delta_grid()
    steps = (150, 500, 2000)
    profs = {}
    at_target = {}
    for T in steps:
        s = sigma(N1, 4096, T, TARGET1, "pld")
        spec = MechanismSpec(4096 / N1, s, T)
        profs[T] = compute_profile(spec, grid)
        at_target[T] = compute_profile(spec, [1e-6]).points[0][1]
    target_ok = all(abs(e - 4.0) <= 1e-2 for e in at_target.values())
    crossings = {(a, b): crossing_report(profs[a], profs[b]).n_crossings for a, b in itertools.combinations(steps, 2)}
    single = all(c == 1 for c in crossings.values())
    trend = all(
        profs[b].epsilon_at(1e-9) < profs[a].epsilon_at(1e-9) and profs[b].epsilon_at(1e-3) > profs[a].epsilon_at(1e-3)
        for a, b in itertools.combinations(steps, 2)
    )
    elapsed = time.perf_counter() - start
    ok = target_ok and single and trend and elapsed < 30
    worst_gap = max(abs(e - 4.0) for e in at_target.values())
    report(
        5,
        ok,
        f"profiles: max |eps(1e-6) - 4| = {worst_gap:.4f} (tol 1e-2), crossings {sorted(crossings.values())} "
        f"(want all 1), trend {'holds' if trend else 'violated'}, {elapsed:.1f}s (limit 30s)",
    )


def test_criterion_06_closed_form_invariance(report):
    base = closed_form_profile(0.8, 150)
    diffs = {
        k: float(np.max(np.abs(closed_form_profile(0.8 * math.sqrt(k), 150 * k).epsilons - base.epsilons)))
        for k in (2, 4, 16)
    }
    ok = all(d <= 1e-9 for d in diffs.values())
    report(6, ok, f"closed-form invariance: max diff {max(diffs.values()):.2e} (tol 1e-9) for k in 2, 4, 16")


def test_criterion_07_oracle_equivalence(report):
    pld = mechanism_pld(MechanismSpec(1.0, 1.0, 1))
    errs = [abs(delta_at_epsilon(pld, e) - gaussian_delta_oracle(1.0, e)) for e in (0.0, 0.5, 1.0, 2.0, 4.0)]
    report(7, max(errs) <= 1e-4, f"Gaussian oracle: max |delta err| {max(errs):.2e} (tol 1e-4)")


FIXTURE_1 = [
    ScoredConfig(Config(1024, 100, 2e-3), 2.0, 1.0),
    ScoredConfig(Config(2048, 50, 2e-3), 2.1, 1.0),
    ScoredConfig(Config(1024, 200, 1e-3), 2.3, 1.0),
    ScoredConfig(Config(512, 100, 4e-3), 1.9, 1.0),
    ScoredConfig(Config(4096, 100, 1e-3), 2.5, 1.0),
]
FIXTURE_2 = [
    ScoredConfig(Config(1024, 100, 1e-3), 2.0, 1.0),
    ScoredConfig(Config(2048, 50, 1e-3), 2.2, 1.0),
    ScoredConfig(Config(512, 200, 1e-3), 2.4, 1.0),
    ScoredConfig(Config(1024, 400, 1e-3), 1.8, 1.0),
    ScoredConfig(Config(2048, 400, 1e-3), 1.7, 1.0),
]
# Positive planted coefficient sets under which every heuristic is exact on
# the small-model grid.  Not every positive set qualifies: at equal updates a
# smaller eta can pair with a smaller b and larger T, so under the regression
# coefficients (0.13, 0.37, 0.51) the updates heuristic gets 13 of 15 pairs.
HEURISTIC_COEFS = [(0.1, 0.2, 0.9), (0.13, 0.2, 0.51), (0.3, 0.37, 0.51)]


def test_criterion_08_heuristics(report):
    accuracies = []
    for coefs in HEURISTIC_COEFS:
        pool = Pool(ScoredConfig(c, 1.0, planted_score(c, coefs)) for c in small_model_configs())
        accuracies += [heuristic_accuracy(pool, name).accuracy for name in HEURISTICS]
    rng = np.random.default_rng(8)
    flip = {FIRST: SECOND, SECOND: FIRST, None: None}
    bs, ts, etas = [256, 512, 1024, 2048, 4096], [50, 100, 200, 400], [1e-3, 2e-3, 3e-3, 4e-3, 6e-3]
    sound = True
    for _ in range(10_000):
        a = Config(int(rng.choice(bs)), int(rng.choice(ts)), float(rng.choice(etas)))
        b = Config(int(rng.choice(bs)), int(rng.choice(ts)), float(rng.choice(etas)))
        for compare in HEURISTICS.values():
            sound &= compare(a, a) is None and compare(b, a) == flip[compare(a, b)]
    picks = (select_algorithm1(Pool(FIXTURE_1)) is FIXTURE_1[4], select_algorithm1(Pool(FIXTURE_2)) is FIXTURE_2[1])
    ok = min(accuracies) == 1.0 and sound and all(picks)
    report(
        8,
        ok,
        f"heuristics: min accuracy {min(accuracies):.3f} over {len(HEURISTIC_COEFS)} planted sets (want 1.0), "
        f"antisymmetry/irreflexivity over 10000 pairs {'hold' if sound else 'fail'}, fixtures {picks}",
    )


def test_criterion_09_risk_harness(report):
    rng = np.random.default_rng(9)
    oracle_max = 0.0
    min_risk = math.inf
    for _ in range(1000):
        pool = random_pool(rng, int(rng.integers(1, 20)))
        oracle_max = max(oracle_max, threshold_sweep(pool, "oracle").mean_risk)
        for method in ("ours", "best_utility", "worst_utility"):
            min_risk = min(min_risk, min(r.risk for r in threshold_sweep(pool, method).per_threshold))
    pool = Pool(ScoredConfig(c, float(u), float(s)) for c, u, s in zip(small_model_configs(), rng.uniform(2, 3, 23), rng.uniform(0.5, 1, 23)))
    mc = monte_carlo_sweep(pool, "ours", trials=5000, seed=1)
    exact = mc.mean_risk == threshold_sweep(pool, "ours").mean_risk and mc.resample_stats[1] == 0.0
    ok = oracle_max == 0.0 and exact and min_risk >= 0.0
    report(
        9,
        ok,
        f"risk: oracle max mean risk {oracle_max} (want 0) over 1000 pools, min relative risk {min_risk:.3g} (want >= 0), "
        f"zero-std 5000-trial MC equals sweep: {exact}",
    )


def test_criterion_10_regression_recovery(report):
    # Each replication gives 3 t-statistics with 19 dof; P(|t| > 3) = 0.0074, so
    # across 60 of them one exceedance is unremarkable (about a 36% chance).
    # The pass rule therefore checks the replication average against its own
    # standard error, and that the exceedance count matches the nominal rate.
    from scipy import stats

    configs = small_model_configs()
    coefs = np.array(PLANTED)
    estimates, errors = [], []
    for rep in range(20):
        rng = np.random.default_rng(1000 + rep)
        res = ols_log_regression([(c, planted_score(c) + rng.normal(0, 0.05)) for c in configs])
        estimates.append(res.coefficients)
        errors.append(res.standard_errors)
    estimates, errors = np.array(estimates), np.array(errors)
    z = (estimates - coefs) / errors
    z_mean = (estimates.mean(axis=0) - coefs) / (errors.mean(axis=0) / math.sqrt(len(estimates)))
    exceed = int((np.abs(z) > 3).sum())
    allowed = int(stats.binom.ppf(0.999, z.size, 2 * stats.t.sf(3, len(configs) - 4)))
    all_positive = bool(np.all(estimates > 0))
    ok = bool(np.all(np.abs(z_mean) <= 3)) and exceed <= allowed and all_positive
    report(
        10,
        ok,
        f"regression: averaged estimate max |z| {np.abs(z_mean).max():.2f} (tol 3); per-replication |z| > 3 in "
        f"{exceed}/{z.size} (allowed {allowed}, max |z| {np.abs(z).max():.2f}); all positive: {all_positive}",
    )


def test_criterion_11_auditing(report):
    coverage = {}
    for eps in (0.5, 1.0, 2.0):
        rng = np.random.default_rng(int(eps * 1000))
        hats = np.array([simulate_audit(eps, 100, 0.05, rng) for _ in range(10_000)])
        coverage[eps] = float(np.mean(hats <= eps))
    floor = 0.95 - 3 * math.sqrt(0.95 * 0.05 / 10_000)
    closed = epsilon_hat(AuditOutcome(10, 10, 10))
    ok = min(coverage.values()) >= floor and abs(closed - 1.0517) <= 1e-3
    cov = ", ".join(f"{e}: {c:.4f}" for e, c in coverage.items())
    report(11, ok, f"auditing: coverage {cov} (floor {floor:.4f}); eps_hat(10, 10) = {closed:.4f} (1.0517 +- 1e-3)")


def test_criterion_12_simulator(report, tmp_path, capsys):
    rng = np.random.default_rng(12)
    # finite differences
    fd_err = 0.0
    for _ in range(20):
        params = ModelParams(rng.normal(size=6))
        x, y = rng.normal(size=5), float(rng.integers(0, 2))
        g = logistic_grad(params, x, y)
        for i in range(6):
            e = np.zeros(6)
            e[i] = 1e-6
            fd = (logistic_loss(ModelParams(params.weights + e), x, y) - logistic_loss(ModelParams(params.weights - e), x, y)) / 2e-6
            fd_err = max(fd_err, abs(fd - g[i]) / max(1.0, abs(g[i])))
    # clipping
    grads = rng.normal(scale=5.0, size=(1000, 6))
    clip_ok = bool(np.all(np.linalg.norm(clip_gradient(grads, 0.5), axis=1) <= 0.5 * (1 + 1e-12)))
    privatized_gradient(grads, 0.5, 1.0, rng)  # asserts clipped norms internally
    # sigma = 0, no clipping, full batch: plain gradient descent
    data = SimDataset(rng.normal(size=(80, 3)), (rng.random(80) < 0.5).astype(float))
    cfg = Config(80, 40, 0.2)
    got = train(TrainSpec(cfg, 0.0, sampler="shuffle", clip=False), data).params.weights
    w = np.zeros(4)
    for _ in range(cfg.steps):
        w = w - cfg.eta * logistic_grad(ModelParams(w), data.features, data.labels).mean(axis=0)
    ablation = float(np.max(np.abs(got - w)))
    # Poisson batch sizes vs Binomial(n, q)
    from scipy import stats

    n, b, draws = 1000, 50, 5000
    sizes = np.array([draw_batch(n, b, rng).size for _ in range(draws)])
    edges = np.array([0, 40, 44, 47, 50, 53, 56, 60, n + 1])
    probs = np.diff(stats.binom.cdf(edges - 1, n, b / n))
    pvalue = stats.chisquare(np.histogram(sizes, bins=edges)[0], probs / probs.sum() * draws).pvalue
    # end-to-end: calibrate -> train grid -> emit pool -> select
    out = tmp_path / "pool.jsonl"
    start = time.perf_counter()
    rc = cli.run(["sim", "--out", str(out), "--select"])
    elapsed = time.perf_counter() - start
    selected = json.loads(capsys.readouterr().out).get("selected") if rc == 0 else None
    ok = fd_err <= 1e-6 and clip_ok and ablation <= 1e-10 and pvalue > 0.01 and rc == 0 and selected and elapsed < 120
    report(
        12,
        ok,
        f"simulator: fd rel err {fd_err:.1e} (tol 1e-6), clipped norms ok: {clip_ok}, ablation {ablation:.1e} (tol 1e-10), "
        f"chi-square p {pvalue:.3f} (> 0.01), end-to-end rc {rc} in {elapsed:.1f}s (limit 120s)",
    )
