"""Command-line interface: ``dpvar <subcommand> [options]``.

Reports go to stdout as JSON with sorted keys (``--format csv`` for tabular
output).  Exit status is 0 on success, 1 on usage errors and 2 when a
computation fails.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from typing import Optional, Sequence

from dpvar import auditing, configs, dpsgd_sim, pools, profiles, risk_eval, stats
from dpvar.accountant import DEFAULT_GRID_STEP, MechanismSpec, PrivacyParams
from dpvar.calibration import CalibrationRequest, calibrate_sigma, default_delta
from dpvar.errors import DpvarError, UsageError

log = logging.getLogger("dpvar")

DEFAULT_SIM_GRID = "50,200,0.5;100,200,0.5;200,200,0.5;100,100,0.5;100,400,0.5;100,200,0.25;100,200,1.0;200,100,1.0"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _threads() -> int:
    raw = os.environ.get("DPVAR_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"DPVAR_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"DPVAR_THREADS must be a positive integer, got {raw!r}")
    return value


def _emit(obj, fmt: str, rows: Optional[list[dict]] = None, out=None) -> None:
    out = out or sys.stdout
    if fmt == "csv":
        rows = rows if rows is not None else [obj]
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        out.write(buf.getvalue())
    else:
        out.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _entry_dict(e: configs.ScoredConfig) -> dict:
    c = e.config
    return {
        "b": c.b,
        "T": c.steps,
        "eta": c.eta,
        "c": c.clip,
        "utility_mean": e.utility_mean,
        "utility_std": e.utility_std,
        "score_mean": e.score_mean,
        "score_std": e.score_std,
        "seeds": e.seeds,
    }


def _delta(args) -> float:
    return args.delta if args.delta is not None else default_delta(args.n)


# -- subcommands ------------------------------------------------------------


def cmd_calibrate(args) -> int:
    delta = _delta(args)
    req = CalibrationRequest(
        args.n,
        args.batch,
        args.steps,
        PrivacyParams(args.epsilon, delta),
        accountant=args.accountant,
        tolerance=args.tolerance,
        grid_step=args.grid_step,
        rdp_conversion=args.rdp_conversion,
    )
    sigma = calibrate_sigma(req)
    _emit(
        {
            "accountant": args.accountant,
            "n": args.n,
            "b": args.batch,
            "T": args.steps,
            "q": req.q,
            "epsilon": args.epsilon,
            "delta": delta,
            "sigma": sigma,
        },
        args.format,
    )
    return 0


def cmd_profile(args) -> int:
    grid = profiles.default_delta_grid(args.points, args.delta_min, args.delta_max)
    sigma = args.sigma
    if sigma is None:
        if args.epsilon is None:
            raise UsageError("give --sigma or --epsilon to calibrate one")
        sigma = calibrate_sigma(
            CalibrationRequest(args.n, args.batch, args.steps, PrivacyParams(args.epsilon, _delta(args)))
        )
    if args.closed_form:
        prof = profiles.closed_form_profile(sigma, args.steps, grid)
    else:
        prof = profiles.compute_profile(MechanismSpec(args.batch / args.n, sigma, args.steps), grid, args.grid_step)
    if args.output:
        prof.to_csv(args.output)
    rows = [{"delta": d, "epsilon": e} for d, e in prof.points]
    _emit({"sigma": sigma, "dropped": prof.dropped, "points": rows}, args.format, rows)
    return 0


def cmd_crossings(args) -> int:
    a = profiles.PrivacyProfile.from_csv(args.profiles[0])
    b = profiles.PrivacyProfile.from_csv(args.profiles[1])
    rep = profiles.crossing_report(a, b, atol=args.atol)
    obj = {
        "n_crossings": rep.n_crossings,
        "crossings": [list(c) for c in rep.crossings],
        "order_at_min_delta": rep.order_at_min_delta,
        "order_at_max_delta": rep.order_at_max_delta,
        "max_abs_difference": rep.max_abs_difference,
    }
    rows = [{"delta_left": lo, "delta_right": hi} for lo, hi in rep.crossings] or [{"delta_left": "", "delta_right": ""}]
    _emit(obj, args.format, rows)
    return 0


def _pool(args) -> configs.Pool:
    return pools.ingest_pool(args.pool, args.score_agg, args.population_std)


def cmd_heuristic_accuracy(args) -> int:
    pool = _pool(args)
    names = [args.heuristic] if args.heuristic else list(configs.HEURISTICS)
    rows = []
    for name in names:
        rec = configs.heuristic_accuracy(pool, name, args.rtol)
        rows.append({"heuristic": name, "applicable": rec.applicable, "correct": rec.correct, "accuracy": rec.accuracy})
    _emit({"results": rows}, args.format, rows)
    return 0


def cmd_select(args) -> int:
    pool = _pool(args)
    chosen = risk_eval.select_by_method(pool, args.method)
    _emit({"method": args.method, "selected": _entry_dict(chosen)}, args.format, [_entry_dict(chosen)])
    return 0


def cmd_risk(args) -> int:
    pool = _pool(args)
    if args.trials > 0:
        rep = risk_eval.monte_carlo_sweep(pool, args.method, args.risk_kind, args.trials, args.seed)
    else:
        rep = risk_eval.threshold_sweep(pool, args.method, args.risk_kind)
    rows = [asdict(r) for r in rep.per_threshold]
    obj = {
        "method": rep.method,
        "risk_kind": rep.risk_kind,
        "mean_risk": rep.mean_risk,
        "trials": rep.trials,
        "per_threshold": rows,
    }
    if rep.resample_stats is not None:
        obj["resample_mean"], obj["resample_std"] = rep.resample_stats
    _emit(obj, args.format, rows)
    return 0


def _regress_text(res: stats.RegressionResult, response: str) -> str:
    lines = [f"response: {response}   dof: {res.dof}   R^2: {res.r_squared:.4f}"]
    lines.append(f"{'term':<10} {'coef':>10} {'std.err':>10} {'t':>9} {'p':>11}")
    for name, coef, se, t, p in res.rows():
        lines.append(f"{name:<10} {coef:>10.4f} {se:>10.4f} {t:>9.3f} {p:>11.3g} {stats.significance_stars(p)}")
    lines.append("signif.: *** p<0.001, ** p<0.01, * p<0.05")
    return "\n".join(lines) + "\n"


def cmd_regress(args) -> int:
    records = pools.read_records(args.pool)
    if args.response == "score":
        data = [(r.config, dpsgd_sim.aggregate_scores(r.scores, args.score_agg)) for r in records]
    else:
        data = [(r.config, r.utility) for r in records]
    res = stats.ols_log_regression(data, args.covariates, intercept=not args.no_intercept)
    rows = [
        {"term": name, "coef": coef, "std_err": se, "t": t, "p": p, "stars": stats.significance_stars(p)}
        for name, coef, se, t, p in res.rows()
    ]
    if args.format == "text":
        sys.stdout.write(_regress_text(res, args.response))
    else:
        _emit({"response": args.response, "dof": res.dof, "r_squared": res.r_squared, "terms": rows}, args.format, rows)
    return 0


def _read_losses(path) -> list[float]:
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            for cell in line.replace(",", " ").split():
                try:
                    values.append(float(cell))
                except ValueError:
                    if lineno == 1 and not values:
                        continue  # header
                    raise UsageError(f"{path}:{lineno}: not a number: {cell!r}") from None
    return values


def cmd_audit(args) -> int:
    if args.losses:
        members, nonmembers = (_read_losses(p) for p in args.losses)
        outcome = auditing.guesses_from_losses(members, nonmembers, args.k, args.confidence)
    else:
        if args.r is None or args.v is None:
            raise UsageError("give --r and --v, or --losses MEMBER NONMEMBER")
        outcome = auditing.AuditOutcome(args.r, args.v, args.m if args.m is not None else args.r, args.confidence)
    obj = {
        "r": outcome.guesses_made,
        "v": outcome.guesses_correct,
        "m": outcome.total_canaries,
        "confidence": outcome.confidence,
        "boundary_ties": outcome.boundary_ties,
        "epsilon_hat": auditing.epsilon_hat(outcome),
    }
    _emit(obj, args.format)
    return 0


def _parse_grid(text: str) -> list[configs.Config]:
    out = []
    for item in text.split(";"):
        parts = item.split(",")
        if len(parts) not in (3, 4):
            raise UsageError(f"grid items are b,T,eta[,c]; got {item!r}")
        try:
            b, steps = int(parts[0]), int(parts[1])
            eta = float(parts[2])
            clip = float(parts[3]) if len(parts) == 4 else 1.0
        except ValueError:
            raise UsageError(f"bad grid item {item!r}") from None
        out.append(configs.Config(b, steps, eta, clip))
    return out


def cmd_sim(args) -> int:
    grid = _parse_grid(args.grid)
    task = dpsgd_sim.make_task(args.n, args.dim, args.canaries, args.heldout, seed=args.seed)
    n = len(task.train)
    delta = args.delta if args.delta is not None else default_delta(n)
    sigmas = [
        calibrate_sigma(CalibrationRequest(n, c.b, c.steps, PrivacyParams(args.epsilon, delta))) for c in grid
    ]
    seeds = [args.seed * 1000 + i for i in range(args.seeds)]
    runs = dpsgd_sim.run_grid(grid, sigmas, task, seeds, args.sampler, args.optimizer, workers=_threads())
    records = [pools.PoolRecord.from_run(r) for r in runs]
    if args.out:
        pools.write_records(records, args.out)
    rows = [
        {"b": c.b, "T": c.steps, "eta": c.eta, "c": c.clip, "sigma": s} for c, s in zip(grid, sigmas)
    ]
    obj = {"n": n, "epsilon": args.epsilon, "delta": delta, "records": len(records), "configs": rows}
    if args.select:
        pool = pools.aggregate_records(records)
        obj["selected"] = _entry_dict(configs.select_algorithm1(pool))
    _emit(obj, args.format, rows)
    return 0


# -- parser -----------------------------------------------------------------


def _add_format(p, choices=("json", "csv"), default="json"):
    p.add_argument("--format", choices=choices, default=default)


def _add_pool(p):
    p.add_argument("--pool", required=True, help="pool file (JSON lines)")
    p.add_argument("--score-agg", choices=pools.SCORE_AGGREGATES, default="mean")
    p.add_argument("--population-std", action="store_true", help="std over seeds with ddof=0")


def _add_mechanism(p, sigma: bool = False):
    p.add_argument("--n", type=int, required=True, help="dataset size")
    p.add_argument("--batch", type=int, required=True, help="expected batch size b")
    p.add_argument("--steps", type=int, required=True, help="number of steps T")
    p.add_argument("--epsilon", type=float, required=not sigma)
    p.add_argument("--delta", type=float, default=None, help="default n^-1.1")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="dpvar", description="DP accounting, calibration and empirical-privacy tooling", allow_abbrev=False
    )
    parser.add_argument("--seed", type=int, default=0, help="root seed for every random stream")
    parser.add_argument("-v", "--verbose", action="store_true")
    # --seed is accepted after the subcommand too.
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed for every random stream")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], allow_abbrev=False, **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("calibrate", help="noise multiplier for a target (epsilon, delta)")
    _add_mechanism(p)
    p.add_argument("--accountant", choices=("pld", "rdp"), default="pld")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--grid-step", type=float, default=DEFAULT_GRID_STEP)
    p.add_argument("--rdp-conversion", choices=("classic", "improved"), default="improved")
    _add_format(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("profile", help="epsilon(delta) curve of a mechanism")
    _add_mechanism(p, sigma=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--delta-min", type=float, default=1e-10)
    p.add_argument("--delta-max", type=float, default=1e-2)
    p.add_argument("--grid-step", type=float, default=DEFAULT_GRID_STEP)
    p.add_argument("--closed-form", action="store_true", help="full-batch Gaussian RDP reference")
    p.add_argument("--output", help="also write the profile CSV here")
    _add_format(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("crossings", help="where two profiles swap order")
    p.add_argument("--profiles", nargs=2, required=True, metavar=("A.csv", "B.csv"))
    p.add_argument("--atol", type=float, default=1e-12)
    _add_format(p)
    p.set_defaults(func=cmd_crossings)

    p = sub.add_parser("heuristic-accuracy", help="pairwise accuracy of the selection heuristics")
    _add_pool(p)
    p.add_argument("--heuristic", choices=sorted(configs.HEURISTICS))
    p.add_argument("--rtol", type=float, default=configs.DEFAULT_RTOL)
    _add_format(p)
    p.set_defaults(func=cmd_heuristic_accuracy)

    p = sub.add_parser("select", help="pick a configuration from a pool")
    _add_pool(p)
    p.add_argument("--method", choices=risk_eval.METHODS, default="ours")
    _add_format(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("risk", help="privacy risk of a selection method over utility thresholds")
    _add_pool(p)
    p.add_argument("--method", choices=risk_eval.METHODS, default="ours")
    p.add_argument("--risk-kind", choices=risk_eval.RISK_KINDS, default="relative")
    p.add_argument("--trials", type=int, default=0, help="Monte Carlo trials; 0 uses the means directly")
    _add_format(p)
    p.set_defaults(func=cmd_risk)

    p = sub.add_parser("regress", help="log-space OLS of scores on hyperparameters")
    _add_pool(p)
    p.add_argument("--response", choices=("score", "utility"), default="score")
    p.add_argument("--covariates", nargs="+", choices=sorted(stats.COVARIATES), default=["log_b", "log_T", "log_eta"])
    p.add_argument("--no-intercept", action="store_true")
    _add_format(p, ("text", "json", "csv"), "text")
    p.set_defaults(func=cmd_regress)

    p = sub.add_parser("audit", help="audited epsilon lower bound from guess counts or canary losses")
    p.add_argument("--r", type=int, help="guesses made")
    p.add_argument("--v", type=int, help="correct guesses")
    p.add_argument("--m", type=int, help="total canaries (default r)")
    p.add_argument("--losses", nargs=2, metavar=("MEMBER", "NONMEMBER"))
    p.add_argument("--k", type=int, default=None, help="guesses per side (default m/4)")
    p.add_argument("--confidence", type=float, default=0.05)
    _add_format(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("sim", help="calibrate, train a DP-SGD grid and emit a pool file")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--canaries", type=int, default=20)
    p.add_argument("--heldout", type=int, default=1000)
    p.add_argument("--epsilon", type=float, default=4.0)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--grid", default=DEFAULT_SIM_GRID, help="b,T,eta[,c] items separated by ';'")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--sampler", choices=dpsgd_sim.SAMPLERS, default="poisson")
    p.add_argument("--optimizer", choices=dpsgd_sim.OPTIMIZERS, default="sgd")
    p.add_argument("--out", help="pool file to write")
    p.add_argument("--select", action="store_true", help="also report the sequential-selection pick")
    _add_format(p)
    p.set_defaults(func=cmd_sim)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DpvarError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
