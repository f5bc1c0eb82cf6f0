"""``rank-lab`` experiment runner.

Every subcommand prints a plain-text summary.  With ``--out PATH`` it also
writes the CSV to ``PATH``, the summary to ``PATH.summary.txt`` and a config
echo to ``PATH.config``.  The echo is a valid ``--config`` file, so
``rank-lab --config PATH.config`` replays the run exactly.

Exit codes: 0 success, 1 a bound was violated, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from pathlib import Path

import numpy as np

from . import bounds, orderstat, poisson, stopping, walk
from .dist import DistributionSpec, RngStream
from .parallel import DEFAULT_CHUNK, chunk_sizes
from .stats import MomentAccumulator

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def count(text: str) -> int:
    """Positive-or-zero integer that may be written as ``1e6``."""
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not math.isfinite(value) or value != int(value) or value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text!r}")
    return int(value)


def floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def counts(text: str) -> tuple[int, ...]:
    return tuple(count(v) for v in text.split(","))


def dist_spec(text: str) -> DistributionSpec:
    try:
        return DistributionSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (tuple, list)):
        return ",".join(fmt(v) for v in value)
    return str(value)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; flags given on the command line win")
    common.add_argument("--seed", type=count, default=0)
    common.add_argument("--workers", type=count, default=1)
    common.add_argument("--chunk-size", type=count, default=DEFAULT_CHUNK, help="trials per work unit (part of the config)")
    common.add_argument("--out", help="CSV path; summary and config echo are written next to it")

    parser = argparse.ArgumentParser(prog="rank-lab", description="Expected-rank stopping experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mlambda", parents=[common], help="sample the drifted supremum M_lambda")
    p.add_argument("--dist", type=dist_spec, default="exp:1")
    p.add_argument("--lambda", dest="lam", type=float, default=2.0)
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--samples", type=count, default=100_000)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--hard-cap", type=count, default=walk.DEFAULT_HARD_CAP)
    p.add_argument("--classify", action="store_true", help="emit a finiteness verdict from the running moment")
    p.add_argument("--tail-fit", action="store_true", help="fit the exponential tail rate and compare with the Lundberg root")

    p = sub.add_parser("an-prob", parents=[common], help="estimate P(n / S_n > 1 + eps)")
    p.add_argument("--n", type=counts, default=(1000,))
    p.add_argument("--eps", type=floats, default=(0.1,))
    p.add_argument("--trials", type=count, default=1_000_000)

    p = sub.add_parser("robbins", parents=[common], help="evaluate a stopping rule on uniform samples")
    p.add_argument("--rule", choices=["memoryless", "fixed", "relrank"], default="memoryless")
    p.add_argument("--theta", type=floats, default=(2.0, 1.0, 0.0))
    p.add_argument("--index", type=count, default=1, help="stopping index for --rule fixed")
    p.add_argument("--n", type=counts, default=(10_000,))
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--trials", type=count, default=1_000_000)
    p.add_argument("--method", choices=["auto", "direct"], default="auto")
    p.add_argument("--optimize", action="store_true", help="pattern-search theta first (memoryless only)")
    p.add_argument("--budget", type=count, default=60)
    p.add_argument("--search-trials", type=count, default=200_000)

    p = sub.add_parser("dp-rank", parents=[common], help="optimal rule based on relative ranks")
    p.add_argument("--n", type=counts, default=(50,))
    p.add_argument("--trials", type=count, default=0, help="also simulate the induced rule")

    p = sub.add_parser("dp-full", parents=[common], help="full-information optimum on a value grid (n <= 3)")
    p.add_argument("--n", type=count, default=2)
    p.add_argument("--grid", type=count, default=10_000)

    p = sub.add_parser("poisson", parents=[common], help="boundary rules in the planar Poisson model")
    p.add_argument("--boundary", default="recip:2.0")
    p.add_argument("--scap", type=float, default=50.0)
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--trials", type=count, default=1_000_000)

    p = sub.add_parser("verify", parents=[common], help="check the value/rank inequalities")
    p.add_argument("--suite", choices=["chain", "decomposition", "limsup", "all"], default="all")
    p.add_argument("--trials", type=count, default=1_000_000)
    p.add_argument("--p", type=floats, default=(0.5, 1.0, 2.0, 3.0))
    p.add_argument("--lambda", dest="lam", type=floats, default=(1.5, 2.0, 3.0))
    p.add_argument("--eps", type=floats, default=(0.05, 0.1))
    p.add_argument("--n", type=counts, default=None, help="default 10,100,1000 (pathwise) or 1e3,1e4,1e5 (limsup)")
    p.add_argument("--theta", type=floats, default=(2.0, 1.0, 0.0), help="memoryless rule for the limsup suite")
    p.add_argument("--sup-samples", type=count, default=1_000_000)
    return parser


def read_config(path: str) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key = key.strip().replace("-", "_")
        values["lam" if key == "lambda" else key] = value.strip()
    return values


def _config_path(argv: list[str]) -> str | None:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    path = _config_path(argv)
    if path is None:
        return parser.parse_args(argv)
    values = read_config(path)
    command = values.pop("command", None)
    commands = parser._subparsers._group_actions[0].choices
    if not any(a in commands for a in argv):
        if command is None:
            raise UsageError("no subcommand on the command line or in the config")
        argv = [command, *argv]
    command = next(a for a in argv if a in commands)
    # allow the subcommand anywhere on the line
    where = argv.index(command)
    argv = [command, *argv[:where], *argv[where + 1 :]]
    sub = commands[command]
    known = {a.dest: a for a in sub._actions}
    for key, value in values.items():
        if key not in known or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} for {command}")
        action = known[key]
        if action.const is True:  # store_true flags
            sub.set_defaults(**{key: value.lower() in ("1", "true", "yes")})
        else:
            sub.set_defaults(**{key: value})
    return parser.parse_args(argv)


def config_echo(args: argparse.Namespace) -> str:
    lines = [f"command={args.command}"]
    for key, value in sorted(vars(args).items()):
        if key in ("command", "config", "out") or value is None:
            continue
        lines.append(f"{key}={fmt(value)}")
    return "\n".join(lines) + "\n"


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _rng(args) -> RngStream:
    return RngStream(args.seed, 0)


def cmd_mlambda(args):
    spec, rng = args.dist, _rng(args)
    batch = walk.sample_suprema(
        spec, args.lam, args.samples, rng, workers=args.workers, chunk_size=args.chunk_size, margin=args.margin, hard_cap=args.hard_cap
    )
    est = MomentAccumulator().add(batch.values**args.p).estimate(args.p)
    lines = [
        f"dist={spec} lambda={args.lam:g} samples={args.samples}",
        f"E M^{args.p:g} = {est.mean:.6g} +- {est.std_error:.3g}",
        f"hard_cap_fraction={batch.hard_cap_fraction:.6g}" + (" (unreliable)" if batch.hard_cap_fraction > 0.01 else ""),
    ]
    if args.classify:
        v = walk.classify_finiteness(walk.subsample_curve(batch.values, args.p))
        lines.append("verdict,slope,p,lambda,dist")
        lines.append(f"{v.verdict.value},{v.growth_slope:.6g},{args.p:g},{args.lam:g},{spec}")
    if args.tail_fit:
        fitted = walk.fit_tail_exponent(batch.values)
        root = walk.lundberg_root(spec, args.lam)
        lines.append(f"tail_exponent={fitted:.6g} lundberg_root={root:.6g} relative_error={abs(fitted / root - 1):.3g}")
    rows = (
        (i, float(batch.values[i]), int(batch.argmax_index[i]), "HardCap" if batch.hard_capped[i] else "DriftCertificate")
        for i in range(len(batch))
    )
    return ["sample_index", "value", "argmax_index", "stop_reason"], rows, lines, EXIT_OK


def cmd_an_prob(args):
    rng, rows, lines = _rng(args), [], []
    for i, n in enumerate(args.n):
        for j, eps in enumerate(args.eps):
            est = orderstat.prob_An(n, eps, args.trials, rng.substream(i * len(args.eps) + j))
            rows.append((n, eps, est.mean, est.std_error))
            lines.append(f"n={n} eps={eps:g}: P(A_n) = {est.mean:.6g} +- {est.std_error:.3g}")
    return ["n", "epsilon", "p_hat", "std_err"], rows, lines, EXIT_OK


def _robbins_rule(args, n):
    if args.rule == "memoryless":
        if len(args.theta) != 3:
            raise UsageError("--theta needs three values")
        return stopping.MemorylessThreshold.family(args.theta)
    if args.rule == "fixed":
        return stopping.FixedIndex(args.index)
    return stopping.dp_relative_rank(n)[0]


def cmd_robbins(args):
    rng, rows, lines = _rng(args), [], []
    if args.optimize and args.rule != "memoryless":
        raise UsageError("--optimize only applies to --rule memoryless")
    for i, n in enumerate(args.n):
        if args.optimize:
            res = stopping.optimize_memoryless(
                n, args.p, args.budget, rng.substream(i), theta0=args.theta, trials=args.search_trials,
                validation_trials=args.trials, workers=args.workers,
            )
            ev = res.evaluation
            lines.append(f"n={n}: optimized theta={fmt(res.theta)} after {res.evaluations} evaluations")
        else:
            ev = stopping.evaluate_rule(
                _robbins_rule(args, n), n, args.p, args.trials, rng.substream(i),
                workers=args.workers, method=args.method, chunk_size=args.chunk_size,
            )
        r, x = ev.rank_moment, ev.scaled_value_moment
        rows.append((n, args.p, ev.rule_id, r.mean, r.std_error, x.mean, x.std_error, ev.trials, args.seed))
        lines.append(f"n={n} {ev.rule_id}: E R^p = {r.mean:.6g} +- {r.std_error:.3g}, n^p E X^p = {x.mean:.6g} +- {x.std_error:.3g}")
    header = ["n", "p", "rule_id", "rank_moment", "rank_se", "scaled_value_moment", "scaled_value_se", "trials", "seed"]
    return header, rows, lines, EXIT_OK


def cmd_dp_rank(args):
    rng, rows, lines = _rng(args), [], []
    for i, n in enumerate(args.n):
        rule, value = stopping.dp_relative_rank(n)
        row = [n, value]
        line = f"n={n}: value {value:.12g}"
        if args.trials:
            ev = stopping.evaluate_rule(rule, n, 1.0, args.trials, rng.substream(i), workers=args.workers, chunk_size=args.chunk_size)
            row += [ev.rank_moment.mean, ev.rank_moment.std_error]
            line += f" (simulated {ev.rank_moment.mean:.6g} +- {ev.rank_moment.std_error:.3g})"
        rows.append(row)
        lines.append(line)
    header = ["n", "value"] + (["simulated", "simulated_se"] if args.trials else [])
    return header, rows, lines, EXIT_OK


def cmd_dp_full(args):
    sol = stopping.dp_full_info(args.n, args.grid)
    lines = [f"n={args.n} grid={sol.grid_size}: value {sol.value:.10g}", f"thresholds {fmt(tuple(sol.thresholds))}"]
    return ["n", "grid", "value", "thresholds"], [(args.n, sol.grid_size, sol.value, tuple(sol.thresholds))], lines, EXIT_OK


def cmd_poisson(args):
    rule = poisson.PoissonRule.parse(args.boundary, args.scap)
    rng = _rng(args)
    eps = [poisson.simulate_poisson_episodes(rule, args.scap, size, rng.substream(i)) for i, size in enumerate(chunk_sizes(args.trials, args.chunk_size))]
    rank = np.concatenate([e.rank for e in eps]) if eps else np.empty(0)
    no_stop = np.concatenate([e.no_stop for e in eps]) if eps else np.empty(0, dtype=bool)
    t = np.concatenate([e.stopped_t for e in eps]) if eps else np.empty(0)
    s = np.concatenate([e.stopped_s for e in eps]) if eps else np.empty(0)
    est = MomentAccumulator().add(rank.astype(float) ** args.p).estimate(args.p)
    lines = [
        f"boundary={rule.name} s_cap={args.scap:g} trials={args.trials}",
        f"E R^{args.p:g} = {est.mean:.6g} +- {est.std_error:.3g}",
        f"no_stop_frequency={no_stop.mean() if no_stop.size else math.nan:.6g}",
    ]
    rows = ((i, t[i], s[i], int(rank[i]), bool(no_stop[i])) for i in range(rank.size))
    return ["trial", "stopped_t", "stopped_s", "rank", "no_stop_flag"], rows, lines, EXIT_OK


def cmd_verify(args):
    rng, rows, lines = _rng(args), [], []
    violated = False
    if args.suite in ("chain", "decomposition", "all"):
        ns = args.n or (10, 100, 1000)
        cells = bounds.pathwise_sweep(args.trials, rng.substream(0), args.p, args.lam, args.eps, ns, workers=args.workers, chunk_size=args.chunk_size)
        for cell in cells:
            if args.suite != "all" and cell.suite != args.suite:
                continue
            params = dict(cell.params(), samples=cell.samples, checks=cell.checks, violations=cell.violations)
            text = ";".join(f"{k}={fmt(v)}" for k, v in params.items())
            agg = cell.aggregate_report()
            rows.append((cell.suite, text, agg.lhs, agg.rhs, cell.min_slack, cell.violations > 0))
            violated |= cell.violations > 0
        total = sum(c.violations for c in cells if args.suite == "all" or c.suite == args.suite)
        checks = sum(c.checks for c in cells if args.suite == "all" or c.suite == args.suite)
        lines.append(f"pathwise: {checks} checks over {args.trials} coupled samples, {total} violations")
    if args.suite in ("limsup", "all"):
        ns = args.n or (1000, 10_000, 100_000)
        rule = stopping.MemorylessThreshold.family(args.theta)
        for p in args.p:
            demo = bounds.demonstrate_limsup_bound(rule, p, ns, args.trials, rng.substream(1 + int(p * 1000)), args.lam, args.sup_samples, args.workers)
            for rep in demo.reports:
                rows.append(("limsup", rep.params_text(), rep.lhs, rep.rhs, rep.slack, rep.violated))
                violated |= rep.violated
                state = "undecided" if rep.undecided else ("VIOLATED" if rep.violated else "ok")
                lines.append(f"limsup {rep.params_text()}: {rep.lhs:.6g} <= {rep.rhs:.6g} ({state})")
    lines.append("RESULT: " + ("violation found" if violated else "no violations"))
    return ["suite", "params", "lhs", "rhs", "slack", "violated"], rows, lines, EXIT_VIOLATION if violated else EXIT_OK


COMMANDS = {
    "mlambda": cmd_mlambda,
    "an-prob": cmd_an_prob,
    "robbins": cmd_robbins,
    "dp-rank": cmd_dp_rank,
    "dp-full": cmd_dp_full,
    "poisson": cmd_poisson,
    "verify": cmd_verify,
}


def run(args: argparse.Namespace, stdout=None) -> int:
    stdout = stdout or sys.stdout
    header, rows, lines, code = COMMANDS[args.command](args)
    summary = "\n".join(lines) + "\n"
    stdout.write(summary)
    if args.out:
        out = Path(args.out)
        out.write_text(csv_text(header, rows), newline="")
        Path(f"{out}.summary.txt").write_text(summary)
        Path(f"{out}.config").write_text(config_echo(args))
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        return run(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, ValueError) as exc:
        print(f"rank-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
