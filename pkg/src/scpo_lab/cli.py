"""``scpo-lab`` command line: train, compare, check.

Exit status: 0 success, 1 a property or training failure, 2 a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from scpo_lab import checks, experiment
from scpo_lab.config import ALGOS, RunConfig, config_from_overrides, dump_config, load_config, parse_overrides
from scpo_lab.errors import ConfigError, DomainError, NumericError, SolverError

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("scpo_lab")


class UsageError(Exception):
    pass


def _seeds(values) -> list[int]:
    if not values:
        return [0]
    out = []
    for v in values:
        for part in v.split(","):
            part = part.strip()
            if not part:
                continue
            try:
                out.append(int(part))
            except ValueError:
                raise UsageError(f"seed must be an integer, got {part!r}") from None
    if len(set(out)) != len(out):
        raise UsageError(f"duplicate seeds in {out}")
    return out


def _config(args, algo=None) -> RunConfig:
    overrides = parse_overrides(args.overrides)
    if algo is not None:
        overrides["algo"] = algo
    if args.config is None:
        return config_from_overrides(overrides)
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _config(args, args.algo)
    seeds = _seeds(args.seed)
    root = experiment.output_root(args.out)
    root.mkdir(parents=True, exist_ok=True)
    (root / f"{cfg.algo}.cfg").write_text(dump_config(cfg))
    for path in experiment.run_seeds(cfg, seeds, root, parallel=args.parallel_seeds):
        print(path / "metrics.csv")
    return EXIT_OK


def cmd_compare(args) -> int:
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    if len(algos) < 2:
        raise UsageError("compare needs at least two algorithms, e.g. --algos scpo,trpo")
    unknown = [a for a in algos if a not in ALGOS]
    if unknown:
        raise UsageError(f"unknown algorithm(s) {unknown}; choose from {list(ALGOS)}")
    seeds = _seeds(args.seed)
    configs = [_config(args, a) for a in algos]  # validate everything before training
    root = experiment.output_root(args.out)
    root.mkdir(parents=True, exist_ok=True)
    for cfg in configs:
        experiment.run_seeds(cfg, seeds, root, parallel=args.parallel_seeds)

    runs = experiment.load_runs(root, algos, seeds)
    per_seed = {a: [experiment.final_window(runs[(a, s)], args.window) for s in seeds] for a in algos}
    table = experiment.median_table(per_seed)
    experiment.write_joined(root / "compare_metrics.csv", experiment.metrics_paths(root, algos, seeds))
    experiment.write_table(root / "compare_summary.csv", table)
    curve_data = experiment.curves(runs)
    experiment.write_curves(root / "compare_curves.csv", curve_data)
    if args.svg:
        try:
            experiment.write_svg(root / "compare_curves.svg", curve_data)
        except ImportError:
            raise UsageError("--svg needs matplotlib (pip install 'artifact[plot]')") from None

    print(f"median over seeds {seeds} of the last-{args.window}-epoch mean")
    print(f"{'algo':<16}{'J_r':>12}{'M_c':>12}{'rho_c':>12}")
    for algo, vals in table.items():
        print(f"{algo:<16}{vals['J_r']:>12.4f}{vals['M_c']:>12.4f}{vals['rho_c']:>12.6f}")
    return EXIT_OK


def cmd_check(args) -> int:
    names = args.suite or list(checks.SUITES)
    unknown = [n for n in names if n not in checks.SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {unknown}; choose from {list(checks.SUITES)}")
    report = checks.run_all(names)
    text = json.dumps(report, indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    for s in report["suites"]:
        status = "ok" if s["ok"] else "FAIL"
        print(f"{s['name']:<20} {s['passed']}/{s['cases']} {status}", file=sys.stderr)
    return EXIT_OK if report["ok"] else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scpo-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_options(p):
        p.add_argument("--config", help="INI-style config file with [env], [algo], [training] sections")
        p.add_argument("--seed", action="append", help="seed or comma list; repeatable (default 0)")
        p.add_argument("--out", help=f"output root (default ${experiment.OUT_ENV} or ./{experiment.DEFAULT_OUT})")
        p.add_argument("--parallel-seeds", action="store_true", help="run seeds as separate processes")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")

    p = sub.add_parser("train", help="train one algorithm on one or more seeds")
    p.add_argument("--algo", choices=ALGOS)
    run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="train several algorithms and tabulate return, cost and cost rate")
    p.add_argument("--algos", required=True, help="comma-separated algorithm names")
    p.add_argument("--window", type=int, default=10, help="final epochs averaged per seed (default 10)")
    p.add_argument("--svg", action="store_true", help="also render compare_curves.svg")
    run_options(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("check", help="run the gradient, solver and identity property suites")
    p.add_argument("--suite", action="append", help=f"subset of {', '.join(checks.SUITES)}")
    p.add_argument("--report", help="also write the JSON report here")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, NumericError, SolverError) as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
