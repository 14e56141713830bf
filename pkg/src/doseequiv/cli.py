"""Command-line interface.

Exit codes: 0 run completed (whatever the statistical decision),
2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from doseequiv import __version__
from doseequiv.bootstrap import (
    TestConfig,
    default_workers,
    params_to_dict,
    test_bivariate,
    test_univ,
)
from doseequiv.errors import ConfigError, DataError, DoseEquivError
from doseequiv.estimation import fit_mle
from doseequiv.io import dumps, emit_curve_table, parse_subject_csv, report_document
from doseequiv.model import DEFAULT_GRID_SIZE, Kind, Link, dose_grid, max_abs_deviation
from doseequiv.simulation import builtin_scenarios, results_csv, run_scenario

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _floats(text: str, n_max: int, what: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated numbers, got {text!r}") from None
    if not 1 <= len(vals) <= n_max:
        raise ConfigError(f"{what} takes at most {n_max} values, got {text!r}")
    return vals


def _parse_range(text):
    if text is None:
        return None
    vals = _floats(text, 2, "--range")
    if len(vals) != 2:
        raise ConfigError("--range needs LO,HI")
    return vals


def _parse_epsilon(text):
    vals = _floats(text, 2, "--epsilon")
    return vals[0] if len(vals) == 1 else vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="doseequiv", description="Equivalence tests for binary dose-response curves."
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--data", required=True, help="CSV of subject or count rows")
        sp.add_argument("--link", choices=[l.value for l in Link], default=Link.LOGISTIC.value)
        sp.add_argument("--grid", type=int, default=DEFAULT_GRID_SIZE, help="grid nodes")
        sp.add_argument("--range", help="dose range LO,HI (default: span of both designs)")
        sp.add_argument("--out", help="output path (default: stdout)")

    def testing(sp):
        sp.add_argument("--epsilon", default="0.2", help="margin X or X,Y")
        sp.add_argument("--alpha", type=float, default=0.05)
        sp.add_argument("--n-boot", type=int, default=400)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=default_workers())

    sp = sub.add_parser("fit", help="maximum-likelihood fits and observed deviation")
    common(sp)
    sp.add_argument("--curves", help="write the fitted curve table to this CSV")

    for name, hlp in (("test-univ", "single-endpoint test"), ("test-bivar", "efficacy-toxicity test")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        testing(sp)
        sp.add_argument("--curves", help="write the fitted curve table to this CSV")

    sp = sub.add_parser("simulate", help="operating characteristics of built-in scenarios")
    sp.add_argument("--scenario", action="append", help="scenario id (repeatable; default all)")
    sp.add_argument("--n-per-dose", type=int, default=21)
    sp.add_argument("--epsilon", default="0.2", help="margin X or X,Y")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--n-sims", type=int, help="simulation runs (default 500, 1000 with --full-effort)")
    sp.add_argument("--n-boot", type=int, help="bootstrap replicates (default 300, 400 with --full-effort)")
    sp.add_argument("--full-effort", action="store_true", help="1000 runs and 400 replicates")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--workers", type=int, default=default_workers())
    sp.add_argument("--out", help="results CSV (default: stdout)")

    sp = sub.add_parser("scenarios", help="list built-in scenarios")
    sp.add_argument("--n-per-dose", type=int, default=21)
    sp.add_argument("--epsilon", default="0.2", help="margin X or X,Y")
    return p


def _write(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _config(args, eps) -> TestConfig:
    return TestConfig(
        epsilon=eps, alpha=args.alpha, n_boot=args.n_boot, grid_size=args.grid,
        dose_range=_parse_range(args.range), seed=args.seed, link=Link(args.link),
        workers=args.workers,
    )


def _grid(args, data):
    rng = _parse_range(args.range) or (
        min(d.design.range[0] for d in data), max(d.design.range[1] for d in data)
    )
    if args.grid < 1:
        raise ConfigError("--grid must be >= 1")
    return dose_grid(rng, args.grid)


def cmd_fit(args) -> int:
    link = Link(args.link)
    data = parse_subject_csv(args.data)
    grid = _grid(args, data)
    fits = [fit_mle(d, link) for d in data]
    doc = {
        "software": {"name": "doseequiv", "version": __version__},
        "kind": data[0].kind.value,
        "groups": [d.label for d in data],
        "fits": [
            {"params": params_to_dict(f.params), "loglik": f.loglik, "converged": f.converged,
             "gradient_norm": f.gradient_norm, "boundary": f.boundary_flag}
            for f in fits
        ],
    }
    endpoints = ("efficacy", "toxicity") if data[0].kind is Kind.BIVARIATE else ("efficacy",)
    for ep in endpoints:
        ca, cb = (f.params.margin(ep) if data[0].kind is Kind.BIVARIATE else f.params for f in fits)
        dev = max_abs_deviation(ca, cb, grid)
        s = ep[0]
        doc[f"statistic_{s}"] = dev.value
        doc[f"argmax_{s}"] = dev.argmax_dose
    _write(dumps(doc), args.out)
    if args.curves:
        emit_curve_table(tuple(f.params for f in fits), grid, args.curves)
    return EXIT_OK


def cmd_test(args, bivariate: bool) -> int:
    eps = _parse_epsilon(args.epsilon)
    if not bivariate and isinstance(eps, tuple):
        raise ConfigError("test-univ takes a single --epsilon")
    cfg = _config(args, eps)
    data = parse_subject_csv(args.data)
    want = Kind.BIVARIATE if bivariate else Kind.UNIVARIATE
    if data[0].kind is not want:
        raise DataError(f"{args.data}: {data[0].kind.value} data given to {args.command}")
    report = (test_bivariate if bivariate else test_univ)(*data, cfg)
    _write(dumps(report_document(report)), args.out)
    if args.curves:
        emit_curve_table(report.fits, cfg.grid_for(*data), args.curves)
    for ep in report.endpoints:
        print(
            f"{ep}: d_hat={report.statistics[ep]:.4f} quantile={report.quantiles[ep]:.4f} "
            f"p={report.p_values[ep]:.4f} reject={report.reject[ep]}",
            file=sys.stderr,
        )
    print(f"global reject={report.reject_global}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    eps = _parse_epsilon(args.epsilon)
    specs = builtin_scenarios(args.n_per_dose, eps, full_effort=args.full_effort, seed=args.seed)
    if args.scenario:
        known = {s.id: s for s in specs}
        missing = [i for i in args.scenario if i not in known]
        if missing:
            raise ConfigError(f"unknown scenario id(s): {', '.join(missing)}")
        specs = [known[i] for i in args.scenario]
    if args.n_sims is not None or args.n_boot is not None:
        specs = [s.with_effort(args.n_sims or s.n_sims, args.n_boot or s.n_boot) for s in specs]
    specs = [replace(s, alpha=args.alpha) for s in specs]
    results = []
    for s in specs:
        oc = run_scenario(s, workers=args.workers)
        print(
            f"{s.id}: global={oc.rejection_rate_global:.3f} (n={oc.n_valid}, {oc.runtime:.1f}s)",
            file=sys.stderr,
        )
        results.append((s, oc))
    _write(results_csv(results), args.out)
    return EXIT_OK


def cmd_scenarios(args) -> int:
    eps = _parse_epsilon(args.epsilon)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["scenario_id", "region", "nu", "d_tag", "deviation", "truth_b"])
    for s in builtin_scenarios(args.n_per_dose, eps):
        w.writerow([
            s.id, s.region, "" if s.nu is None else s.nu,
            "/".join(f"{t:g}" for t in s.tags()),
            "/".join(f"{v:.4f}" for v in s.deviation),
            " ".join(f"{v:g}" for v in s.truth_b.as_array()),
        ])
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "fit": cmd_fit,
        "test-univ": lambda a: cmd_test(a, bivariate=False),
        "test-bivar": lambda a: cmd_test(a, bivariate=True),
        "simulate": cmd_simulate,
        "scenarios": cmd_scenarios,
    }
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return handlers[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DoseEquivError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
