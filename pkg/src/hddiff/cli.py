"""Command-line interface: ``hddiff {diffregr,diffnet,permtest,simulate}``.

Exit codes: 0 success, 1 computation error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, permtest, simulate, testing
from .exceptions import HddiffError, InvalidInputError
from .models import Dataset, check_compatible
from .screening import ScreeningConfig

log = logging.getLogger("hddiff")

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags or unreadable input; maps to exit code 2."""


# --------------------------------------------------------------------------- #
# Input
# --------------------------------------------------------------------------- #


def read_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read a numeric CSV with a header row; rejects ragged, missing or non-numeric cells."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise UsageError(f"{path}: file is empty") from None
        except (csv.Error, UnicodeDecodeError) as exc:
            raise UsageError(f"{path}:1: {exc}") from None
        header = [h.strip() for h in header]
        if not header or any(h == "" for h in header):
            raise UsageError(f"{path}:1: header row has empty column names")
        if all(_is_number(h) for h in header):
            raise UsageError(f"{path}:1: header row required (first row is numeric)")
        if len(set(header)) != len(header):
            raise UsageError(f"{path}:1: duplicate column names")
        rows = []
        try:
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise UsageError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
                vals = []
                for col, cell in zip(header, row):
                    try:
                        v = float(cell)
                    except ValueError:
                        raise UsageError(f"{path}:{line_no}: non-numeric value {cell!r} in column {col!r}") from None
                    if not math.isfinite(v):
                        raise UsageError(f"{path}:{line_no}: missing or non-finite value in column {col!r}")
                    vals.append(v)
                rows.append(vals)
        except (csv.Error, UnicodeDecodeError) as exc:
            raise UsageError(f"{path}: {exc}") from None
    if not rows:
        raise UsageError(f"{path}: no data rows")
    return header, np.array(rows, dtype=float)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_regression(path, x_cols: list[str] | None) -> Dataset:
    header, arr = read_csv(path)
    if len(header) < 2:
        raise UsageError(f"{path}: need a response column and at least one predictor")
    if x_cols:
        missing = [c for c in x_cols if c not in header[1:]]
        if missing:
            raise UsageError(f"{path}: unknown predictor column(s) {', '.join(missing)}")
        idx = [header.index(c) for c in x_cols]
    else:
        idx = list(range(1, len(header)))
    labels = (header[0],) + tuple(header[i] for i in idx)
    return Dataset(arr[:, 0], arr[:, idx], labels)


def load_ggm(path, center: bool) -> Dataset:
    header, arr = read_csv(path)
    if len(header) < 2:
        raise UsageError(f"{path}: need at least two variables")
    data = Dataset(arr, None, tuple(header))
    return data.centered() if center else data


def _pair(args, loader) -> tuple[Dataset, Dataset, dict]:
    if args.backtest:
        if args.u or args.v:
            raise UsageError("--backtest cannot be combined with --u/--v")
        return loader(args.backtest), None, {"backtest": args.backtest}
    if not (args.u and args.v):
        raise UsageError("both --u and --v are required (or --backtest)")
    u, v = loader(args.u), loader(args.v)
    try:
        check_compatible(u, v)
    except InvalidInputError:
        raise UsageError(f"column mismatch between {args.u} and {args.v}: "
                         f"{list(u.labels)} vs {list(v.labels)}") from None
    return u, v, {"u": args.u, "v": args.v}


# --------------------------------------------------------------------------- #
# Configuration
# --------------------------------------------------------------------------- #


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("HDDIFF_THREADS")
    if env is None or env.strip() == "":
        return 1
    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"HDDIFF_THREADS must be a positive integer, got {env!r}") from None
    if n < 1:
        raise UsageError(f"HDDIFF_THREADS must be a positive integer, got {env!r}")
    return n


def screening_config(args) -> ScreeningConfig:
    return ScreeningConfig(
        n_folds=args.folds,
        lambda_grid_size=args.grid_size,
        lambda_min_ratio=args.lambda_min_ratio,
        cap_multiplier=Fraction(args.cap_multiplier).limit_denominator(10**6),
        seed=args.seed,
    )


def test_config(args, threads: int) -> testing.TestConfig:
    return testing.TestConfig(
        k_splits=args.splits,
        gamma_min=args.gamma_min,
        b_estimator=args.estimator,
        seed=args.seed,
        screening=screening_config(args),
        screen_size=args.screen_size,
        agg_constant=args.agg_constant,
        threads=threads,
    )


def write_report(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _summary(line: str, out: str | None) -> None:
    # keep stdout clean when it carries the JSON report
    print(line, file=sys.stderr if out in (None, "-") else sys.stdout)


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #


def _cmd_diff(args, kind: str) -> int:
    threads = resolve_threads(args.threads)
    if kind == "regression":
        loader = lambda p: load_regression(p, _split_list(args.x_cols))  # noqa: E731
    else:
        loader = lambda p: load_ggm(p, args.center)  # noqa: E731
    u, v, inputs = _pair(args, loader)
    cfg = test_config(args, threads)
    report = testing.backtest(u, cfg) if v is None else testing.multi_split_test(u, v, cfg)
    out = report.as_dict()
    out["report_type"] = "two-sample-test"
    out["command"] = "diffregr" if kind == "regression" else "diffnet"
    out["inputs"] = inputs
    if kind == "ggm":
        out["config"]["center"] = bool(args.center)
    else:
        out["config"]["x_cols"] = _split_list(args.x_cols)
    write_report(out, args.out)
    _summary(f"p-value: {report.pvalue:.6g} ({len(report.valid_pvalues)}/{len(report.outcomes)} valid splits)",
             args.out)
    return EXIT_OK


def cmd_diffregr(args) -> int:
    return _cmd_diff(args, "regression")


def cmd_diffnet(args) -> int:
    return _cmd_diff(args, "ggm")


def cmd_permtest(args) -> int:
    threads = resolve_threads(args.threads)
    if args.n_perm < 1:
        raise UsageError("--n-perm must be at least 1")
    if args.model == "regression":
        loader = lambda p: load_regression(p, _split_list(args.x_cols))  # noqa: E731
    else:
        loader = lambda p: load_ggm(p, args.center)  # noqa: E731
    args.backtest = None
    u, v, inputs = _pair(args, loader)
    cfg = permtest.PermConfig(args.n_perm, args.seed, not args.fixed_lambda, screening_config(args), threads)
    res = permtest.perm_test(u, v, cfg)
    out = {
        "schema_version": testing.SCHEMA_VERSION,
        "report_type": "permutation-test",
        "command": "permtest",
        "model": u.kind,
        "labels": list(u.labels),
        "n_u": u.n,
        "n_v": v.n,
        "inputs": inputs,
        "config": cfg.as_dict(),
        **res.as_dict(),
    }
    write_report(out, args.out)
    _summary(f"statistic: {res.statistic:.6g}  p-value: {res.pvalue:.6g}  "
             f"exceedances: {res.exceedances}/{cfg.n_perm}", args.out)
    return EXIT_OK


SETTING_MAP = {
    "1": ("reg-synthetic", 10.0),
    "2": ("reg-synthetic", 5.0),
    "4": ("ggm", None),
    "reg-external": ("reg-external", 10.0),
}


def _split_list(value) -> list[str] | None:
    if value is None:
        return None
    items = [s.strip() for s in value.split(",") if s.strip()]
    return items or None


def _numbers(value: str, cast, flag: str) -> list:
    try:
        out = [cast(s) for s in _split_list(value) or []]
    except ValueError:
        raise UsageError(f"{flag}: cannot parse {value!r}") from None
    if not out:
        raise UsageError(f"{flag}: empty list")
    return out


def build_grid(args) -> list[simulate.SimSpec]:
    if args.setting not in SETTING_MAP:
        raise UsageError(f"unknown setting {args.setting!r}; choose from {', '.join(SETTING_MAP)}")
    setting, snr = SETTING_MAP[args.setting]
    if args.snr is not None:
        snr = args.snr
    x_matrix = None
    if setting == "reg-external":
        if not args.x_file:
            raise UsageError("--setting reg-external needs --x-file")
        _, x_matrix = read_csv(args.x_file)
    elif args.x_file:
        raise UsageError("--x-file is only used with --setting reg-external")
    ns = _numbers(args.n, int, "--n")
    alphas = _numbers(args.alpha, float, "--alpha")
    hyps = _split_list(args.hypothesis) or []
    if not hyps or any(h not in ("H0", "HA") for h in hyps):
        raise UsageError("--hypothesis must be a comma list of H0/HA")
    if setting == "ggm":
        dims = [("k", k) for k in _numbers(args.k, int, "--k")]
    elif setting == "reg-external":
        dims = [("l", x_matrix.shape[1])]
    else:
        dims = [("l", l) for l in _numbers(args.l, int, "--l")]
    grid = []
    for (dim_name, dim), n, hyp in itertools.product(dims, ns, hyps):
        for alpha in (alphas if hyp == "HA" else alphas[:1]):
            kw = dict(setting=setting, n=n, hypothesis=hyp, alpha=alpha, seed=args.seed, x_matrix=x_matrix)
            kw[dim_name] = dim
            if snr is not None:
                kw["snr"] = snr
            try:
                grid.append(simulate.SimSpec(**kw))
            except InvalidInputError as exc:
                raise UsageError(f"invalid grid cell {kw_repr(kw)}: {exc}") from None
    return grid


def kw_repr(kw: dict) -> str:
    return ", ".join(f"{k}={v}" for k, v in kw.items() if k != "x_matrix")


def cmd_simulate(args) -> int:
    threads = resolve_threads(args.threads)
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    methods = _split_list(args.methods) or []
    bad = [m for m in methods if m not in simulate.METHODS]
    if not methods or bad:
        raise UsageError(f"--methods must be a comma list from {', '.join(simulate.METHODS)}")
    if not 0 < args.level < 1:
        raise UsageError("--level must lie in (0, 1)")
    if args.n_perm < 1:
        raise UsageError("--n-perm must be at least 1")
    grid = build_grid(args)
    cfg = simulate.ExperimentConfig(test_config(args, 1), args.n_perm, args.level, threads)
    res = simulate.run_experiment(grid, args.runs, methods, cfg)
    res["report_type"] = "simulation"
    res["command"] = "simulate"
    res["config"]["setting"] = args.setting
    if args.x_file:
        res["inputs"] = {"x_file": args.x_file}
    write_report(res, args.out)
    if args.csv:
        Path(args.csv).write_text(simulate.table_csv(res), encoding="utf-8")
    for row in res["table"]:
        rate = "n/a" if row["rate"] is None else f"{row['rate']:.3f} (se {row['se']:.3f})"
        dim = f"k={row['k']}" if "k" in row else f"l={row['l']}"
        _summary(f"{row['hypothesis']} {dim} n={row['n']} {row['method']}: {row['rate_name']} {rate}", args.out)
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #


def _positive_int(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _add_common(p: argparse.ArgumentParser, splits: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker threads (default $HDDIFF_THREADS or 1); never changes results")
    p.add_argument("--out", default=None, help="JSON report path (default: stdout)")
    p.add_argument("--folds", type=int, default=10, help="cross-validation folds")
    p.add_argument("--grid-size", type=int, default=50, help="lambda grid points")
    p.add_argument("--lambda-min-ratio", type=float, default=0.01, help="smallest lambda / lambda_max")
    p.add_argument("--cap-multiplier", type=float, default=0.2,
                   help="active sets hold at most ceil(mult * n) screened entries")
    if splits:
        p.add_argument("--splits", type=_positive_int, default=50, help="number of random splits K")
        p.add_argument("--gamma-min", type=float, default=0.05, help="lower quantile bound")
        p.add_argument("--estimator", choices=testing.ESTIMATORS, default="plugin",
                       help="cross-moment estimator for the null weights")
        p.add_argument("--screen-size", type=_positive_int, default=None,
                       help="rows per population used for screening (default: half)")
        p.add_argument("--agg-constant", type=float, default=None,
                       help="override the aggregation constant 1 - gamma_min")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hddiff", description="High-dimensional two-sample tests.",
                                     allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("diffregr", help="differential regression test")
    p.add_argument("--u", help="CSV for population U (response first)")
    p.add_argument("--v", help="CSV for population V (response first)")
    p.add_argument("--backtest", help="single CSV randomly halved into two pseudo-populations")
    p.add_argument("--x-cols", help="comma list of predictor columns to use")
    _add_common(p)
    p.set_defaults(func=cmd_diffregr)

    p = sub.add_parser("diffnet", help="differential network (GGM) test")
    p.add_argument("--u", help="CSV for population U")
    p.add_argument("--v", help="CSV for population V")
    p.add_argument("--backtest", help="single CSV randomly halved into two pseudo-populations")
    p.add_argument("--center", action="store_true", help="center columns before testing")
    _add_common(p)
    p.set_defaults(func=cmd_diffnet)

    p = sub.add_parser("permtest", help="permutation test on the symmetric KL divergence")
    p.add_argument("--model", choices=("regression", "ggm"), required=True)
    p.add_argument("--u", required=True)
    p.add_argument("--v", required=True)
    p.add_argument("--x-cols", help="comma list of predictor columns (regression)")
    p.add_argument("--center", action="store_true", help="center columns (ggm)")
    p.add_argument("--n-perm", type=int, default=100, help="number of permutations")
    p.add_argument("--fixed-lambda", action="store_true",
                   help="reuse the observed lambdas instead of re-tuning per permutation")
    _add_common(p, splits=False)
    p.set_defaults(func=cmd_permtest)

    p = sub.add_parser("simulate", help="false/true positive rates on synthetic data")
    p.add_argument("--setting", required=True, help="1, 2, 4 or reg-external")
    p.add_argument("--l", default="10", help="comma list of predictor counts")
    p.add_argument("--k", default="10", help="comma list of GGM dimensions")
    p.add_argument("--n", default="200", help="comma list of per-population sample sizes")
    p.add_argument("--alpha", default="0.5", help="comma list of HA strengths")
    p.add_argument("--hypothesis", default="H0", help="comma list from H0,HA")
    p.add_argument("--snr", type=float, default=None, help="override the setting's SNR")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--methods", default="multi-split", help="comma list of methods")
    p.add_argument("--level", type=float, default=0.05)
    p.add_argument("--n-perm", type=int, default=100)
    p.add_argument("--x-file", help="predictor matrix CSV for reg-external")
    p.add_argument("--csv", help="also write the rate table as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidInputError) as exc:
        print(f"hddiff {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HddiffError, np.linalg.LinAlgError) as exc:
        print(f"hddiff {args.command}: computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
