"""Command-line interface: estimate, bootstrap, simulate, truth, generate.

Exit codes: 0 success, 1 invalid input or arguments, 2 a model fit did not
converge, 3 file I/O failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .basis import BasisSpec, ScadSpec
from .data import ConvergenceError, DataError, ingest_csv, write_csv
from .estimators import DegenerateCurveError, EstimandKind, EstimandSpec, evaluation_grid
from .inference import BootstrapError, bootstrap
from .pipeline import ESTIMATOR_NAMES, EstimationConfig, parse_estimators, run_pipeline
from .simulation import SCENARIOS, ScenarioSpec, generate_replicate, run_mc_study, true_ate

logger = logging.getLogger("acwsurv")

EXIT_OK, EXIT_INPUT, EXIT_FIT, EXIT_IO = 0, 1, 2, 3


class UsageError(ValueError):
    pass


# -- configuration ----------------------------------------------------------

# (flag dest, config key, converter); flags override the config file.
_ESTIMATION_KEYS = ("estimators", "estimand", "tau", "basis_degree", "penalty_epsilon",
                    "sieve_degree", "sieve_penalty_epsilon", "cv_folds", "weighting",
                    "bootstrap", "ci", "seed", "standardize")
_SCENARIO_KEYS = ("scenario", "outcome_correct", "weights_correct", "reps", "pop_size",
                  "rct_pool", "os_pool", "os_sample", "baseline_shape", "n_mc")


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError:
        raise
    except configparser.Error as err:
        raise UsageError(f"config {path}: {err}") from None
    known = set(_ESTIMATION_KEYS) | set(_SCENARIO_KEYS)
    out = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            key = key.replace("-", "_")
            if key not in known:
                raise UsageError(f"config {path}: unknown key {key!r} in [{section}]")
            out[key] = value
    return out


def _merged(args, config: dict) -> dict:
    """Config-file values overridden by explicitly given flags."""
    merged = dict(config)
    for key in _ESTIMATION_KEYS + _SCENARIO_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {value!r}")


def _number(value, kind, name):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise UsageError(f"{name} must be {kind.__name__}, got {value!r}") from None


def _penalty(value, folds: int, seed: int) -> ScadSpec | None:
    if value is None or str(value).lower() in ("", "none", "off"):
        return None
    if str(value).lower() == "cv":
        return ScadSpec(cv_folds=folds, seed=seed)
    eps = _number(value, float, "penalty epsilon")
    if eps < 0:
        raise UsageError("penalty epsilon must be nonnegative")
    return ScadSpec(epsilon=eps, cv_folds=folds, seed=seed)


def build_config(opts: dict) -> tuple[EstimationConfig, int]:
    """EstimationConfig and seed from merged options."""
    seed = _number(opts.get("seed", 0), int, "seed")
    folds = _number(opts.get("cv_folds", 5), int, "cv_folds")
    try:
        estimators = parse_estimators(opts.get("estimators", ",".join(ESTIMATOR_NAMES)))
        kind = EstimandKind.parse(str(opts.get("estimand", "RmstDiff")))
        tau = _number(opts.get("tau", 20.0), float, "tau")
        estimand = EstimandSpec(kind, tau)
        standardize = _bool(opts.get("standardize", False))
        basis = BasisSpec(_number(opts.get("basis_degree", 1), int, "basis degree"),
                          standardize=standardize)
        sieve = BasisSpec(_number(opts.get("sieve_degree", 2), int, "sieve degree"),
                          standardize=standardize)
        config = EstimationConfig(
            estimators=estimators, estimand=estimand, basis=basis,
            penalty=_penalty(opts.get("penalty_epsilon"), folds, seed),
            sieve_basis=sieve,
            sieve_penalty=_penalty(opts.get("sieve_penalty_epsilon", "cv"), folds, seed),
            weighting=str(opts.get("weighting", "calibration")).lower(),
            bootstrap=_number(opts.get("bootstrap", 0), int, "bootstrap"),
            ci=str(opts.get("ci", "normal")).lower())
    except UsageError:
        raise
    except ValueError as err:
        raise UsageError(str(err)) from None
    return config, seed


def _scenario(opts: dict, tau: float, seed: int) -> ScenarioSpec:
    key = str(opts.get("scenario", 1)).strip()
    if key not in {str(k) for k in SCENARIOS}:
        raise UsageError(f"scenario must be one of {sorted(SCENARIOS)}, got {key!r}")
    fields = {}
    for name in ("outcome_correct", "weights_correct"):
        if name in opts:
            fields[name] = _bool(opts[name])
    for name in ("pop_size", "rct_pool", "os_pool", "os_sample"):
        if name in opts:
            fields[name] = _number(opts[name], int, name)
    if "baseline_shape" in opts:
        fields["baseline_shape"] = str(opts["baseline_shape"])
    if "pop_size" not in fields and ("rct_pool" in fields or "os_pool" in fields):
        base = SCENARIOS[int(key)]
        fields["pop_size"] = fields.get("rct_pool", base.rct_pool) + fields.get("os_pool", base.os_pool)
    try:
        return replace(SCENARIOS[int(key)], tau=tau, seed=seed, **fields)
    except ValueError as err:
        raise UsageError(str(err)) from None


# -- output -----------------------------------------------------------------

def _stamp(seed: int, digest: str) -> str:
    return f"# acwsurv {__version__} seed={seed} config={digest}\n"


def _write(out_dir: Path, name: str, seed: int, digest: str, body: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(_stamp(seed, digest))
        fh.write(body)
    return path


def _rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v))


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- commands ---------------------------------------------------------------

def cmd_estimate(args) -> int:
    opts = _merged(args, _read_config(args.config))
    if getattr(args, "force_bootstrap", False) and not int(opts.get("bootstrap", 0) or 0):
        opts["bootstrap"] = 200
    config, seed = build_config(opts)
    if not args.input:
        raise UsageError("--input is required")
    data = ingest_csv(args.input)
    config.estimand.check_support(data)
    result = run_pipeline(data, config)
    boot = None
    if config.bootstrap:
        boot = bootstrap(data, config, config.bootstrap, seed, threads=_threads(args),
                         point=result)
    digest = _digest({"config": config.to_dict(), "seed": seed})
    spec = config.estimand
    grid = np.r_[0.0, evaluation_grid(data, horizon=spec.horizon)]
    grid = np.unique(grid)
    curve_rows = []
    for name in config.estimators:
        for arm in (True, False):
            curve = result.curves[(name, arm)].curve
            for t, v in zip(grid, curve(grid)):
                curve_rows.append([name, int(arm), _fmt(t), _fmt(v)])
    est_rows = []
    for name, (mu1, mu0, theta) in result.estimates.items():
        if boot is None:
            se = lo = hi = ""
        else:
            res = boot[(name, "theta")]
            se, lo, hi = _fmt(res.se), _fmt(res.ci_low), _fmt(res.ci_high)
        est_rows.append([name, spec.kind.value, _fmt(spec.tau), _fmt(theta), se, lo, hi,
                         _fmt(mu1), _fmt(mu0)])
    out = Path(args.out_dir)
    _write(out, "curves.csv", seed, digest,
           _rows_to_csv(["method", "arm", "t", "value"], curve_rows))
    _write(out, "estimates.csv", seed, digest,
           _rows_to_csv(["method", "estimand", "tau", "point", "se", "ci_low", "ci_high",
                         "arm1", "arm0"], est_rows))
    if result.clamped:
        logger.info("ACW2: %d negative hazard increments clamped to 0", result.clamped)
    print(f"wrote {out / 'curves.csv'} and {out / 'estimates.csv'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    opts = _merged(args, _read_config(args.config))
    config, seed = build_config(opts)
    reps = _number(opts.get("reps", 200), int, "reps")
    if reps < 2:
        raise UsageError("reps must be >= 2")
    if "bootstrap" not in opts:
        config = replace(config, bootstrap=50)
    b = config.bootstrap
    scenario = _scenario(opts, config.estimand.tau, seed)
    if config.estimand.kind is not EstimandKind.RMST_DIFF:
        raise UsageError("simulation truth is available for RmstDiff only")
    report = run_mc_study(scenario, None, None, reps, b, seed, config, threads=_threads(args))
    digest = _digest({"config": config.to_dict(), "scenario": scenario.__dict__,
                      "reps": reps, "seed": seed})
    out = Path(args.out_dir)
    _write(out, "mc_report.csv", seed, digest, report.to_csv())
    if args.replicates:
        _write(out, "replicates.csv", seed, digest, report.replicates_csv())
    print(f"wrote {out / 'mc_report.csv'} ({len(report.estimators)} estimators, "
          f"{report.reps} replicates, {report.failures} failed)")
    return EXIT_OK


def cmd_truth(args) -> int:
    opts = _merged(args, _read_config(args.config))
    seed = _number(opts.get("seed", 0), int, "seed")
    tau = _number(opts.get("tau", 20.0), float, "tau")
    n_mc = _number(opts.get("n_mc", 10**6), int, "n_mc")
    if n_mc < 2:
        raise UsageError("n_mc must be >= 2")
    # tau only enters the integral; the scenario supplies the covariate models
    scenario = _scenario(opts, tau if tau > 0 else 1.0, seed)
    theta, se, mu1, mu0 = true_ate(scenario.truth, tau, n_mc, np.random.default_rng(seed),
                                   scenario.baseline_shape)
    digest = _digest({"scenario": scenario.__dict__, "tau": tau, "n_mc": n_mc, "seed": seed})
    body = _rows_to_csv(["scenario", "tau", "n_mc", "theta", "mc_se", "mu1", "mu0"],
                        [[scenario.name, _fmt(tau), n_mc, _fmt(theta), _fmt(se),
                          _fmt(mu1), _fmt(mu0)]])
    path = _write(Path(args.out_dir), "truth.csv", seed, digest, body)
    print(f"theta={theta:.6f} (MC se {se:.2g}); wrote {path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    opts = _merged(args, _read_config(args.config))
    seed = _number(opts.get("seed", 0), int, "seed")
    scenario = _scenario(opts, 20.0, seed)
    data = generate_replicate(scenario, None, np.random.default_rng(seed))
    digest = _digest({"scenario": scenario.__dict__, "seed": seed})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "data.csv"
    write_csv(data, path, header_comment=_stamp(seed, digest)[2:-1])
    print(f"wrote {path} (n={data.n}, m={data.m})")
    return EXIT_OK


def _threads(args) -> int:
    t = getattr(args, "threads", None)
    return max(1, int(t)) if t else (os.cpu_count() or 1)


# -- parser -----------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with key = value settings")
    p.add_argument("--out-dir", default=".", help="directory for output files")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker processes (default: logical cores)")
    p.add_argument("-v", "--verbose", action="store_true")


def _estimation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--estimators", help=f"comma-separated subset of {','.join(ESTIMATOR_NAMES)}")
    p.add_argument("--estimand", help="SurvDiffAt, RmstDiff, RmtlRatio or QuantileDiff")
    p.add_argument("--tau", type=float, help="time horizon (quantile level for QuantileDiff)")
    p.add_argument("--basis-degree", dest="basis_degree", type=int)
    p.add_argument("--penalty-epsilon", dest="penalty_epsilon",
                   help="SCAD epsilon for the non-sieve models, 'cv' or 'none'")
    p.add_argument("--cv", dest="penalty_epsilon", action="store_const", const="cv",
                   help="shorthand for --penalty-epsilon cv")
    p.add_argument("--weighting", choices=("calibration", "ipsw"))
    p.add_argument("--bootstrap", type=int, help="bootstrap replicates B (0 = none)")
    p.add_argument("--ci", choices=("normal", "percentile"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acwsurv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"acwsurv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (("estimate", "estimate curves and effects from a CSV"),
                           ("bootstrap", "estimate with bootstrap standard errors")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _estimation_flags(p)
        p.add_argument("--input", help="combined RCT + OS CSV file")
        p.set_defaults(func=cmd_estimate, force_bootstrap=name == "bootstrap")

    p = sub.add_parser("simulate", help="Monte Carlo study for one scenario")
    _common(p)
    _estimation_flags(p)
    p.add_argument("--scenario", help="1-4")
    p.add_argument("--reps", type=int)
    p.add_argument("--replicates", action="store_true", help="also write replicates.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("truth", help="true RMST difference by Monte Carlo integration")
    _common(p)
    p.add_argument("--scenario", help="1-4")
    p.add_argument("--tau", type=float)
    p.add_argument("--n-mc", dest="n_mc", type=int)
    p.set_defaults(func=cmd_truth)

    p = sub.add_parser("generate", help="write one simulated dataset as CSV")
    _common(p)
    p.add_argument("--scenario", help="1-4")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConvergenceError, BootstrapError, DegenerateCurveError) as err:
        print(f"error: fit did not converge: {err}", file=sys.stderr)
        return EXIT_FIT
    except (UsageError, DataError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
