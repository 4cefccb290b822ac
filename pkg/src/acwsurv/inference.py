"""Nonparametric two-sample bootstrap for the estimation pipeline."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import CombinedDataset, ConvergenceError, DataError
from .estimators import DegenerateCurveError
from .pipeline import QUANTITIES, EstimationConfig, run_pipeline

logger = logging.getLogger(__name__)

MAX_REDRAWS = 5
Z_975 = 1.959963984540054

# Failures that turn a replicate into a redraw rather than a crash.
REPLICATE_ERRORS = (ConvergenceError, DataError, DegenerateCurveError, ZeroDivisionError,
                    ValueError, np.linalg.LinAlgError, FloatingPointError)


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    point: float
    se: float
    ci_low: float
    ci_high: float
    b: int
    failures: int
    replicates: np.ndarray

    def covers(self, value: float) -> bool:
        return bool(self.ci_low <= value <= self.ci_high)


def _seed_tuple(seed) -> tuple[int, ...]:
    return tuple(int(s) for s in np.atleast_1d(seed))


def resample(data: CombinedDataset, rng: np.random.Generator) -> CombinedDataset:
    """Draw n trial rows and m observational rows with replacement, independently."""
    rct, os_ = data.rct, data.os
    rows = np.r_[rng.choice(rct, size=len(rct), replace=True),
                 rng.choice(os_, size=len(os_), replace=True)]
    return data.take(rows)


def replicate_estimates(data, config, seed, r, epsilons=None):
    """Estimates of replicate ``r``: ``{name: (mu1, mu0, theta)}`` or None.

    Depends only on ``(seed, r)``. A failing draw is replaced by a fresh one
    up to ``MAX_REDRAWS`` times.
    """
    base = _seed_tuple(seed)
    for attempt in range(MAX_REDRAWS + 1):
        rng = np.random.default_rng(np.random.SeedSequence(base + (r, attempt)))
        sample = resample(data, rng)
        try:
            with np.errstate(over="ignore"):
                return run_pipeline(sample, config, epsilons).estimates
        except REPLICATE_ERRORS as err:
            logger.debug("bootstrap replicate %d attempt %d failed: %s", r, attempt, err)
    return None


def _worker(args):
    return replicate_estimates(*args)


def summarize(point: float, reps: np.ndarray, b: int, failures: int,
              ci: str = "normal") -> BootstrapResult:
    reps = np.asarray(reps, dtype=float)
    se = float(np.std(reps, ddof=1)) if reps.size > 1 else float("nan")
    if ci == "percentile":
        lo, hi = np.percentile(reps, [2.5, 97.5])
    else:
        lo, hi = point - Z_975 * se, point + Z_975 * se
    return BootstrapResult(float(point), se, float(lo), float(hi), b, failures, reps)


def bootstrap(data: CombinedDataset, config: EstimationConfig, b: int, seed,
              threads: int = 1, point=None) -> dict:
    """Bootstrap every configured estimator.

    Returns ``{(name, quantity): BootstrapResult}`` with quantity in
    ``mu1``, ``mu0``, ``theta``. Penalty levels chosen on the full sample are
    reused in every replicate. ``point`` may pass a precomputed
    :class:`~acwsurv.pipeline.PipelineResult` for ``data``.
    """
    if b < 2:
        raise ValueError("bootstrap needs b >= 2")
    if point is None:
        point = run_pipeline(data, config)
    eps = point.epsilons
    jobs = [(data, config, seed, r, eps) for r in range(b)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_worker, jobs, chunksize=max(1, b // (4 * threads))))
    else:
        results = [_worker(j) for j in jobs]
    ok = [res for res in results if res is not None]
    failures = b - len(ok)
    if failures * 2 > b:
        raise BootstrapError(f"{failures} of {b} bootstrap replicates failed")
    out = {}
    for name, values in point.estimates.items():
        arr = np.array([res[name] for res in ok])
        for q, quantity in enumerate(QUANTITIES):
            out[(name, quantity)] = summarize(values[q], arr[:, q], b, failures, config.ci)
    return out
