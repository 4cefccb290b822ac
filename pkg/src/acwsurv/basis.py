"""Power-series sieve bases and SCAD penalty primitives."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Any, Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BasisSpec:
    """Power-series sieve of maximum total degree ``degree``.

    ``standardize`` centers and scales each raw covariate by trial-sample
    moments before expansion.
    """

    degree: int = 1
    include_interactions: bool = True
    standardize: bool = False

    def __post_init__(self):
        if int(self.degree) < 1:
            raise ValueError("degree must be >= 1")


def _exponents(p: int, spec: BasisSpec) -> list[tuple[int, ...]]:
    """Multi-indices in column order.

    Within each total degree: mixed monomials in lexicographic index order,
    then pure powers. Degree one is just the identity.
    """
    out: list[tuple[int, ...]] = []
    for d in range(1, spec.degree + 1):
        combos = list(itertools.combinations_with_replacement(range(p), d))
        if d == 1:
            mixed, pure = combos, []
        else:
            mixed = [c for c in combos if len(set(c)) > 1]
            pure = [c for c in combos if len(set(c)) == 1]
            if not spec.include_interactions:
                mixed = []
        for c in mixed + pure:
            e = [0] * p
            for k in c:
                e[k] += 1
            out.append(tuple(e))
    return out


def basis_size(p: int, spec: BasisSpec) -> int:
    return len(_exponents(p, spec))


def expand(x, spec: BasisSpec) -> np.ndarray:
    """Expand raw covariates into sieve columns (no standardization).

    Accepts a single vector or a 2-d array of rows.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    p = X.shape[1]
    cols = []
    for e in _exponents(p, spec):
        col = np.ones(X.shape[0])
        for k, power in enumerate(e):
            if power:
                col = col * X[:, k] ** power
        cols.append(col)
    G = np.column_stack(cols) if cols else np.empty((X.shape[0], 0))
    return G[0] if single else G


@dataclass(frozen=True, eq=False)
class Basis:
    """A :class:`BasisSpec` bound to reference moments (the map g(.))."""

    spec: BasisSpec
    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, spec: BasisSpec, x_reference) -> "Basis":
        x_reference = np.atleast_2d(np.asarray(x_reference, dtype=float))
        p = x_reference.shape[1]
        if spec.standardize:
            center = x_reference.mean(axis=0)
            scale = x_reference.std(axis=0, ddof=1) if len(x_reference) > 1 else np.ones(p)
            scale = np.where(scale > 0, scale, 1.0)
        else:
            center, scale = np.zeros(p), np.ones(p)
        return cls(spec, center, scale)

    @classmethod
    def for_data(cls, spec: BasisSpec, data) -> "Basis":
        return cls.fit(spec, data.x[data.is_rct])

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return expand((x - self.center) / self.scale, self.spec)

    @property
    def size(self) -> int:
        return basis_size(len(self.center), self.spec)


# -- SCAD -----------------------------------------------------------------

@dataclass(frozen=True)
class ScadSpec:
    """SCAD penalty settings.

    ``epsilon=None`` selects the tuning parameter by ``cv_folds``-fold cross
    validation over ``epsilon_grid`` (or a default grid when that is None).
    """

    b: float = 3.7
    epsilon: float | None = None
    cv_folds: int = 5
    epsilon_grid: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.b > 2:
            raise ValueError("SCAD requires b > 2")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.epsilon_grid is not None and any(e < 0 for e in self.epsilon_grid):
            raise ValueError("epsilon grid must be nonnegative")

    def with_epsilon(self, epsilon: float) -> "ScadSpec":
        return ScadSpec(self.b, float(epsilon), self.cv_folds, self.epsilon_grid, self.seed)


def scad_derivative(lambda_abs, spec_or_eps, b: float = 3.7):
    """SCAD derivative q_eps(|lambda|).

    Equals ``eps`` on ``[0, eps)``, decays linearly to zero on ``[eps, b*eps]``
    and vanishes beyond.
    """
    if isinstance(spec_or_eps, ScadSpec):
        eps, b = spec_or_eps.epsilon, spec_or_eps.b
    else:
        eps = spec_or_eps
    lam = np.abs(np.asarray(lambda_abs, dtype=float))
    out = np.where(lam < eps, eps, np.clip((b * eps - lam) / (b - 1.0), 0.0, eps))
    return out if out.ndim else float(out)


def scad_penalty(lambda_abs, eps: float, b: float = 3.7):
    """SCAD penalty p_eps(|lambda|), the antiderivative of :func:`scad_derivative`."""
    lam = np.abs(np.asarray(lambda_abs, dtype=float))
    mid = (2 * b * eps * lam - lam ** 2 - eps ** 2) / (2 * (b - 1))
    out = np.where(lam <= eps, eps * lam,
                   np.where(lam <= b * eps, mid, (b + 1) * eps ** 2 / 2))
    return out if out.ndim else float(out)


def lqa_weights(coef, eps: float, b: float) -> np.ndarray:
    """Diagonal of the local quadratic approximation q(|c|)/|c| (Fan & Li)."""
    c = np.abs(np.asarray(coef, dtype=float))
    with np.errstate(divide="ignore"):
        return np.where(c > 0, scad_derivative(c, eps, b) / np.where(c > 0, c, 1.0), np.inf)


ZERO_THRESHOLD = 1e-6


# -- cross validation -----------------------------------------------------

class PenalizedTask(Protocol):
    """A penalized fitting problem that can be cross validated.

    ``fit`` returns an opaque model for the training units; ``score`` returns
    the held-out criterion (larger is better) or ``None`` when the fold is
    degenerate (e.g. no events).
    """

    n_units: int

    def fit(self, train: np.ndarray, epsilon: float) -> Any: ...

    def score(self, model: Any, test: np.ndarray) -> float | None: ...

    def score_scale(self) -> float: ...


def default_epsilon_grid(score_scale: float, n_points: int = 10) -> tuple[float, ...]:
    """Log-spaced grid on ``[1e-3, 1] * score_scale``."""
    if not score_scale > 0:
        return (0.0,)
    return tuple(float(v) for v in np.geomspace(1e-3, 1.0, n_points) * score_scale)


def cv_folds(n_units: int, k: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, n_units, k])
    labels = rng.permutation(np.arange(n_units) % k)
    return [np.flatnonzero(labels == j) for j in range(k)]


def select_epsilon(task: PenalizedTask, spec: ScadSpec) -> float:
    """Pick the grid value with the best mean held-out criterion.

    Ties (to 1e-12 relative) go to the larger epsilon.
    """
    grid = spec.epsilon_grid
    if grid is None:
        grid = default_epsilon_grid(task.score_scale())
    grid = sorted(float(e) for e in grid)
    if not grid:
        raise ValueError("epsilon grid is empty")
    if len(grid) == 1:
        return grid[0]
    if spec.cv_folds < 2:
        raise ValueError("cv_folds must be >= 2")
    folds = cv_folds(task.n_units, spec.cv_folds, spec.seed)
    all_idx = np.arange(task.n_units)
    means = []
    any_scored = False
    for eps in grid:
        scores = []
        for test in folds:
            train = np.setdiff1d(all_idx, test, assume_unique=True)
            try:
                model = task.fit(train, eps)
            except (RuntimeError, ValueError, np.linalg.LinAlgError) as err:
                logger.debug("select_epsilon: %s fit failed at eps=%g: %s",
                             type(task).__name__, eps, err)
                scores.append(-np.inf)
                continue
            s = task.score(model, test)
            if s is None:
                continue
            any_scored = True
            scores.append(s)
        means.append(np.mean(scores) if scores else -np.inf)
    if not any_scored:
        raise ValueError("cross validation failed: every fold is degenerate")
    means = np.asarray(means)
    best = np.max(means)
    if not np.isfinite(best):
        raise ValueError("cross validation failed: no grid value could be fitted")
    tol = 1e-12 * max(1.0, abs(best))
    chosen = max(e for e, s in zip(grid, means) if s >= best - tol)
    logger.debug("select_epsilon: grid=%s scores=%s chosen=%g", grid, means, chosen)
    return chosen


def resolve_epsilon(task: PenalizedTask, spec: ScadSpec | None) -> float:
    """Epsilon from ``spec`` (0 when unpenalized, CV when unset)."""
    if spec is None:
        return 0.0
    if spec.epsilon is not None:
        return float(spec.epsilon)
    return select_epsilon(task, spec)
