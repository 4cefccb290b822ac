"""Cox proportional hazards: Newton fitting, Breslow baseline, prediction.

Ties use the Breslow approximation throughout. A SCAD penalty can be added;
it is handled by a local quadratic approximation inside Newton.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .basis import (ZERO_THRESHOLD, Basis, BasisSpec, ScadSpec, lqa_weights,
                    resolve_epsilon, scad_derivative, scad_penalty)
from .data import CombinedDataset, ConvergenceError, DataError, StepSurvival

GRAD_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 30
RIDGE = 1e-10
# Smallest information eigenvalue at the optimum, relative to the largest at
# beta = 0, below which the likelihood is treated as monotone.
# |beta| beyond this in a failed fit indicates a monotone likelihood
DIVERGENT_COEF = 20.0
MIN_INFO_RATIO = 1e-6


class Target(enum.Enum):
    EVENT = "event"
    CENSORING = "censoring"


class _RiskSets:
    """Sorted data and tie-group bookkeeping reused across Newton steps."""

    def __init__(self, time, event, z):
        time = np.asarray(time, dtype=float)
        event = np.asarray(event, dtype=bool)
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        order = np.argsort(time, kind="stable")
        self.time = time[order]
        self.event = event[order]
        self.z = z[order]
        self.n, self.k = self.z.shape
        uniq, first = np.unique(self.time, return_index=True)
        group = np.searchsorted(uniq, self.time)
        d = np.bincount(group, weights=self.event.astype(float), minlength=len(uniq))
        has = d > 0
        self.event_times = uniq[has]
        self.first = first[has]
        self.d = d[has]
        self.zsum_events = self.z[self.event].sum(axis=0)
        self.zz = (self.z[:, :, None] * self.z[:, None, :]).reshape(self.n, -1)

    @property
    def n_events(self) -> int:
        return int(self.d.sum())

    def _rev(self, a):
        return np.cumsum(a[::-1], axis=0)[::-1]

    def evaluate(self, beta, order: int = 2):
        """Log partial likelihood and (optionally) its gradient and Hessian."""
        eta = self.z @ beta
        c = eta.max() if self.n else 0.0
        w = np.exp(eta - c)
        s0 = self._rev(w)[self.first]
        with np.errstate(divide="ignore"):
            ll = float(eta[self.event].sum() - np.dot(self.d, np.log(s0) + c))
        if order == 0:
            return ll, None, None
        s1 = self._rev(w[:, None] * self.z)[self.first]
        mean = s1 / s0[:, None]
        grad = self.zsum_events - self.d @ mean
        if order == 1:
            return ll, grad, None
        s2 = self._rev(w[:, None] * self.zz)[self.first] / s0[:, None]
        s2 = s2.reshape(-1, self.k, self.k)
        hess = -(np.einsum("g,gij->ij", self.d, s2)
                 - np.einsum("g,gi,gj->ij", self.d, mean, mean))
        return ll, grad, hess

    def breslow_jumps(self, beta):
        eta = self.z @ beta
        c = eta.max() if self.n else 0.0
        s0 = self._rev(np.exp(eta - c))[self.first]
        if np.any(s0 <= 0):
            raise RuntimeError("empty risk set at an event time")
        return self.event_times, self.d * np.exp(-c) / s0


def cox_partial_loglik(beta, time, event, z) -> float:
    """Breslow log partial likelihood."""
    return _RiskSets(time, event, z).evaluate(np.atleast_1d(beta), order=0)[0]


def cox_score(beta, time, event, z) -> np.ndarray:
    """Analytic gradient of :func:`cox_partial_loglik`."""
    return _RiskSets(time, event, z).evaluate(np.atleast_1d(beta), order=1)[1]


def cox_hessian(beta, time, event, z) -> np.ndarray:
    return _RiskSets(time, event, z).evaluate(np.atleast_1d(beta), order=2)[2]


@dataclass
class NewtonResult:
    coef: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    objective: float
    diagnostic: str = ""


def penalized_newton(evaluate, k: int, eps: float = 0.0, b: float = 3.7,
                     start=None, unpenalized=(), tol: float = GRAD_TOL,
                     max_iter: int = MAX_ITER) -> NewtonResult:
    """Maximize ``f(c) - sum_j p_eps(|c_j|)`` by Newton with step-halving.

    ``evaluate(c, order)`` returns ``(f, grad, hess)``. Indices listed in
    ``unpenalized`` (e.g. an intercept) are never shrunk. With ``eps > 0`` the
    SCAD term enters through its local quadratic approximation and
    coefficients falling below ``ZERO_THRESHOLD`` are fixed at zero. Each
    iteration first tries a full Newton step with the exact penalty
    curvature, which converges quadratically where the LQA step crawls
    (coefficients inside ``(0, eps)``); the LQA step is the fallback.
    """
    coef = np.zeros(k) if start is None else np.array(start, dtype=float)
    penalized = np.ones(k, bool)
    penalized[list(unpenalized)] = False
    active = np.ones(k, bool)

    def objective(c):
        f = evaluate(c, 0)[0]
        if eps > 0:
            f -= float(np.sum(scad_penalty(c[penalized], eps, b)))
        return f

    def pen_grad(c, g):
        g = g.copy()
        if eps > 0:
            g[penalized] -= scad_derivative(c[penalized], eps, b) * np.sign(c[penalized])
        return g

    if eps > 0:
        small = penalized & (np.abs(coef) < ZERO_THRESHOLD)
        coef[small] = 0.0
        active &= ~small

    f, g, H = evaluate(coef, 2)
    obj = objective(coef)
    gnorm = np.inf
    it = 0
    diag = ""
    for it in range(1, max_iter + 1):
        gp = pen_grad(coef, g)
        gnorm = float(np.max(np.abs(gp[active]))) if active.any() else 0.0
        if not np.isfinite(obj):
            diag = "non-finite objective"
            break
        if gnorm <= tol:
            return NewtonResult(coef, True, it - 1, gnorm, obj)
        idx = np.flatnonzero(active)
        A = -H[np.ix_(idx, idx)]
        if eps > 0:
            lq = np.zeros(k)
            lq[penalized] = lqa_weights(coef[penalized], eps, b)
            A = A + np.diag(lq[idx])
        A = A + RIDGE * np.eye(len(idx))
        try:
            step = np.linalg.solve(A, gp[idx])
            if not np.all(np.isfinite(step)) or np.dot(step, gp[idx]) <= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = gp[idx] / max(1.0, float(np.abs(np.diag(A)).max()))
        t = 1.0
        improved = False
        if eps > 0:
            trial, new_obj = _exact_step(coef, gp, H, idx, penalized, eps, b, objective)
            improved = trial is not None and new_obj >= obj - 1e-12 * max(1.0, abs(obj))
        for _ in range(0 if improved else MAX_HALVINGS + 1):
            trial = coef.copy()
            trial[idx] += t * step
            if eps > 0:
                small = penalized & (np.abs(trial) < ZERO_THRESHOLD)
                trial[small] = 0.0
            new_obj = objective(trial)
            if np.isfinite(new_obj) and new_obj >= obj - 1e-12 * max(1.0, abs(obj)):
                improved = True
                break
            t *= 0.5
        if not improved:
            diag = "step-halving failed to improve the objective"
            break
        coef = trial
        if eps > 0:
            active &= ~(penalized & (coef == 0.0))
        obj = new_obj
        f, g, H = evaluate(coef, 2)
        if eps > 0:
            coef, obj, changed = _zero_by_kkt(coef, g, obj, objective, penalized & active, eps)
            if changed:
                active &= coef != 0.0
                f, g, H = evaluate(coef, 2)
    else:
        diag = f"no convergence within {max_iter} iterations"
    gp = pen_grad(coef, g)
    gnorm = float(np.max(np.abs(gp[active]))) if active.any() else 0.0
    if gnorm <= tol:
        return NewtonResult(coef, True, it, gnorm, obj)
    return NewtonResult(coef, False, it, gnorm, obj, diag or "gradient above tolerance")


def _scad_curvature(coef, eps: float, b: float) -> np.ndarray:
    """Second derivative of the SCAD penalty away from its kinks."""
    c = np.abs(coef)
    return np.where((c > eps) & (c < b * eps), -1.0 / (b - 1.0), 0.0)


def _exact_step(coef, gp, H, idx, penalized, eps, b, objective):
    """Full Newton step using the true penalty curvature, or (None, None).

    Accepted by the caller only when it raises the objective; it is refused
    when the system is not positive definite or a coefficient would change
    sign (the penalty is not smooth at zero).
    """
    curv = np.zeros(len(coef))
    curv[penalized] = _scad_curvature(coef[penalized], eps, b)
    A = -H[np.ix_(idx, idx)] + np.diag(curv[idx]) + RIDGE * np.eye(len(idx))
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None, None
    step = np.linalg.solve(L.T, np.linalg.solve(L, gp[idx]))
    trial = coef.copy()
    trial[idx] += step
    flips = penalized[idx] & (np.sign(trial[idx]) != np.sign(coef[idx]))
    if not np.all(np.isfinite(trial)) or flips.any():
        return None, None
    small = penalized & (np.abs(trial) < ZERO_THRESHOLD)
    trial[small] = 0.0
    return trial, objective(trial)


def _zero_by_kkt(coef, g, obj, objective, candidates, eps):
    """Set small coefficients to exactly zero where that is a better optimum.

    LQA only shrinks a coefficient geometrically, so one whose unpenalized
    score is below ``eps`` (zero satisfies the subgradient condition) would
    crawl towards zero. Such coefficients are zeroed jointly, or else one at
    a time, whenever that does not lower the penalized objective.
    """
    cand = np.flatnonzero(candidates & (coef != 0.0) & (np.abs(g) < eps))
    if cand.size == 0:
        return coef, obj, False
    tol = 1e-12 * max(1.0, abs(obj))
    trial = coef.copy()
    trial[cand] = 0.0
    new = objective(trial)
    if new >= obj - tol:
        return trial, new, True
    changed = False
    for j in cand[np.argsort(np.abs(coef[cand]))]:
        trial = coef.copy()
        trial[j] = 0.0
        new = objective(trial)
        if new >= obj - tol:
            coef, obj, changed = trial, new, True
    return coef, obj, changed


def penalized_start(time, event, z) -> np.ndarray:
    """Unpenalized estimate, or 0 when it diverged (SCAD is flat out there)."""
    free = fit_cox_arrays(time, event, z)
    return free.coef if free.converged else np.zeros(np.shape(z)[1])


def fit_cox_arrays(time, event, z, epsilon: float = 0.0, b: float = 3.7,
                   start=None) -> NewtonResult:
    """Maximize the (SCAD-penalized) Breslow partial likelihood."""
    rs = _RiskSets(time, event, z)
    if rs.n_events == 0:
        raise DataError("no qualifying events")
    if epsilon > 0 and start is None:
        start = penalized_start(time, event, z)
    res = penalized_newton(rs.evaluate, rs.k, epsilon, b, start=start)
    active = res.coef != 0.0 if epsilon > 0 else np.ones(rs.k, bool)
    if not res.converged and np.max(np.abs(res.coef), initial=0.0) > DIVERGENT_COEF:
        res.diagnostic = f"monotone likelihood: coefficients diverging ({res.diagnostic})"
    if res.converged and active.any():
        info = -rs.evaluate(res.coef)[2][np.ix_(active, active)]
        info0 = -rs.evaluate(np.zeros(rs.k))[2][np.ix_(active, active)]
        ev0 = np.linalg.eigvalsh(info0)
        # information already singular at 0 means a flat, unidentified
        # direction (e.g. a constant column), which leaves predictions unchanged
        identified = ev0[0] > MIN_INFO_RATIO * ev0[-1]
        collapsed = np.linalg.eigvalsh(info)[0] <= MIN_INFO_RATIO * ev0[-1]
        if (identified and collapsed) or np.max(np.abs(res.coef)) > DIVERGENT_COEF:
            res.converged = False
            res.diagnostic = "monotone likelihood: information matrix numerically singular"
    return res


def breslow_baseline(time, event, z, beta) -> StepSurvival:
    """Breslow cumulative baseline hazard as a step function.

    Jumps at each distinct qualifying event time by the number of events there
    over the risk-set sum of ``exp(z @ beta)``.
    """
    rs = _RiskSets(time, event, z)
    times, jumps = rs.breslow_jumps(np.atleast_1d(np.asarray(beta, dtype=float)))
    return StepSurvival(times, np.cumsum(jumps), 0.0)


@dataclass(frozen=True, eq=False)
class CoxFit:
    """Fitted arm-specific Cox model for events or censoring."""

    beta: np.ndarray
    baseline: StepSurvival
    arm: bool
    target: Target
    converged: bool
    iterations: int
    final_gradient_norm: float
    basis: Basis
    epsilon: float = 0.0

    def linear_predictor(self, z) -> np.ndarray:
        """``z`` is an already-expanded design."""
        return np.asarray(z, dtype=float) @ self.beta

    def cumulative_hazard(self, x, t):
        """Lambda_0(t) * exp(beta' g(x)) for raw covariates ``x``."""
        return self.baseline(t) * np.exp(self.basis(x) @ self.beta)


def predict_survival(fit: CoxFit, x, t):
    """exp{-Lambda_0(t) exp(beta' g(x))}."""
    return np.exp(-fit.cumulative_hazard(x, t))


class CoxTask:
    """Cross-validation task for a penalized Cox fit."""

    def __init__(self, time, event, z, b: float = 3.7):
        self.time, self.event, self.z, self.b = time, event, z, b
        self.n_units = len(time)
        self._starts = {}

    def fit(self, train, epsilon):
        args = (self.time[train], self.event[train], self.z[train])
        start = None
        if epsilon > 0:
            key = train.tobytes()
            if key not in self._starts:
                self._starts[key] = penalized_start(*args)
            start = self._starts[key]
        res = fit_cox_arrays(*args, epsilon, self.b, start)
        if not res.converged:
            raise ConvergenceError("cox cv", res.diagnostic)
        return res.coef

    def score(self, beta, test):
        if not self.event[test].any():
            return None
        return cox_partial_loglik(beta, self.time[test], self.event[test], self.z[test])

    def score_scale(self):
        g = cox_score(np.zeros(self.z.shape[1]), self.time, self.event, self.z)
        return float(np.max(np.abs(g)))


def _arm_rows(data: CombinedDataset, arm: bool) -> np.ndarray:
    return np.flatnonzero(data.is_rct & (data.a == bool(arm)))


def fit_cox(data: CombinedDataset, arm: bool, target: Target | str = Target.EVENT,
            design: BasisSpec | Basis = BasisSpec(), penalty: ScadSpec | None = None,
            strict: bool = True) -> CoxFit:
    """Fit the arm-specific Cox model on trial rows.

    ``target="censoring"`` swaps the event indicator. With ``strict`` a
    failed fit raises :class:`ConvergenceError`; otherwise the returned fit
    has ``converged=False``.
    """
    target = Target(target)
    basis = design if isinstance(design, Basis) else Basis.for_data(design, data)
    rows = _arm_rows(data, arm)
    time = data.u[rows]
    event = data.event[rows] if target is Target.EVENT else ~data.event[rows]
    name = f"{target.value} cox arm={int(arm)}"
    if not event.any():
        raise DataError(f"{name}: no qualifying events")
    z = basis(data.x[rows])
    eps = resolve_epsilon(CoxTask(time, event, z, penalty.b if penalty else 3.7), penalty)
    b = penalty.b if penalty else 3.7
    res = fit_cox_arrays(time, event, z, eps, b)
    if strict and not res.converged:
        raise ConvergenceError(name, res.diagnostic, best=res.coef)
    baseline = breslow_baseline(time, event, z, res.coef)
    return CoxFit(res.coef, baseline, bool(arm), target, res.converged, res.iterations,
                  res.grad_norm, basis, eps)
