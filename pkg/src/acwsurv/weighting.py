"""Calibration (entropy balancing), IPSW and propensity weights."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .basis import (ZERO_THRESHOLD, Basis, BasisSpec, ScadSpec, lqa_weights,
                    resolve_epsilon, scad_derivative)
from .cox import RIDGE, _scad_curvature, penalized_newton
from .data import CombinedDataset, ConvergenceError, DataError

CAL_TOL = 1e-8
CAL_MAX_ITER = 200
LOGIT_TOL = 1e-8
# Fitted log-odds beyond this are treated as separation.
MAX_ABS_LOGIT = 15.0


class WeightKind(enum.Enum):
    CALIBRATION = "calibration"
    IPSW = "ipsw"
    PROPENSITY = "propensity"


@dataclass(frozen=True, eq=False)
class WeightFit:
    """Solution of a weighting model.

    For calibration/IPSW ``weights`` are normalized per-trial-subject weights.
    For the propensity model ``weights`` holds pi_hat for each subject's own
    arm and ``prob_treated`` holds pi_A(X).
    """

    kind: WeightKind
    coef: np.ndarray
    weights: np.ndarray
    residual_norm: float
    converged: bool
    prob_treated: np.ndarray | None = None
    epsilon: float = 0.0

    def arm_probability(self, arm: bool) -> np.ndarray:
        """pi_a(X) = a pi_A + (1 - a)(1 - pi_A)."""
        if self.prob_treated is None:
            raise ValueError("not a propensity fit")
        return self.prob_treated if arm else 1.0 - self.prob_treated


@dataclass(frozen=True)
class TargetMoments:
    gtilde: np.ndarray
    total_weight: float


def target_moments(data: CombinedDataset, design: BasisSpec | Basis) -> TargetMoments:
    """Design-weighted mean of g(X) over the observational rows."""
    basis = design if isinstance(design, Basis) else Basis.for_data(design, data)
    os_rows = data.os
    if len(os_rows) == 0:
        raise DataError("no OS rows")
    d = data.design_weight[os_rows]
    total = float(d.sum())
    if not total > 0:
        raise DataError("zero total design weight")
    G = basis(data.x[os_rows])
    return TargetMoments(d @ G / total, total)


# -- calibration ----------------------------------------------------------

def _softmax(G, lam):
    s = G @ lam
    return np.exp(s - logsumexp(s))


def _dual(G, gt):
    """Entropy-balancing dual: minimize log sum exp(G lam) - lam' gtilde."""
    def evaluate(lam, order):
        s = G @ lam
        lse = logsumexp(s)
        f = -(lse - lam @ gt)
        if order == 0:
            return f, None, None
        w = np.exp(s - lse)
        mean = w @ G
        grad = -(mean - gt)
        if order == 1:
            return f, grad, None
        Gc = G - mean
        hess = -(Gc.T * w) @ Gc
        return f, grad, hess
    return evaluate


def _balance_residual(G, w, gt) -> float:
    return float(np.max(np.abs(w @ G - gt))) if G.shape[1] else 0.0


def calibrate_arrays(G, gt, epsilon: float = 0.0, b: float = 3.7):
    """Return (lambda, weights, residual, converged, diagnostic)."""
    G = np.asarray(G, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if G.shape[1] != gt.shape[0]:
        raise DataError(f"dimension mismatch: g has {G.shape[1]} columns, target {gt.shape[0]}")
    res = penalized_newton(_dual(G, gt), G.shape[1], tol=CAL_TOL, max_iter=CAL_MAX_ITER)
    lam = res.coef
    w = _softmax(G, lam)
    resid = _balance_residual(G, w, gt)
    if epsilon <= 0:
        ok = res.converged and resid <= CAL_TOL
        return lam, w, resid, ok, res.diagnostic or ("" if ok else "residual above tolerance")
    return _penalized_calibration(G, gt, lam, epsilon, b)


def _penalized_calibration(G, gt, start, eps, b, max_iter=CAL_MAX_ITER):
    """Solve U(lam) + q_eps(|lam|) sign(lam) = 0 with LQA-damped Newton.

    U(lam) = sum_i exp(lam' g_i) (g_i - gtilde). The penalty enters with the
    sign that shrinks eta = -lam toward zero (U is increasing in lam, so the
    opposite sign would push coefficients away from zero). Convergence is
    judged on U^eps divided by sum_i exp(lam' g_i), the normalized scale.
    """
    D = G - gt
    lam = np.array(start, dtype=float)
    lam[np.abs(lam) < ZERO_THRESHOLD] = 0.0

    def residual(l):
        """Penalized equation on nonzero coordinates, KKT excess on zero ones."""
        e = np.exp(G @ l)
        U = e @ D
        F = U + scad_derivative(l, eps, b) * np.sign(l)
        zero = l == 0.0
        # slack: the change in U a coefficient below the zero threshold could make
        slack = ZERO_THRESHOLD * np.abs(e @ (D[:, zero] * G[:, zero]))
        F[zero] = np.sign(U[zero]) * np.maximum(np.abs(U[zero]) - eps - slack, 0.0)
        return F, e

    def merit_of(F):
        m = float(F @ F)
        return m if np.isfinite(m) else np.inf

    F, e = residual(lam)
    merit = merit_of(F)
    diag = "no convergence"
    converged = False
    for _ in range(max_iter):
        scale = e.sum()
        if np.max(np.abs(F), initial=0.0) / scale <= CAL_TOL:
            converged, diag = True, ""
            break
        # a zero coordinate violating its KKT bound re-enters with the sign
        # the penalized equation requires
        wake = (lam == 0.0) & (F != 0.0)
        if wake.any() and np.all(np.abs(F[lam != 0.0]) / scale <= 1e-4):
            lam = lam.copy()
            lam[wake] = -np.sign(F[wake]) * 10 * ZERO_THRESHOLD
            F, e = residual(lam)
            merit = merit_of(F)
            continue
        idx = np.flatnonzero(lam != 0.0)
        if idx.size == 0:
            diag = "all coefficients zero but KKT violated"
            break
        JU = (D[:, idx].T * e) @ G[:, idx] + RIDGE * scale * np.eye(len(idx))
        accepted = False
        # exact Jacobian first (fast near the solution; coordinates it would
        # push across zero stop at zero); LQA with step halving as the fallback
        for diag_pen, halvings, exact in ((_scad_curvature(lam[idx], eps, b), 1, True),
                                          (lqa_weights(lam[idx], eps, b), 31, False)):
            try:
                step = -np.linalg.solve(JU + np.diag(diag_pen), F[idx])
            except np.linalg.LinAlgError:
                continue
            t = 1.0
            for _ in range(halvings):
                trial = lam.copy()
                trial[idx] += t * step
                if exact:
                    crossed = np.sign(trial[idx]) != np.sign(lam[idx])
                    trial[idx[crossed]] = 0.0
                trial[np.abs(trial) < ZERO_THRESHOLD] = 0.0
                F_t, e_t = residual(trial)
                m_t = merit_of(F_t)
                if m_t < merit:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                lam, F, e, merit = trial, F_t, e_t, m_t
                break
        # zero coordinates whose KKT bound holds at zero, if that does not hurt
        zeroed = False
        for j in idx[np.argsort(np.abs(lam[idx]))]:
            if lam[j] == 0.0:
                continue
            trial = lam.copy()
            trial[j] = 0.0
            F_t, e_t = residual(trial)
            m_t = merit_of(F_t)
            if F_t[j] == 0.0 and m_t <= merit:
                lam, F, e, merit, zeroed = trial, F_t, e_t, m_t, True
        if not (accepted or zeroed):
            wake = (lam == 0.0) & (F != 0.0)
            if not wake.any():
                diag = "damping failed"
                break
            lam = lam.copy()
            lam[wake] = -np.sign(F[wake]) * 10 * ZERO_THRESHOLD
            F, e = residual(lam)
            merit = merit_of(F)
    w = e / e.sum()
    return lam, w, _balance_residual(G, w, gt), converged, diag


class CalibrationTask:
    """Cross-validation task; held-out criterion is minus the balance residual."""

    def __init__(self, G, gt, b: float = 3.7):
        self.G, self.gt, self.b = G, gt, b
        self.n_units = G.shape[0]

    def fit(self, train, epsilon):
        lam, _, _, ok, diag = calibrate_arrays(self.G[train], self.gt, epsilon, self.b)
        if not ok:
            raise ConvergenceError("calibration cv", diag)
        return lam

    def score(self, lam, test):
        w = _softmax(self.G[test], lam)
        return -_balance_residual(self.G[test], w, self.gt)

    def score_scale(self):
        return float(np.max(np.abs((self.G - self.gt).sum(axis=0))))


def solve_calibration(data: CombinedDataset, design: BasisSpec | Basis,
                      targets: TargetMoments | None = None,
                      penalty: ScadSpec | None = None) -> WeightFit:
    """Entropy-balancing calibration weights for the trial rows.

    Raises :class:`ConvergenceError` (carrying the best residual) when the
    target moments cannot be matched, typically because they lie outside the
    convex hull of the trial sample.
    """
    basis = design if isinstance(design, Basis) else Basis.for_data(design, data)
    if targets is None:
        targets = target_moments(data, basis)
    rct = data.rct
    if len(rct) == 0:
        raise DataError("no RCT rows")
    G = basis(data.x[rct])
    b = penalty.b if penalty else 3.7
    eps = resolve_epsilon(CalibrationTask(G, targets.gtilde, b), penalty)
    lam, w, resid, ok, diag = calibrate_arrays(G, targets.gtilde, eps, b)
    if not ok:
        raise ConvergenceError("calibration", f"{diag}; best residual {resid:.3g}", best=resid)
    return WeightFit(WeightKind.CALIBRATION, lam, w, resid, ok, epsilon=eps)


# -- logistic -------------------------------------------------------------

def _logistic_eval(Z, y, cw):
    def evaluate(c, order):
        eta = Z @ c
        ll = float(cw @ (y * log_expit(eta) + (1 - y) * log_expit(-eta)))
        if order == 0:
            return ll, None, None
        p = expit(eta)
        grad = Z.T @ (cw * (y - p))
        if order == 1:
            return ll, grad, None
        hess = -(Z.T * (cw * p * (1 - p))) @ Z
        return ll, grad, hess
    return evaluate


def logistic_loglik(coef, Z, y, case_weights=None) -> float:
    Z = np.asarray(Z, float)
    cw = np.ones(len(y)) if case_weights is None else np.asarray(case_weights, float)
    return _logistic_eval(Z, np.asarray(y, float), cw)(np.asarray(coef, float), 0)[0]


def logistic_score(coef, Z, y, case_weights=None) -> np.ndarray:
    Z = np.asarray(Z, float)
    cw = np.ones(len(y)) if case_weights is None else np.asarray(case_weights, float)
    return _logistic_eval(Z, np.asarray(y, float), cw)(np.asarray(coef, float), 1)[1]


def _logistic_design(rows, intercept):
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    return np.column_stack([np.ones(len(rows)), rows]) if intercept else rows


def _fit_logistic_eps(Z, y, cw, eps, b, intercept, start=None):
    unpen = (0,) if intercept else ()
    if eps > 0 and start is None:
        start = _fit_logistic_eps(Z, y, cw, 0.0, b, intercept)
    res = penalized_newton(_logistic_eval(Z, y, cw), Z.shape[1], eps, b, start=start,
                           unpenalized=unpen, tol=LOGIT_TOL)
    eta = Z @ res.coef
    if np.max(np.abs(eta)) > MAX_ABS_LOGIT:
        raise ConvergenceError("logistic", "separation: fitted probabilities numerically 0 or 1",
                               best=res.coef)
    if not res.converged:
        raise ConvergenceError("logistic", res.diagnostic, best=res.coef)
    return res.coef


class LogisticTask:
    def __init__(self, Z, y, cw, b, intercept):
        self.Z, self.y, self.cw, self.b, self.intercept = Z, y, cw, b, intercept
        self.n_units = len(y)
        self._starts = {}

    def fit(self, train, epsilon):
        args = (self.Z[train], self.y[train], self.cw[train])
        start = None
        if epsilon > 0:
            key = train.tobytes()
            if key not in self._starts:
                self._starts[key] = _fit_logistic_eps(*args, 0.0, self.b, self.intercept)
            start = self._starts[key]
        return _fit_logistic_eps(*args, epsilon, self.b, self.intercept, start)

    def score(self, coef, test):
        return logistic_loglik(coef, self.Z[test], self.y[test], self.cw[test])

    def score_scale(self):
        c0 = np.zeros(self.Z.shape[1])
        if self.intercept:
            p = np.clip(np.average(self.y, weights=self.cw), 1e-12, 1 - 1e-12)
            c0[0] = np.log(p / (1 - p))
        g = logistic_score(c0, self.Z, self.y, self.cw)
        return float(np.max(np.abs(g[1:] if self.intercept else g)))


def fit_logistic(rows, labels, case_weights=None, penalty: ScadSpec | None = None,
                 intercept: bool = True) -> np.ndarray:
    """(SCAD-penalized) logistic regression by Newton with step-halving.

    Returns the coefficient vector, intercept first when ``intercept``.
    """
    y = np.asarray(labels, dtype=float)
    if y.size == 0 or y.min() == y.max():
        raise DataError("logistic regression needs both label classes")
    Z = _logistic_design(rows, intercept)
    cw = np.ones(len(y)) if case_weights is None else np.asarray(case_weights, float)
    b = penalty.b if penalty else 3.7
    eps = resolve_epsilon(LogisticTask(Z, y, cw, b, intercept), penalty)
    return _fit_logistic_eps(Z, y, cw, eps, b, intercept)


def ipsw_weights(data: CombinedDataset, design: BasisSpec | Basis,
                 penalty: ScadSpec | None = None) -> WeightFit:
    """Normalized inverse-probability-of-sampling weights.

    A logistic membership model (label = observational) is fitted on the
    union sample with OS rows carrying their design weights; each trial
    subject gets p_i / (1 - p_i) with p_i = P(OS | X_i), normalized to one.
    """
    basis = design if isinstance(design, Basis) else Basis.for_data(design, data)
    if data.n == 0 or data.m == 0:
        raise DataError("IPSW needs both RCT and OS rows")
    Gall = basis(data.x)
    label = (~data.is_rct).astype(float)
    cw = np.where(data.is_rct, 1.0, data.design_weight)
    try:
        coef = fit_logistic(Gall, label, cw, penalty)
    except ConvergenceError as err:
        raise ConvergenceError("ipsw membership", err.diagnostic, err.best) from None
    eta = _logistic_design(Gall[data.is_rct], True) @ coef
    # p / (1 - p) = exp(eta)
    w = np.exp(eta - eta.max())
    w /= w.sum()
    G = Gall[data.is_rct]
    resid = _balance_residual(G, w, target_moments(data, basis).gtilde)
    return WeightFit(WeightKind.IPSW, coef, w, resid, True)


def fit_propensity(data: CombinedDataset, design: BasisSpec | Basis,
                   penalty: ScadSpec | None = None) -> WeightFit:
    """Logistic model of treatment on g(X) within the trial."""
    basis = design if isinstance(design, Basis) else Basis.for_data(design, data)
    rct = data.rct
    a = data.a[rct]
    if len(rct) == 0 or a.all() or not a.any():
        raise DataError("propensity model needs both arms in the RCT")
    G = basis(data.x[rct])
    try:
        y = a.astype(float)
        Z = _logistic_design(G, True)
        b = penalty.b if penalty else 3.7
        eps = resolve_epsilon(LogisticTask(Z, y, np.ones(len(y)), b, True), penalty)
        coef = _fit_logistic_eps(Z, y, np.ones(len(y)), eps, b, True)
    except ConvergenceError as err:
        raise ConvergenceError("propensity", err.diagnostic, err.best) from None
    p1 = expit(_logistic_design(G, True) @ coef)
    own = np.where(a, p1, 1 - p1)
    return WeightFit(WeightKind.PROPENSITY, coef, own, 0.0, True, prob_treated=p1, epsilon=eps)
