"""Treatment-specific survival curve estimators and estimand functionals.

All curves are right-continuous step functions on the grid of distinct trial
follow-up times. A subject contributes to the curve at ``t`` while
``U > t``; risk-set (compensator) terms use ``U >= u``.
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .basis import Basis, BasisSpec, ScadSpec
from .cox import CoxFit, Target, fit_cox
from .data import CombinedDataset, DataError, StepSurvival, validate_for_fitting
from .weighting import (WeightFit, WeightKind, fit_propensity, ipsw_weights,
                        solve_calibration, target_moments)

logger = logging.getLogger(__name__)


class Method(str, enum.Enum):
    NAIVE = "Naive"
    OR = "OR"
    IPSW = "IPSW"
    CW = "CW"
    ACW1 = "ACW1"
    ACW2 = "ACW2"


class DegenerateCurveError(ArithmeticError):
    """ACW2 hazard denominator (left limit of ACW1) is not positive."""

    def __init__(self, time: float, value: float):
        super().__init__(f"ACW1 left limit {value:.3g} <= 0 at u={time:.6g}")
        self.time = time


@dataclass(frozen=True, eq=False)
class NuisanceBundle:
    """Working models shared by every estimator on one dataset."""

    outcome_fits: dict
    censoring_fits: dict
    sampling_weights: WeightFit
    propensity: WeightFit
    design: Basis
    fingerprint: int
    ipsw: WeightFit | None = None

    @property
    def epsilons(self) -> dict[str, float]:
        """Penalty levels actually used, keyed by model."""
        out = {"sampling": self.sampling_weights.epsilon,
               "propensity": self.propensity.epsilon}
        for arm in (True, False):
            out[f"outcome{int(arm)}"] = self.outcome_fits[arm].epsilon
            out[f"censoring{int(arm)}"] = self.censoring_fits[arm].epsilon
        return out


def _pen(penalty: ScadSpec | None, epsilons: dict | None, key: str):
    if penalty is None:
        return None
    if epsilons and key in epsilons:
        return penalty.with_epsilon(epsilons[key])
    return penalty


def fit_nuisances(data: CombinedDataset, design: BasisSpec | Basis = BasisSpec(),
                  weighting: str = "calibration", penalty: ScadSpec | None = None,
                  include_ipsw: bool = True, epsilons: dict | None = None) -> NuisanceBundle:
    """Fit outcome, censoring, sampling and propensity models.

    ``epsilons`` pins penalty levels per model (keys as in
    :attr:`NuisanceBundle.epsilons`) so that refits skip cross validation.
    """
    validate_for_fitting(data)
    basis = design if isinstance(design, Basis) else Basis.for_data(design, data)
    outcome, censoring = {}, {}
    for arm in (True, False):
        outcome[arm] = fit_cox(data, arm, Target.EVENT, basis,
                               _pen(penalty, epsilons, f"outcome{int(arm)}"))
        has_cens = (~data.event[data.is_rct & (data.a == arm)]).any()
        if has_cens:
            censoring[arm] = fit_cox(data, arm, Target.CENSORING, basis,
                                     _pen(penalty, epsilons, f"censoring{int(arm)}"))
        else:
            censoring[arm] = CoxFit(np.zeros(basis.size), StepSurvival([], [], 0.0), arm,
                                    Target.CENSORING, True, 0, 0.0, basis, 0.0)
    prop = fit_propensity(data, basis, _pen(penalty, epsilons, "propensity"))
    ipsw = None
    if weighting == "calibration":
        sampling = solve_calibration(data, basis, target_moments(data, basis),
                                     _pen(penalty, epsilons, "sampling"))
        if include_ipsw:
            ipsw = ipsw_weights(data, basis)
    elif weighting == "ipsw":
        sampling = ipsw = ipsw_weights(data, basis, _pen(penalty, epsilons, "sampling"))
    else:
        raise ValueError(f"unknown weighting {weighting!r}; use calibration or ipsw")
    return NuisanceBundle(outcome, censoring, sampling, prop, basis, data.fingerprint(), ipsw)


@dataclass(frozen=True, eq=False)
class CurveEstimate:
    method: Method
    arm: bool
    curve: StepSurvival
    clamped: int = 0


def evaluation_grid(data: CombinedDataset, extra=(), horizon: float | None = None) -> np.ndarray:
    """Sorted distinct trial follow-up times plus ``extra`` points."""
    t = np.unique(np.r_[data.u[data.is_rct], np.asarray(extra, dtype=float)])
    if horizon is not None:
        t = np.unique(np.r_[t[t <= horizon], horizon])
    return t


class ArmTerms:
    """Per-arm building blocks shared by every estimator.

    Arm-``a`` curves only jump at arm-``a`` follow-up times, so by default
    the terms live on that arm's grid (plus the horizon). Everything is
    evaluated on ``ext`` = ``[0] + grid`` so that column 0 is the value on
    ``[0, grid[0])``.
    """

    def __init__(self, data: CombinedDataset, bundle: NuisanceBundle, arm: bool,
                 grid=None, horizon: float | None = None):
        if bundle.fingerprint != data.fingerprint():
            raise ValueError("bundle was fitted on a different dataset")
        self.data, self.bundle, self.arm = data, bundle, bool(arm)
        rct = data.rct
        in_arm = data.a[rct] == self.arm
        rows = rct[in_arm]
        if grid is None:
            grid = evaluation_grid(data.take(rows), horizon=horizon)
        grid = np.asarray(grid, dtype=float)
        self.grid = grid
        self.zero_prepended = not (grid.size and grid[0] == 0.0)
        ext = np.r_[0.0, grid] if self.zero_prepended else grid
        self.ext = ext
        basis = bundle.design
        self.n = len(rct)
        self.N = len(data)
        self.rct_rows = rct
        self.in_arm = in_arm
        self.rows = rows
        out, cen = bundle.outcome_fits[self.arm], bundle.censoring_fits[self.arm]

        pi_a = bundle.propensity.arm_probability(self.arm)
        self.pi_a_all = pi_a
        self.pi_a = pi_a[in_arm]
        self.omega_all = bundle.sampling_weights.weights
        self.omega = self.omega_all[in_arm]

        u = data.u[rows]
        self.u = u
        self.delta = data.event[rows]
        z = basis(data.x[rows])
        self.r = np.exp(z @ out.beta)
        rc = np.exp(z @ cen.beta)
        L = out.baseline(ext)
        LC = cen.baseline(ext)
        self.L, self.LC = L, LC
        at_risk = u[:, None] >= ext[None, :]
        beyond = u[:, None] > ext[None, :]
        self.exp_neg_lam = np.multiply.outer(-self.r, L)
        np.exp(self.exp_neg_lam, out=self.exp_neg_lam)
        # e^{LamC} is only needed while at risk; masking avoids overflow
        ec = np.multiply.outer(rc, LC)
        np.exp(ec, out=ec, where=at_risk)
        ec[~at_risk] = 0.0
        self.ipcw = ec * beyond

        # censoring martingale integral int_0^t e^{LamC(s) + Lam(s)} dM^C(s)
        at_u_L = out.baseline(u) * self.r
        at_u_LC = cen.baseline(u) * rc
        self.ipcw_at_u = np.exp(at_u_LC)
        own = np.where(self.delta, 0.0, np.exp(at_u_L + at_u_LC))
        dLC = np.diff(np.r_[0.0, LC])
        comp = np.zeros_like(ec)
        np.divide(ec, self.exp_neg_lam, out=comp, where=at_risk)
        comp *= np.multiply.outer(rc, dLC)
        np.cumsum(comp, axis=1, out=comp)
        self.mart = np.where(beyond, 0.0, own[:, None]) - comp

        os_rows = data.os
        d = data.design_weight[os_rows]
        self.v = d / d.sum()
        self.os_rows = os_rows
        self.r_os = np.exp(basis(data.x[os_rows]) @ out.beta)
        uniq, inv = np.unique(L, return_inverse=True)
        E = np.multiply.outer(-uniq, self.r_os)
        np.exp(E, out=E)
        self.os_surv = (E @ d / d.sum())[inv]
        self.os_surv[L == 0.0] = 1.0  # exact where no hazard has accrued
        self.os_hazard_part = (E @ (d * self.r_os) / d.sum())[inv]

    # -- helpers ----------------------------------------------------------
    def _curve(self, values) -> StepSurvival:
        values = np.asarray(values, dtype=float)
        if self.zero_prepended:
            return StepSurvival(self.grid, values[1:], values[0])
        return StepSurvival(self.grid, values, values[0])

    def weighted_ipcw(self, w) -> np.ndarray:
        return w @ self.ipcw

    def augmentation(self, w) -> np.ndarray:
        return w @ (self.exp_neg_lam * (1.0 - self.mart))

    # -- estimators -------------------------------------------------------
    def naive(self) -> np.ndarray:
        return self.weighted_ipcw(1.0 / (self.n * self.pi_a))

    def outcome_regression(self) -> np.ndarray:
        return self.os_surv

    def weighted(self, omega) -> np.ndarray:
        return self.weighted_ipcw(omega / self.pi_a)

    def acw1(self) -> np.ndarray:
        w = self.omega / self.pi_a
        # difference first, so the t = 0 value is exactly 1
        return self.os_surv + w @ (self.ipcw - self.exp_neg_lam * (1.0 - self.mart))

    def acw2(self, acw1=None):
        """Product-limit transform of the ACW1 hazard increments."""
        if acw1 is None:
            acw1 = self.acw1()
        w = self.omega / self.pi_a
        dL = np.diff(np.r_[0.0, self.L])
        # dN_i(u): own event at grid time u
        inside = self.delta & (self.u <= self.ext[-1])
        ev_col = np.searchsorted(self.ext, self.u[inside])
        dn = np.bincount(ev_col, weights=(w * self.ipcw_at_u)[inside], minlength=len(self.ext))
        rct_part = (w * self.r) @ (self.exp_neg_lam * (1.0 - self.mart))
        num = dn + dL * (self.os_hazard_part - rct_part)
        left = np.r_[1.0, acw1[:-1]]
        jump = num != 0.0
        bad = jump & (left <= 0)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise DegenerateCurveError(float(self.ext[k]), float(left[k]))
        dH = np.zeros_like(num)
        dH[jump] = num[jump] / left[jump]
        clamped = int(np.sum(dH < 0))
        dH = np.maximum(dH, 0.0)
        return np.exp(-np.cumsum(dH)), clamped

    def curve(self, method: Method) -> CurveEstimate:
        method = Method(method)
        clamped = 0
        if method is Method.NAIVE:
            vals = self.naive()
        elif method is Method.OR:
            vals = self.outcome_regression()
        elif method is Method.CW:
            sw = self.bundle.sampling_weights
            if sw.kind is not WeightKind.CALIBRATION:
                raise ValueError("CW requires calibration sampling weights")
            vals = self.weighted(self.omega)
        elif method is Method.IPSW:
            ip = self.bundle.ipsw
            if ip is None:
                raise ValueError("bundle has no IPSW weights")
            vals = self.weighted(ip.weights[self.in_arm])
        elif method is Method.ACW1:
            vals = self.acw1()
        else:
            vals, clamped = self.acw2()
            if clamped:
                logger.debug("ACW2 arm=%d: %d negative hazard increments clamped",
                             int(self.arm), clamped)
        return CurveEstimate(method, self.arm, self._curve(vals), clamped)

    # -- influence function ------------------------------------------------
    def eif_terms(self, t: float) -> dict[str, np.ndarray]:
        """The four EIF terms (scaled contributions) for every row at ``t``.

        Entries are per data row; ``N * sum(terms)`` minus the centering value
        gives the estimated EIF.
        """
        k = int(np.searchsorted(self.ext, t, side="right") - 1)
        data, N = self.data, self.N
        out = self.bundle.outcome_fits[self.arm]
        z_rct = self.bundle.design(data.x[self.rct_rows])
        surv_rct = np.exp(-out.baseline(t) * np.exp(z_rct @ out.beta))
        a_a = self.in_arm.astype(float)
        omega, pi_a = self.omega_all, self.pi_a_all
        ipcw = np.zeros(self.n)
        ipcw[self.in_arm] = self.ipcw[:, k]
        mart = np.zeros(self.n)
        mart[self.in_arm] = self.mart[:, k]
        terms = {name: np.zeros(N) for name in ("weighting", "treatment", "sampling", "censoring")}
        rct = self.rct_rows
        terms["weighting"][rct] = omega * a_a / pi_a * ipcw
        terms["treatment"][rct] = -omega * (a_a - pi_a) / pi_a * surv_rct
        terms["sampling"][rct] = -omega * surv_rct
        terms["sampling"][self.os_rows] = self.v * np.exp(-self.L[k] * self.r_os)
        terms["censoring"][rct] = omega * a_a / pi_a * surv_rct * mart
        return terms


def _terms(data, bundle, arm, horizon=None) -> ArmTerms:
    return ArmTerms(data, bundle, arm, horizon=horizon)


def estimate_curve_naive(data, bundle, arm, horizon=None) -> CurveEstimate:
    return _terms(data, bundle, arm, horizon).curve(Method.NAIVE)


def estimate_curve_or(data, bundle, arm, horizon=None) -> CurveEstimate:
    return _terms(data, bundle, arm, horizon).curve(Method.OR)


def estimate_curve_weighted(data, bundle, arm, method=Method.CW, horizon=None) -> CurveEstimate:
    method = Method(method)
    if method not in (Method.CW, Method.IPSW):
        raise ValueError("method must be CW or IPSW")
    return _terms(data, bundle, arm, horizon).curve(method)


def estimate_curve_acw1(data, bundle, arm, horizon=None) -> CurveEstimate:
    return _terms(data, bundle, arm, horizon).curve(Method.ACW1)


def estimate_curve_acw2(data, bundle, arm, horizon=None) -> CurveEstimate:
    return _terms(data, bundle, arm, horizon).curve(Method.ACW2)


def estimate_curves(data, bundle, methods, horizon=None) -> dict:
    """All requested curves for both arms, sharing the per-arm terms.

    Returns ``{(method, arm): CurveEstimate}``.
    """
    out = {}
    methods = [Method(m) for m in methods]
    for arm in (True, False):
        terms = _terms(data, bundle, arm, horizon)
        acw1 = None
        for m in methods:
            if m is Method.ACW2:
                if acw1 is None:
                    acw1 = terms.acw1()
                vals, clamped = terms.acw2(acw1)
                out[(m, arm)] = CurveEstimate(m, arm, terms._curve(vals), clamped)
            else:
                est = terms.curve(m)
                if m is Method.ACW1:
                    acw1 = np.r_[est.curve.value_at_zero, est.curve.values] \
                        if terms.zero_prepended else est.curve.values
                out[(m, arm)] = est
    return out


def censoring_martingale_terms(data, bundle, arm, t) -> np.ndarray:
    """Per-trial-subject censoring martingale integral at ``t``.

    Subjects outside ``arm`` get 0. Returned in trial-row order.
    """
    terms = _terms(data, bundle, arm)
    k = int(np.searchsorted(terms.ext, t, side="right") - 1)
    out = np.zeros(terms.n)
    out[terms.in_arm] = terms.mart[:, k]
    return out


def estimate_eif_values(data, bundle, arm, t, s_hat: float | None = None) -> np.ndarray:
    """Estimated efficient influence function of S_a(t) for every row.

    Inverse sampling scores are replaced by ``N * omega`` and design weights by
    ``N * d / sum(d)``. Centered at the ACW1 value unless ``s_hat`` is given.
    """
    terms = _terms(data, bundle, arm)
    parts = terms.eif_terms(t)
    contrib = sum(parts.values())
    if s_hat is None:
        s_hat = float(contrib.sum())
    return terms.N * contrib - s_hat


# -- estimands ------------------------------------------------------------

class EstimandKind(str, enum.Enum):
    SURV_DIFF = "SurvDiffAt"
    RMST_DIFF = "RmstDiff"
    RMTL_RATIO = "RmtlRatio"
    QUANTILE_DIFF = "QuantileDiff"

    @classmethod
    def parse(cls, name: str) -> "EstimandKind":
        key = name.replace("_", "").lower()
        for k in cls:
            if k.value.lower() == key:
                return k
        raise ValueError(f"unknown estimand {name!r}; choose from {[k.value for k in cls]}")


@dataclass(frozen=True)
class EstimandSpec:
    """``tau`` is the time horizon, or the quantile level for QuantileDiff."""

    kind: EstimandKind
    tau: float

    def __post_init__(self):
        object.__setattr__(self, "kind", EstimandKind(self.kind))
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.kind is EstimandKind.QUANTILE_DIFF and not self.tau < 1:
            raise ValueError("quantile level must lie in (0, 1)")

    @property
    def horizon(self) -> float | None:
        return None if self.kind is EstimandKind.QUANTILE_DIFF else self.tau

    def check_support(self, data: CombinedDataset) -> None:
        ev = data.u[data.is_rct & data.event]
        if self.horizon is not None and ev.size and self.tau > ev.max():
            warnings.warn(f"tau={self.tau} exceeds the largest trial event time {ev.max():.4g}",
                          stacklevel=2)


def curve_quantile(curve: StepSurvival, level: float) -> float:
    """inf{t : S(t) <= level}."""
    if curve.value_at_zero <= level:
        return 0.0
    hit = np.flatnonzero(curve.values <= level)
    if hit.size == 0:
        raise ValueError(f"curve never reaches level {level} within the observed range")
    return float(curve.times[hit[0]])


def arm_functional(curve: StepSurvival, spec: EstimandSpec) -> float:
    """Per-arm summary entering the estimand (S(tau), RMST, RMTL or quantile)."""
    if isinstance(curve, CurveEstimate):
        curve = curve.curve
    kind = spec.kind
    if kind is EstimandKind.SURV_DIFF:
        return float(curve(spec.tau))
    if kind is EstimandKind.RMST_DIFF:
        return curve.integrate(spec.tau)
    if kind is EstimandKind.RMTL_RATIO:
        return spec.tau - curve.integrate(spec.tau)
    return curve_quantile(curve, spec.tau)


def combine_arms(mu1: float, mu0: float, spec: EstimandSpec) -> float:
    if spec.kind is EstimandKind.RMTL_RATIO:
        if mu0 == 0:
            raise ZeroDivisionError("RMTL ratio denominator is zero")
        return mu1 / mu0
    return mu1 - mu0


def apply_estimand(s1, s0, spec: EstimandSpec) -> float:
    """theta = Psi_tau(S_1, S_0) for a pair of curves."""
    return combine_arms(arm_functional(s1, spec), arm_functional(s0, spec), spec)
