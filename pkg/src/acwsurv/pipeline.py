"""End-to-end estimation: nuisance fits, curves and estimands for a dataset."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .basis import BasisSpec, ScadSpec
from .data import CombinedDataset
from .estimators import (EstimandKind, EstimandSpec, Method, arm_functional, combine_arms,
                         estimate_curves, fit_nuisances)

SIEVE_SUFFIX = "(S)"
ESTIMATOR_NAMES = ("Naive", "OR", "IPSW", "CW", "ACW1", "ACW2", "ACW1(S)", "ACW2(S)")
QUANTITIES = ("mu1", "mu0", "theta")


def parse_estimators(names) -> tuple[str, ...]:
    """Validate and canonicalize estimator names (case-insensitive)."""
    if isinstance(names, str):
        names = [n for n in names.replace(" ", "").split(",") if n]
    lookup = {n.lower(): n for n in ESTIMATOR_NAMES}
    out = []
    for n in names:
        key = n.strip().lower()
        if key not in lookup:
            raise ValueError(f"unknown estimator {n!r}; allowed: {', '.join(ESTIMATOR_NAMES)}")
        if lookup[key] not in out:
            out.append(lookup[key])
    if not out:
        raise ValueError("no estimators requested")
    return tuple(out)


def _split(name: str) -> tuple[Method, bool]:
    sieve = name.endswith(SIEVE_SUFFIX)
    return Method(name[:-len(SIEVE_SUFFIX)] if sieve else name), sieve


@dataclass(frozen=True)
class EstimationConfig:
    """Everything that determines an estimate apart from the data.

    Linear estimators use ``basis`` (optionally penalized by ``penalty``);
    the (S) variants use ``sieve_basis`` with ``sieve_penalty``.
    """

    estimators: tuple[str, ...] = ESTIMATOR_NAMES
    estimand: EstimandSpec = EstimandSpec(EstimandKind.RMST_DIFF, 20.0)
    basis: BasisSpec = BasisSpec(1)
    penalty: ScadSpec | None = None
    sieve_basis: BasisSpec = BasisSpec(2)
    sieve_penalty: ScadSpec | None = ScadSpec()
    weighting: str = "calibration"
    bootstrap: int = 0
    ci: str = "normal"

    def __post_init__(self):
        object.__setattr__(self, "estimators", parse_estimators(self.estimators))
        if self.weighting not in ("calibration", "ipsw"):
            raise ValueError("weighting must be calibration or ipsw")
        if self.weighting == "ipsw" and any(_split(e)[0] is Method.CW for e in self.estimators):
            raise ValueError("CW estimators need calibration weighting")
        if self.ci not in ("normal", "percentile"):
            raise ValueError("ci must be normal or percentile")
        if self.bootstrap < 0 or self.bootstrap == 1:
            raise ValueError("bootstrap must be 0 or >= 2")

    def with_estimators(self, names) -> "EstimationConfig":
        return replace(self, estimators=parse_estimators(names))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimand"] = {"kind": self.estimand.kind.value, "tau": self.estimand.tau}
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class PipelineResult:
    """``estimates[name] = (mu1, mu0, theta)``; curves keyed by ``(name, arm)``."""

    estimates: dict
    curves: dict
    epsilons: dict = field(default_factory=dict)
    clamped: int = 0


def run_pipeline(data: CombinedDataset, config: EstimationConfig,
                 epsilons: dict | None = None) -> PipelineResult:
    """Fit nuisances and evaluate every configured estimator.

    ``epsilons`` (as returned in :attr:`PipelineResult.epsilons`) pins the
    penalty levels, e.g. for bootstrap replicates.
    """
    spec = config.estimand
    groups: dict[bool, list[Method]] = {}
    for name in config.estimators:
        method, sieve = _split(name)
        groups.setdefault(sieve, []).append(method)
    estimates, curves, used = {}, {}, {}
    clamped = 0
    for sieve, methods in sorted(groups.items()):
        basis = config.sieve_basis if sieve else config.basis
        penalty = config.sieve_penalty if sieve else config.penalty
        key = "sieve" if sieve else "linear"
        needs_ipsw = Method.IPSW in methods
        bundle = fit_nuisances(data, basis, config.weighting, penalty, include_ipsw=needs_ipsw,
                               epsilons=(epsilons or {}).get(key))
        used[key] = bundle.epsilons
        est = estimate_curves(data, bundle, methods, horizon=spec.horizon)
        suffix = SIEVE_SUFFIX if sieve else ""
        for method in methods:
            name = method.value + suffix
            c1, c0 = est[(method, True)], est[(method, False)]
            clamped += c1.clamped + c0.clamped
            mu1, mu0 = arm_functional(c1.curve, spec), arm_functional(c0.curve, spec)
            estimates[name] = (mu1, mu0, combine_arms(mu1, mu0, spec))
            curves[(name, True)], curves[(name, False)] = c1, c0
    ordered = {n: estimates[n] for n in config.estimators}
    return PipelineResult(ordered, curves, used, clamped)
