"""Doubly robust generalization of survival treatment effects from a trial to a target population."""

from .basis import BasisSpec, ScadSpec
from .cox import CoxFit, Target, fit_cox, predict_survival
from .data import CombinedDataset, ConvergenceError, DataError, StepSurvival, SubjectRecord
from .estimators import (CurveEstimate, EstimandKind, EstimandSpec, Method, NuisanceBundle,
                         apply_estimand, fit_nuisances)
from .inference import BootstrapResult, bootstrap
from .pipeline import EstimationConfig, run_pipeline
from .weighting import WeightFit, WeightKind, solve_calibration

__version__ = "0.1.0"
