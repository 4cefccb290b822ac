import numpy as np
import pytest
from hypothesis import settings

from acwsurv.basis import Basis, BasisSpec
from acwsurv.cox import CoxFit, Target
from acwsurv.data import CombinedDataset, StepSurvival
from acwsurv.estimators import NuisanceBundle
from acwsurv.weighting import WeightFit, WeightKind

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


def small_dataset(seed, n=40, m=30, p=2, censor_rate=0.5):
    """Random exponential survival data with covariate-dependent hazards."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    a = np.arange(n) % 2 == 0
    rng.shuffle(a)
    t = rng.exponential(np.exp(-0.3 * x[:, 0]))
    c = rng.exponential(1.0 / censor_rate, size=n) if censor_rate > 0 else np.full(n, np.inf)
    u = np.minimum(t, c)
    ev = t <= c
    for arm in (True, False):
        idx = np.flatnonzero(a == arm)
        ev[idx[0]] = True
        if censor_rate > 0:
            ev[idx[1]] = False
    x_os = rng.normal(0.2, 1.0, size=(m, p))
    d = rng.uniform(1.0, 3.0, size=m)
    return CombinedDataset.from_arrays(x, u, ev, a, x_os, design_weight=d)


def step(times, cumhaz):
    return StepSurvival(np.asarray(times, float), np.asarray(cumhaz, float), 0.0)


def hand_bundle(data, omega, p_treated, outcome, censoring, beta=None):
    """Bundle with prescribed weights and baselines (one covariate column).

    ``outcome``/``censoring`` map arm -> (times, cumulative hazard values).
    """
    basis = Basis.fit(BasisSpec(1), data.x[data.rct])
    k = basis.size
    beta = np.zeros(k) if beta is None else np.asarray(beta, float)
    rct_a = data.a[data.rct]
    p1 = np.broadcast_to(np.asarray(p_treated, float), rct_a.shape).copy()
    prop = WeightFit(WeightKind.PROPENSITY, np.zeros(k + 1), np.where(rct_a, p1, 1 - p1),
                     0.0, True, prob_treated=p1)
    samp = WeightFit(WeightKind.CALIBRATION, np.zeros(k), np.asarray(omega, float), 0.0, True)

    def cox(arm, spec, target, b):
        return CoxFit(b, step(*spec[arm]), arm, target, True, 0, 0.0, basis)

    out = {arm: cox(arm, outcome, Target.EVENT, beta) for arm in (True, False)}
    cen = {arm: cox(arm, censoring, Target.CENSORING, np.zeros(k)) for arm in (True, False)}
    return NuisanceBundle(out, cen, samp, prop, basis, data.fingerprint())


@pytest.fixture
def tiny():
    """4 trial rows (2 per arm) and 2 observational rows, scalar covariate."""
    return CombinedDataset.from_arrays(
        [[0.0], [1.0], [0.0], [1.0]], [1.0, 2.0, 1.5, 3.0], [1, 0, 1, 1], [1, 1, 0, 0],
        [[0.0], [1.0]], design_weight=[1.0, 1.0])


def fitted_dataset(seed, **kwargs):
    """First dataset from a deterministic seed sequence whose models all fit.

    Tiny samples occasionally separate (monotone likelihood); those draws are
    skipped rather than papered over.
    """
    from acwsurv.data import ConvergenceError
    from acwsurv.estimators import fit_nuisances
    for attempt in range(50):
        data = small_dataset(seed + 100_003 * attempt, **kwargs)
        try:
            return data, fit_nuisances(data)
        except ConvergenceError:
            continue
    raise RuntimeError("no fittable dataset")
