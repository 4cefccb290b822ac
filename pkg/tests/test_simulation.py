import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import truncnorm

from acwsurv.simulation import (FROZEN_TRUTH, SCENARIOS, LinearIndex, McReport, ScenarioSpec,
                                TruthSpec, compute_metrics, draw_times, frozen_truth,
                                generate_replicate, replicates_from_csv, report_from_replicates,
                                rmst_given_index, run_mc_study, true_ate, truncated_normal)

SMALL = dataclasses.replace(SCENARIOS[1], pop_size=20_000, rct_pool=5_000, os_pool=15_000,
                            os_sample=500)


def test_covariates_truncated():
    rng = np.random.default_rng(0)
    x = truncated_normal(rng, 200_000, bound=2.0)
    assert np.abs(x).max() <= 2.0
    data = generate_replicate(SMALL, None, rng)
    assert np.abs(data.x).max() <= 4.0


def test_scenario1_sizes():
    sizes, treated = [], []
    for r in range(100):
        data = generate_replicate(SCENARIOS[1], None, np.random.default_rng([5, r]))
        a = data.a[data.rct]
        sizes.append(a.size)
        treated.append(a.mean())
        assert len(data.os) == 5000
        assert np.all(data.design_weight[data.os] == 30.0)
    assert 1200 <= np.mean(sizes) <= 1400
    assert 0.47 <= np.mean(treated) <= 0.53


def test_draw_times_inverse_transform():
    rng = np.random.default_rng(1)
    idx = np.full(200_000, np.log(0.5))
    t = draw_times(idx, rng)
    assert t.mean() == pytest.approx(2.0, rel=0.02)
    t2 = draw_times(idx, rng, "linear")
    # Lambda(t) = t^2/2 * 0.5: P(T > 2) = exp(-1)
    assert np.mean(t2 > 2.0) == pytest.approx(np.exp(-1.0), abs=0.005)


def test_true_ate_degenerate_cases():
    truth = SCENARIOS[1].truth
    assert true_ate(truth, 0.0, 100, np.random.default_rng(0))[0] == 0.0
    same = dataclasses.replace(truth, outcome0=truth.outcome1)
    for shape in ("constant", "linear"):
        assert true_ate(same, 20.0, 10_000, np.random.default_rng(0), shape)[0] == 0.0


@given(st.floats(-6, 3), st.floats(0.1, 30))
def test_rmst_closed_form(index, tau):
    k = np.exp(index)
    for shape, cum in (("constant", lambda t: t), ("linear", lambda t: t * t / 2)):
        ref, _ = quad(lambda t: np.exp(-cum(t) * k), 0, tau, epsabs=1e-13, epsrel=1e-12, limit=200)
        assert rmst_given_index(index, tau, shape) == pytest.approx(ref, rel=1e-9, abs=1e-12)


def _quadrature_truth(truth, tau):
    # tensor Gauss-Legendre over the truncated cube, time integral by quadrature
    nodes, wts = np.polynomial.legendre.leggauss(48)
    x1, w1 = 4 * nodes, 4 * wts * truncnorm.pdf(4 * nodes, -4, 4)
    x = np.stack(np.meshgrid(x1, x1, x1, indexing="ij"), -1).reshape(-1, 3)
    w = np.einsum("i,j,k->ijk", w1, w1, w1).ravel()
    tn, tw = np.polynomial.legendre.leggauss(200)
    t, tw = tau / 2 * (tn + 1), tau / 2 * tw
    mus = []
    for index in (truth.outcome1, truth.outcome0):
        k = np.exp(index(x))
        total = 0.0
        for i in range(0, len(k), 16384):
            total += (w[i:i + 16384] @ np.exp(-np.outer(k[i:i + 16384], t))) @ tw
        mus.append(total)
    return mus


@pytest.mark.parametrize("outcome_correct", [True, False])
def test_frozen_truth_matches_quadrature(outcome_correct):
    mu1, mu0 = _quadrature_truth(TruthSpec.for_flags(outcome_correct, True), 20.0)
    theta, f1, f0 = FROZEN_TRUTH[outcome_correct]
    # MC standard error of the frozen values is about 0.0036
    assert theta == pytest.approx(mu1 - mu0, abs=0.011)
    assert f1 == pytest.approx(mu1, abs=0.02)
    assert f0 == pytest.approx(mu0, abs=0.02)
    scen = ScenarioSpec(outcome_correct, not outcome_correct)
    assert frozen_truth(scen) == {"mu1": f1, "mu0": f0, "theta": theta}


def test_truth_depends_on_outcome_flag_only():
    a, b = TruthSpec.for_flags(True, False), TruthSpec.for_flags(True, True)
    assert a.outcome1 == b.outcome1 and a.outcome0 == b.outcome0
    assert a.sampling != b.sampling


def test_linear_index_transform():
    idx = LinearIndex(1.0, (2.0, 3.0, 0.0), (True, False, False))
    assert idx(np.array([[0.0, 1.0, 5.0]]))[0] == pytest.approx(1.0 + 2.0 + 3.0)


def test_scenario_validation():
    with pytest.raises(ValueError):
        ScenarioSpec(pop_size=10)
    with pytest.raises(ValueError):
        ScenarioSpec(os_sample=0)
    with pytest.raises(ValueError):
        ScenarioSpec(baseline_shape="weibull")


def test_compute_metrics_definitions():
    est = np.array([1.0, 2.0, 3.0, 6.0])
    ses = np.array([2.0, 2.0, 2.5, 2.5])
    lo, hi = est - 1.5, est + 1.5
    bias, ese, rse, cp = compute_metrics(est, ses, lo, hi, truth=2.5)
    assert bias == 0.5
    assert ese == pytest.approx(np.sqrt(14.0 / 3.0))
    assert rse == pytest.approx(100 * (2.25 / np.sqrt(14.0 / 3.0) - 1))
    assert cp == 75.0


def test_mc_study_report_roundtrip():
    rep = run_mc_study(SMALL, estimators=["Naive", "OR"], reps=3, bootstrap_b=2, seed=4)
    assert rep.estimators == ["Naive", "OR"] and rep.failures == 0
    for row in rep.rows:
        assert 0.0 <= row.cp_percent <= 100.0
    again = report_from_replicates(rep.scenario, replicates_from_csv(rep.replicates_csv()),
                                   rep.truth, rep.reps, rep.failures)
    assert again.to_csv() == rep.to_csv()
    assert again.rows == rep.rows
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("scenario,estimator,reps,bias_mu1")
    assert len(lines) == 3


def test_mc_study_deterministic():
    one = run_mc_study(SMALL, estimators=["OR"], reps=2, bootstrap_b=0, seed=8)
    two = run_mc_study(SMALL, estimators=["OR"], reps=2, bootstrap_b=0, seed=8)
    assert one.replicates_csv() == two.replicates_csv()
    assert isinstance(one, McReport)


def test_mc_study_validation():
    with pytest.raises(ValueError):
        run_mc_study(SMALL, reps=1)
    with pytest.raises(ValueError):
        run_mc_study(SMALL, reps=2, bootstrap_b=1)
