import numpy as np
import pytest

from clintraj.survival import (
    EventTable,
    HazardCurve,
    cause_specific_hazards,
    cox_fit,
    cox_table,
    curve_table,
    group_cumhazard_compare,
    nelson_aalen,
    trajectory_events,
)
from clintraj.treeanalysis import PseudotimeAssignment


def simulate(rng, n, beta, x=None, censor_scale=None):
    if x is None:
        x = rng.normal(size=(n, 1))
    t = rng.exponential(1.0 / np.exp(x @ np.atleast_1d(beta)))
    if censor_scale is None:
        return EventTable(t, np.ones(n, int), covariates=x)
    c = rng.exponential(censor_scale, size=n)
    return EventTable(np.minimum(t, c), (t <= c).astype(int), covariates=x)


def test_event_table_validation():
    with pytest.raises(ValueError, match="finite and non-negative"):
        EventTable([-1.0, 2.0], [1, 0])
    with pytest.raises(ValueError, match="0 or 1"):
        EventTable([1.0, 2.0], [1, 2])
    with pytest.raises(ValueError, match="cause"):
        EventTable([1.0, 2.0], [1, 0], cause=("a", "b"))
    with pytest.raises(ValueError, match="one row per subject"):
        EventTable([1.0, 2.0], [1, 0], covariates=np.zeros((3, 1)))


def test_nelson_aalen_two_step_hand_values():
    ev = EventTable([1.0, 2.0, 3.0, 3.5, 4.0], [1, 1, 0, 0, 0])
    c = nelson_aalen(ev)
    assert c.times.tolist() == [1.0, 2.0]
    assert c.hazard[0] == pytest.approx(1 / 5)
    assert c.hazard[1] == pytest.approx(1 / 5 + 1 / 4)
    assert c.at(2.0) == pytest.approx(0.45)
    assert c.variance[1] == pytest.approx(1 / 25 + 1 / 16)


def test_nelson_aalen_single_event_among_ten():
    ev = EventTable([1.0] + [2.0] * 9, [1] + [0] * 9)
    assert nelson_aalen(ev).at(1.0) == pytest.approx(0.1)


def test_nelson_aalen_no_events_is_flat_zero():
    c = nelson_aalen(EventTable([1.0, 2.0], [0, 0]))
    assert c.times.size == 0
    assert c.at(5.0) == 0.0


def test_hazard_is_nondecreasing_step_function():
    rng = np.random.default_rng(0)
    ev = EventTable(rng.exponential(size=80), rng.integers(0, 2, size=80))
    c = nelson_aalen(ev)
    assert np.all(np.diff(c.hazard) > 0)
    assert set(c.times) <= set(ev.time[ev.event])
    assert c.at(c.times[0] - 1e-9) == 0.0
    mid = 0.5 * (c.times[0] + c.times[1])
    assert c.at(mid) == c.hazard[0]


def test_early_censored_subject_leaves_curve_unchanged():
    # Censored before the first event, the subject enters no risk set.
    rng = np.random.default_rng(1)
    t = 1.0 + rng.exponential(size=40)
    e = rng.integers(0, 2, size=40)
    base = nelson_aalen(EventTable(t, e))
    extra = nelson_aalen(EventTable(np.append(t, 0.5), np.append(e, 0)))
    assert np.array_equal(base.times, extra.times)
    assert np.array_equal(base.hazard, extra.hazard)


def test_late_censored_subject_inflates_every_risk_set():
    # The late subject is at risk for every event, shrinking each step.
    rng = np.random.default_rng(1)
    t = rng.exponential(size=40)
    e = rng.integers(0, 2, size=40)
    base = nelson_aalen(EventTable(t, e))
    extra = nelson_aalen(EventTable(np.append(t, t.max() + 1.0), np.append(e, 0)))
    assert np.array_equal(base.times, extra.times)
    assert np.all(np.diff(extra.hazard, prepend=0.0) < np.diff(base.hazard, prepend=0.0))


def test_cause_specific_single_cause_equals_total():
    rng = np.random.default_rng(2)
    t = rng.exponential(size=30)
    e = rng.integers(0, 2, size=30)
    cause = tuple("a" if flag else None for flag in e)
    per = cause_specific_hazards(EventTable(t, e, cause=cause))
    total = nelson_aalen(EventTable(t, e))
    assert np.array_equal(per["a"].hazard, total.hazard)


def test_cause_specific_hazards_sum_to_total():
    rng = np.random.default_rng(3)
    t = rng.exponential(size=200)
    e = rng.integers(0, 2, size=200)
    labels = ("a", "b", "c")
    cause = tuple(labels[rng.integers(3)] if flag else None for flag in e)
    ev = EventTable(t, e, cause=cause)
    per = cause_specific_hazards(ev)
    total = nelson_aalen(ev)
    stacked = sum(curve.at(total.times) for curve in per.values())
    assert np.max(np.abs(stacked - total.hazard)) < 1e-12


def test_cause_specific_zero_event_cause_and_errors():
    ev = EventTable([1.0, 2.0], [1, 0], cause=("a", None))
    per = cause_specific_hazards(ev, causes=("a", "b"))
    assert per["b"].times.size == 0
    assert "c" not in per
    with pytest.raises(ValueError, match="no cause labels"):
        cause_specific_hazards(EventTable([1.0], [1]))


def test_cox_matches_reference_implementation():
    from statsmodels.duration.hazard_regression import PHReg

    rng = np.random.default_rng(4)
    x = rng.normal(size=(300, 2))
    ev = simulate(rng, 300, [0.7, -0.3], x=x, censor_scale=2.0)
    fit = cox_fit(ev)
    oracle = PHReg(ev.time, x, status=ev.event.astype(int), ties="breslow").fit()
    assert fit.coefficients == pytest.approx(oracle.params, rel=1e-8, abs=1e-10)
    assert fit.std_errors == pytest.approx(oracle.bse, rel=1e-8)
    assert fit.log_likelihood == pytest.approx(
        float(oracle.model.loglike(oracle.params)), rel=1e-10
    )
    assert fit.converged


def test_cox_recovers_doubled_hazard():
    rng = np.random.default_rng(5)
    x = rng.integers(0, 2, size=400).astype(float)[:, None]
    ev = simulate(rng, 400, [np.log(2.0)], x=x)
    fit = cox_fit(ev)
    assert abs(fit.coefficients[0] - np.log(2.0)) < 3 * fit.std_errors[0]
    assert fit.p_values[0] < 0.01


def test_cox_permutation_null():
    rng = np.random.default_rng(6)
    t = rng.exponential(size=100)
    e = np.ones(100, int)
    x = rng.normal(size=100)
    rejected = 0
    for _ in range(100):
        fit = cox_fit(EventTable(t, e, covariates=rng.permutation(x)[:, None]))
        rejected += fit.p_values[0] < 0.05
    assert rejected <= 5


def test_cox_invariant_under_time_shift():
    rng = np.random.default_rng(7)
    ev = simulate(rng, 150, [0.5], censor_scale=3.0)
    base = cox_fit(ev)
    shifted = cox_fit(
        EventTable(ev.time + 11.25, ev.event.astype(int), covariates=ev.covariates)
    )
    assert np.array_equal(base.coefficients, shifted.coefficients)
    assert np.array_equal(base.std_errors, shifted.std_errors)


def test_cox_requires_covariates_and_event_times():
    with pytest.raises(ValueError, match="no covariates"):
        cox_fit(EventTable([1.0, 2.0], [1, 1]))
    with pytest.raises(ValueError, match="2 distinct event times"):
        cox_fit(EventTable([1.0, 1.0, 2.0], [1, 1, 0], covariates=np.ones((3, 1))))


def test_cox_separation_warns_and_damps():
    ts = np.concatenate([np.linspace(1, 2, 20), np.linspace(3, 4, 20)])
    xs = np.repeat([1.0, 0.0], 20)[:, None]
    with pytest.warns(UserWarning, match="did not converge"):
        fit = cox_fit(EventTable(ts, np.ones(40, int), covariates=xs))
    assert not fit.converged
    assert np.all(np.isfinite(fit.coefficients))
    assert abs(fit.coefficients[0]) < 15.0


def test_cox_names_collinear_covariates():
    rng = np.random.default_rng(8)
    x1 = rng.normal(size=50)
    X = np.column_stack([x1, 2.0 * x1])
    ev = EventTable(
        rng.exponential(size=50), np.ones(50, int),
        covariates=X, covariate_names=("age", "age_scaled"),
    )
    with pytest.raises(ValueError, match="collinear.*age"):
        cox_fit(ev)


def test_logrank_identical_groups():
    rng = np.random.default_rng(9)
    t = rng.exponential(size=50)
    e = rng.integers(0, 2, size=50)
    ev = EventTable(np.concatenate([t, t]), np.concatenate([e, e]))
    res = group_cumhazard_compare(ev, np.repeat([0, 1], 50))
    assert res.statistic == pytest.approx(0.0, abs=1e-12)
    assert res.p_value == pytest.approx(1.0, abs=1e-9)
    assert np.array_equal(res.curves[0].hazard, res.curves[1].hazard)


def test_logrank_matches_reference_implementation():
    from statsmodels.duration.survfunc import survdiff

    rng = np.random.default_rng(10)
    grp = rng.integers(0, 2, size=120)
    t = rng.exponential(1.0 / np.exp(0.5 * grp))
    e = rng.integers(0, 2, size=120)
    e[:4] = 1  # keep events in both groups
    res = group_cumhazard_compare(EventTable(t, e), grp)
    chi2, pvalue = survdiff(t, e, grp)
    assert res.statistic == pytest.approx(float(chi2), rel=1e-10)
    assert res.p_value == pytest.approx(float(pvalue), rel=1e-6)


def test_logrank_detects_tripled_hazard():
    detected = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        grp = np.repeat([0, 1], 100)
        t = rng.exponential(1.0 / 3.0**grp)
        res = group_cumhazard_compare(EventTable(t, np.ones(200, int)), grp)
        detected += res.p_value < 0.01
    assert detected >= 18


def test_logrank_edge_cases():
    with pytest.raises(ValueError, match="non-empty"):
        group_cumhazard_compare(EventTable([1.0, 2.0], [1, 1]), [1, 1])
    with pytest.warns(UserWarning, match="p = 1"):
        res = group_cumhazard_compare(EventTable([1.0, 2.0], [0, 0]), [0, 1])
    assert res.p_value == 1.0


def test_trajectory_events_selects_members():
    pt = np.array([0.5, 1.0, 2.0, 3.0])
    ids = ((0, 1), (0,), (1,), (1,))
    assignment = PseudotimeAssignment(
        0, np.zeros(4, int), np.zeros(4), np.zeros(4), pt, ids
    )
    ev = trajectory_events(assignment, [1, 0, 1, 0], 1)
    assert ev.time.tolist() == [0.5, 2.0, 3.0]
    assert ev.event.tolist() == [True, True, False]
    with pytest.raises(ValueError, match="no subjects"):
        trajectory_events(assignment, [1, 0, 1, 0], 5)


def test_export_helpers():
    curve = HazardCurve([1.0, 2.0], [0.1, 0.3], [0.01, 0.02])
    table = curve_table(curve)
    assert table.shape == (2, 3)
    assert table[1].tolist() == [2.0, 0.3, 0.02]
    rng = np.random.default_rng(11)
    ev = simulate(rng, 60, [0.4])
    rows = cox_table(cox_fit(ev))
    assert rows[0]["covariate"] == "x0"
    assert set(rows[0]) == {"covariate", "coefficient", "std_error", "p_value"}
