import numpy as np
import pytest
import scipy.stats

from clintraj.dataset import NumericMatrix
from clintraj.stats import (
    benjamini_hochberg,
    chi2_association,
    anova_association,
    regress_on_pseudotime,
    screen_trajectory_associations,
    _silverman_bandwidth,
)
from clintraj.treeanalysis import PseudotimeAssignment


def expand(table):
    labels, values = [], []
    for r, row in enumerate(table):
        for c, count in enumerate(row):
            labels.extend([r] * count)
            values.extend([f"v{c}"] * count)
    return np.array(labels), np.array(values, dtype=object)


def test_chi2_zero_when_independent():
    labels, values = expand([[10, 20], [20, 40]])
    res = chi2_association(labels, values)
    assert res.statistic == pytest.approx(0.0, abs=1e-12)
    assert res.p_value == pytest.approx(1.0, abs=1e-9)
    assert all(cell.score == pytest.approx(0.0, abs=1e-12) for cell in res.per_segment)


def test_chi2_diagonal_table_hand_oracle():
    labels, values = expand([[10, 0], [0, 10]])
    res = chi2_association(labels, values)
    assert res.statistic == pytest.approx(20.0, abs=1e-12)
    assert res.p_value == pytest.approx(7.744216431044088e-06, rel=1e-9)
    scores = {(c.segment, c.value): c.score for c in res.per_segment}
    # Empty cells are fully depleted: (E - 0) / E = 1.
    assert scores[(0, "v1")] == pytest.approx(1.0)
    assert scores[(1, "v0")] == pytest.approx(1.0)
    assert scores[(0, "v0")] == pytest.approx(-1.0)


def test_chi2_matches_scipy_contingency():
    rng = np.random.default_rng(0)
    table = rng.integers(1, 40, size=(3, 4))
    labels, values = expand(table.tolist())
    res = chi2_association(labels, values)
    oracle = scipy.stats.chi2_contingency(table, correction=False)
    assert res.statistic == pytest.approx(oracle.statistic, rel=1e-12)
    assert res.p_value == pytest.approx(oracle.pvalue, rel=1e-9)


def test_chi2_invariant_under_relabeling():
    labels, values = expand([[5, 9, 2], [8, 3, 7]])
    base = chi2_association(labels, values)
    flipped = chi2_association(1 - labels, values)
    assert flipped.statistic == pytest.approx(base.statistic, rel=1e-12)


def test_chi2_row_margins_match():
    labels, values = expand([[12, 5, 3], [4, 9, 11]])
    res = chi2_association(labels, values)
    for seg in (0, 1):
        cells = [c for c in res.per_segment if c.segment == seg]
        assert sum(c.observed for c in cells) == pytest.approx(
            sum(c.expected for c in cells), abs=1e-9
        )


def test_chi2_sign_flag_flips_scores():
    labels, values = expand([[10, 0], [0, 10]])
    printed = chi2_association(labels, values)
    flipped = chi2_association(labels, values, enrichment_positive=True)
    for a, b in zip(printed.per_segment, flipped.per_segment):
        assert a.score == pytest.approx(-b.score)


def test_chi2_rejects_degenerate_tables():
    with pytest.raises(ValueError, match="at least 2"):
        chi2_association(np.zeros(10, int), np.array(["a", "b"] * 5))
    with pytest.raises(ValueError, match="at least 2"):
        chi2_association(np.arange(4) % 2, np.array(["a"] * 4))


def test_anova_equal_means():
    y = np.concatenate([np.arange(10.0), np.arange(10.0)])
    labels = np.repeat([0, 1], 10)
    res = anova_association(labels, y)
    assert res.statistic == pytest.approx(0.0, abs=1e-12)
    assert res.p_value == pytest.approx(1.0, abs=1e-9)


def test_anova_two_groups_matches_t_test():
    rng = np.random.default_rng(1)
    a = rng.normal(0.0, 1.0, size=50)
    b = rng.normal(10.0, 1.0, size=50)
    labels = np.repeat([0, 1], 50)
    res = anova_association(labels, np.concatenate([a, b]))
    t = scipy.stats.ttest_ind(a, b)
    assert res.statistic == pytest.approx(t.statistic**2, rel=1e-10)
    assert res.p_value == pytest.approx(t.pvalue, rel=1e-8)
    assert res.p_value < 1e-10
    coefs = {c.segment: c for c in res.per_segment}
    assert coefs[0].coefficient < 0 < coefs[1].coefficient
    assert coefs[0].p_value < 1e-10 and coefs[1].p_value < 1e-10


def test_anova_matches_scipy_f_oneway():
    rng = np.random.default_rng(2)
    groups = [rng.normal(mu, 1.0, size=30) for mu in (0.0, 0.5, 1.5)]
    labels = np.repeat([0, 1, 2], 30)
    res = anova_association(labels, np.concatenate(groups))
    oracle = scipy.stats.f_oneway(*groups)
    assert res.statistic == pytest.approx(oracle.statistic, rel=1e-12)
    assert res.p_value == pytest.approx(oracle.pvalue, rel=1e-8)


def test_anova_rejects_constant_variable():
    with pytest.raises(ValueError, match="constant"):
        anova_association(np.repeat([0, 1], 5), np.ones(10))


def test_anova_warns_on_empty_segments():
    labels = np.repeat([0, 1], 10)
    y = np.concatenate([np.zeros(10), np.ones(10)]) + np.arange(20) * 0.01
    with pytest.warns(UserWarning, match="without points"):
        anova_association(labels, y, segments=[0, 1, 2])


def test_linear_regression_perfect_fit():
    pt = np.linspace(0.0, 4.0, 30)
    fit = regress_on_pseudotime(pt, 2.0 * pt - 1.0, "linear")
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.curve[0] == pytest.approx(-1.0, abs=1e-9)
    assert fit.curve[-1] == pytest.approx(7.0, abs=1e-9)


def test_linear_regression_noise_monte_carlo():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        pt = rng.uniform(0.0, 5.0, size=500)
        fit = regress_on_pseudotime(pt, rng.normal(size=500), "linear")
        assert fit.r_squared < 0.05


def test_linear_r2_affine_invariant():
    rng = np.random.default_rng(3)
    pt = rng.uniform(0.0, 3.0, size=100)
    y = 1.5 * pt + rng.normal(size=100)
    base = regress_on_pseudotime(pt, y, "linear").r_squared
    scaled = regress_on_pseudotime(pt, -7.0 * y + 3.0, "linear").r_squared
    assert scaled == pytest.approx(base, rel=1e-12)


def test_kernel_regression_catches_nonlinear_trend():
    # Cosine over one full period is uncorrelated with pseudotime, so a
    # line finds nothing while the smoother should track the wave.
    rng = np.random.default_rng(4)
    pt = rng.uniform(0.0, 2.0 * np.pi, size=200)
    y = np.cos(pt) + 0.05 * rng.normal(size=200)
    kernel = regress_on_pseudotime(pt, y, "gaussian_kernel")
    linear = regress_on_pseudotime(pt, y, "linear")
    assert kernel.r_squared > 0.8
    assert linear.r_squared < 0.3
    assert kernel.r_squared <= 1.0


def test_bandwidth_floor():
    assert _silverman_bandwidth(np.linspace(0.0, 0.01, 50)) == 0.25
    wide = _silverman_bandwidth(np.linspace(0.0, 100.0, 50))
    assert wide > 0.25


def test_logistic_regression_monotone_and_bounded():
    rng = np.random.default_rng(5)
    pt = rng.uniform(0.0, 4.0, size=300)
    prob = 1.0 / (1.0 + np.exp(-(pt - 2.0) * 2.0))
    y = (rng.random(300) < prob).astype(float)
    fit = regress_on_pseudotime(pt, y, "logistic")
    assert np.all((fit.curve > 0.0) & (fit.curve < 1.0))
    assert np.all(np.diff(fit.curve) >= 0.0)
    assert fit.r_squared > 0.2


def test_logistic_matches_sklearn():
    from sklearn.linear_model import LogisticRegression

    rng = np.random.default_rng(6)
    pt = rng.uniform(0.0, 4.0, size=400)
    prob = 1.0 / (1.0 + np.exp(-(pt - 2.0)))
    y = (rng.random(400) < prob).astype(float)
    fit = regress_on_pseudotime(pt, y, "logistic", grid_size=200)
    oracle = LogisticRegression(C=1e10, tol=1e-10, max_iter=1000)
    oracle.fit(pt[:, None], y)
    grid = fit.grid[:, None]
    expected = oracle.predict_proba(grid)[:, 1]
    assert np.max(np.abs(fit.curve - expected)) < 1e-4


def test_logistic_separation_warns_but_fits():
    pt = np.concatenate([np.linspace(0, 1, 20), np.linspace(2, 3, 20)])
    y = np.repeat([0.0, 1.0], 20)
    with pytest.warns(UserWarning, match="did not converge"):
        fit = regress_on_pseudotime(pt, y, "logistic")
    assert np.all(np.isfinite(fit.curve))
    assert np.all((fit.curve > 0.0) & (fit.curve < 1.0))
    assert fit.r_squared > 0.8


def test_regression_input_validation():
    with pytest.raises(ValueError, match="at least 10"):
        regress_on_pseudotime(np.arange(5.0), np.arange(5.0), "linear")
    with pytest.raises(ValueError, match="kind"):
        regress_on_pseudotime(np.arange(10.0), np.arange(10.0), "spline")
    with pytest.raises(ValueError, match="binary"):
        regress_on_pseudotime(np.arange(10.0), np.arange(10.0), "logistic")


def fake_assignment(pt, trajectory_ids):
    n = len(pt)
    return PseudotimeAssignment(
        0, np.zeros(n, int), np.zeros(n), np.zeros(n), np.asarray(pt, float),
        tuple(trajectory_ids),
    )


def test_screen_branch_specific_trend():
    rng = np.random.default_rng(7)
    shared_pt = rng.uniform(0.0, 1.0, size=5)
    arm_pt = rng.uniform(1.0, 5.0, size=50)
    arm2_pt = rng.uniform(1.0, 5.0, size=50)
    pt = np.concatenate([shared_pt, arm_pt, arm2_pt])
    ids = [(0, 1)] * 5 + [(0,)] * 50 + [(1,)] * 50
    trending = np.concatenate(
        [shared_pt, arm_pt, np.full(50, 0.5)]
    ) + 0.1 * rng.normal(size=105)
    noise = rng.normal(size=105)
    m = NumericMatrix(
        np.column_stack([trending, noise]),
        np.zeros((105, 2), bool),
        ("trend", "noise"),
    )
    res = screen_trajectory_associations(fake_assignment(pt, ids), m, threshold=0.3)
    assert res.r_squared.shape == (2, 2)
    assert res.passed[0, 0] and not res.passed[0, 1]
    assert not res.passed[1].any()


def test_screen_empty_and_impossible_threshold():
    pt = np.linspace(0.0, 1.0, 20)
    ids = [(0,)] * 20
    empty = NumericMatrix(np.empty((20, 0)), np.zeros((20, 0), bool), ())
    res = screen_trajectory_associations(fake_assignment(pt, ids), empty)
    assert res.r_squared.shape == (0, 1)
    rng = np.random.default_rng(8)
    m = NumericMatrix(rng.normal(size=(20, 2)), np.zeros((20, 2), bool))
    res = screen_trajectory_associations(
        fake_assignment(pt, ids), m, threshold=1.01
    )
    assert not res.passed.any()


def test_screen_skips_short_trajectories():
    pt = np.linspace(0.0, 1.0, 20)
    ids = [(0,)] * 15 + [(1,)] * 5
    m = NumericMatrix(pt[:, None].copy(), np.zeros((20, 1), bool), ("v",))
    res = screen_trajectory_associations(fake_assignment(pt, ids), m)
    assert np.isnan(res.r_squared[0, 1])
    assert not res.passed[0, 1]
    assert res.passed[0, 0]


def test_benjamini_hochberg_known_values():
    q = benjamini_hochberg([0.005, 0.04, 0.03])
    assert q == pytest.approx([0.015, 0.04, 0.04])
    assert benjamini_hochberg([]).size == 0


def test_benjamini_hochberg_properties():
    rng = np.random.default_rng(9)
    p = rng.random(40)
    q = benjamini_hochberg(p)
    assert np.all(q >= p - 1e-15)
    assert np.all(q <= 1.0)
    order = np.argsort(p)
    assert np.all(np.diff(q[order]) >= -1e-15)
