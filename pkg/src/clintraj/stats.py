"""Association tests between variables, tree segments and pseudotime.

Categorical variables are tested against segment labels with a Pearson
chi-squared independence test plus a per-cell deviation score
(expected - observed) / expected; note that score is positive when a
cell is *under*-represented, so an ``enrichment_positive`` flag is
provided to flip the sign.  Numeric variables use one-way ANOVA on the
segment labels.  Along trajectories, variables are regressed on
pseudotime (linear, Gaussian-kernel or logistic) and screened by R².
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from ._special import chi2_sf
from .dataset import NumericMatrix
from .treeanalysis import PseudotimeAssignment

EXPECTED_FLOOR = 1e-9  # cells with smaller expected count get no score

REGRESSION_KINDS = ("linear", "gaussian_kernel", "logistic")


@dataclass(frozen=True)
class CellDeviation:
    """One contingency cell: a segment crossed with one variable value."""

    segment: int
    value: object
    observed: float
    expected: float
    score: float


@dataclass(frozen=True)
class SegmentCoefficient:
    segment: int
    coefficient: float
    p_value: float


@dataclass(frozen=True)
class AssociationResult:
    variable: str
    test: str
    statistic: float
    p_value: float
    per_segment: tuple = ()


@dataclass(frozen=True)
class RegressionFit:
    variable: str
    trajectory: int
    kind: str
    r_squared: float
    grid: np.ndarray = field(repr=False, default=None)
    curve: np.ndarray = field(repr=False, default=None)


def chi2_association(
    labels, values, variable: str = "", enrichment_positive: bool = False
) -> AssociationResult:
    """Pearson chi-squared test of segment labels against a categorical.

    Each cell also gets a deviation score (expected - observed) /
    expected, positive for under-represented cells; pass
    ``enrichment_positive=True`` for the opposite sign convention.
    """
    labels = np.asarray(labels)
    values = np.asarray(values)
    if labels.shape != values.shape:
        raise ValueError("labels and values must align")
    segs, seg_idx = np.unique(labels, return_inverse=True)
    cats, cat_idx = np.unique(values, return_inverse=True)
    if len(segs) < 2 or len(cats) < 2:
        raise ValueError(
            f"need at least 2 segments and 2 values, got {len(segs)}x{len(cats)}"
        )
    observed = np.zeros((len(segs), len(cats)))
    np.add.at(observed, (seg_idx, cat_idx), 1.0)
    expected = observed.sum(axis=1, keepdims=True) * observed.sum(axis=0) / observed.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        terms = np.where(expected > 0, (observed - expected) ** 2 / expected, 0.0)
    statistic = float(terms.sum())
    dof = (len(segs) - 1) * (len(cats) - 1)
    sign = -1.0 if enrichment_positive else 1.0
    cells = tuple(
        CellDeviation(
            int(segs[r]) if np.issubdtype(segs.dtype, np.integer) else segs[r],
            cats[c],
            float(observed[r, c]),
            float(expected[r, c]),
            sign * float((expected[r, c] - observed[r, c]) / expected[r, c]),
        )
        for r in range(len(segs))
        for c in range(len(cats))
        if expected[r, c] >= EXPECTED_FLOOR
    )
    return AssociationResult(variable, "chi2", statistic, chi2_sf(statistic, dof), cells)


def anova_association(
    labels, values, variable: str = "", segments=None
) -> AssociationResult:
    """One-way ANOVA of a numeric variable across segment labels.

    Reports the F statistic, its p-value, and per-segment mean offsets
    from the grand mean with two-sided t-test p-values (pooled
    variance).  Segment ids listed in ``segments`` but absent from the
    labels are dropped with a warning.
    """
    labels = np.asarray(labels)
    y = np.asarray(values, dtype=float)
    if segments is not None:
        missing = sorted(set(segments) - set(labels.tolist()))
        if missing:
            warnings.warn(f"segments without points dropped: {missing}", stacklevel=2)
    segs, seg_idx = np.unique(labels, return_inverse=True)
    if len(segs) < 2:
        raise ValueError("need at least 2 segments with points")
    if np.ptp(y) == 0.0:
        raise ValueError("variable is constant")
    n = len(y)
    k = len(segs)
    grand = y.mean()
    counts = np.bincount(seg_idx)
    means = np.bincount(seg_idx, weights=y) / counts
    ss_between = float((counts * (means - grand) ** 2).sum())
    ss_within = float(((y - means[seg_idx]) ** 2).sum())
    df1, df2 = k - 1, n - k
    if df2 <= 0:
        raise ValueError("not enough points for the F test")
    if ss_within == 0.0:
        f_stat = np.inf
        p_value = 0.0
    else:
        f_stat = (ss_between / df1) / (ss_within / df2)
        p_value = float(scipy.stats.f.sf(f_stat, df1, df2))
    pooled = ss_within / df2 if ss_within > 0 else 0.0
    coefficients = []
    for j, seg in enumerate(segs):
        coef = float(means[j] - grand)
        se = np.sqrt(pooled * max(1.0 / counts[j] - 1.0 / n, 0.0))
        if se == 0.0:
            p = 0.0 if coef != 0.0 else 1.0
        else:
            p = float(2.0 * scipy.stats.t.sf(abs(coef) / se, df2))
        coefficients.append(
            SegmentCoefficient(
                int(seg) if np.issubdtype(segs.dtype, np.integer) else seg, coef, p
            )
        )
    return AssociationResult(
        variable, "anova", float(f_stat), p_value, tuple(coefficients)
    )


def _silverman_bandwidth(pt: np.ndarray) -> float:
    n = len(pt)
    sd = pt.std(ddof=1)
    iqr = np.subtract(*np.percentile(pt, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    if spread == 0.0:
        return 0.25
    return max(0.9 * spread * n ** (-0.2), 0.25)


def _kernel_smooth(pt_train, y_train, pt_eval, bandwidth):
    z = (pt_eval[:, None] - pt_train[None, :]) / bandwidth
    w = np.exp(-0.5 * z**2)
    denom = w.sum(axis=1)
    denom[denom == 0.0] = 1.0
    return (w @ y_train) / denom


def _logistic_irls(pt, y, ridge, max_iter=50, tol=1e-10):
    X = np.column_stack([np.ones_like(pt), pt])
    beta = np.zeros(2)
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-X @ beta))
        p = np.clip(p, 1e-12, 1.0 - 1e-12)
        grad = X.T @ (y - p) - ridge * beta
        w = p * (1.0 - p)
        hess = (X * w[:, None]).T @ X + ridge * np.eye(2)
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if not np.all(np.isfinite(beta)) or np.abs(beta).max() > 1e8:
            return beta, False
        if np.abs(grad).max() < tol:
            return beta, True
    return beta, False


def regress_on_pseudotime(
    pt,
    values,
    kind: str = "linear",
    variable: str = "",
    trajectory: int = -1,
    grid_size: int = 50,
) -> RegressionFit:
    """Fit a variable as a function of pseudotime and report R².

    ``linear`` is ordinary least squares, ``gaussian_kernel`` is
    Nadaraya-Watson smoothing (Silverman bandwidth, floored at 0.25
    edge units), ``logistic`` fits a binary variable by iteratively
    reweighted least squares with a small ridge term; on separation the
    fit is redone with strong damping and a warning.  Logistic R² is
    the squared Pearson correlation between outcome and fitted
    probability; the others use 1 - SS_res / SS_tot.
    """
    pt = np.asarray(pt, dtype=float)
    y = np.asarray(values, dtype=float)
    if kind not in REGRESSION_KINDS:
        raise ValueError(f"kind must be one of {REGRESSION_KINDS}")
    if len(pt) < 10:
        raise ValueError(f"need at least 10 points, got {len(pt)}")
    if len(pt) != len(y):
        raise ValueError("pt and values must align")
    grid = np.linspace(pt.min(), pt.max(), grid_size)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if kind == "linear":
        design = np.column_stack([np.ones_like(pt), pt])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        fitted = design @ coef
        curve = coef[0] + coef[1] * grid
        r2 = 1.0 - float(((y - fitted) ** 2).sum()) / ss_tot if ss_tot > 0 else 0.0
    elif kind == "gaussian_kernel":
        h = _silverman_bandwidth(pt)
        fitted = _kernel_smooth(pt, y, pt, h)
        curve = _kernel_smooth(pt, y, grid, h)
        r2 = 1.0 - float(((y - fitted) ** 2).sum()) / ss_tot if ss_tot > 0 else 0.0
    else:
        levels = np.unique(y)
        if len(levels) != 2:
            raise ValueError("logistic regression requires a binary variable")
        yb = (y == levels[1]).astype(float)
        beta, converged = _logistic_irls(pt, yb, ridge=1e-8)
        p = 1.0 / (1.0 + np.exp(-(beta[0] + beta[1] * pt)))
        separated = bool(np.min(p * (1.0 - p)) < 1e-10)
        if not converged or separated:
            warnings.warn(
                "logistic fit did not converge or separated the data; "
                "returning strongly damped fit",
                stacklevel=2,
            )
            beta, _ = _logistic_irls(pt, yb, ridge=1e-2)
        fitted = 1.0 / (1.0 + np.exp(-(beta[0] + beta[1] * pt)))
        curve = 1.0 / (1.0 + np.exp(-(beta[0] + beta[1] * grid)))
        if fitted.std() == 0.0 or yb.std() == 0.0:
            r2 = 0.0
        else:
            r2 = float(np.corrcoef(yb, fitted)[0, 1] ** 2)
    return RegressionFit(variable, trajectory, kind, r2, grid, curve)


@dataclass(frozen=True)
class ScreenResult:
    """R² of every variable on every trajectory, with threshold flags."""

    variables: tuple[str, ...]
    n_trajectories: int
    r_squared: np.ndarray  # variables x trajectories; NaN if too few points
    passed: np.ndarray
    threshold: float


def screen_trajectory_associations(
    assignment: PseudotimeAssignment,
    m: NumericMatrix,
    threshold: float = 0.3,
    kind: str = "auto",
    min_points: int = 10,
) -> ScreenResult:
    """Regress every variable on pseudotime within every trajectory.

    ``kind='auto'`` uses logistic regression for binary variables and
    linear regression otherwise.  Trajectories holding fewer than
    ``min_points`` of a variable's points score NaN and never pass.
    """
    if not m.complete:
        raise ValueError("screen requires a complete matrix")
    n_traj = 1 + max((t for ids in assignment.trajectory_ids for t in ids), default=-1)
    members = [
        np.array([i for i, ids in enumerate(assignment.trajectory_ids) if t in ids])
        for t in range(n_traj)
    ]
    r2 = np.full((m.n_columns, n_traj), np.nan)
    for j, name in enumerate(m.column_names):
        col = m.values[:, j]
        if kind == "auto":
            col_kind = "logistic" if len(np.unique(col)) == 2 else "linear"
        else:
            col_kind = kind
        for t in range(n_traj):
            sel = members[t]
            if len(sel) < min_points:
                continue
            y = col[sel]
            if np.ptp(y) == 0.0:
                r2[j, t] = 0.0
                continue
            use = col_kind
            if use == "logistic" and len(np.unique(y)) != 2:
                use = "linear"
            fit = regress_on_pseudotime(
                assignment.pt[sel], y, use, variable=name, trajectory=t
            )
            r2[j, t] = fit.r_squared
    passed = np.where(np.isnan(r2), False, r2 > threshold)
    return ScreenResult(m.column_names, n_traj, r2, passed, threshold)


def benjamini_hochberg(p_values) -> np.ndarray:
    """Step-up false-discovery-rate adjustment; returns q-values."""
    p = np.asarray(p_values, dtype=float)
    m = len(p)
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    q = np.empty(m)
    running = 1.0
    for rank in range(m, 0, -1):
        i = order[rank - 1]
        running = min(running, p[i] * m / rank)
        q[i] = running
    return np.clip(q, 0.0, 1.0)
