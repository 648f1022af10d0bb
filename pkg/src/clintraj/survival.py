"""Survival analysis on the pseudotime scale.

Subjects carry a pseudotime and an event flag; subjects without the
event are censored at their own pseudotime.  The module estimates
Nelson-Aalen cumulative hazards (total, per cause, and per group with a
log-rank comparison) and fits Cox proportional-hazards regression of
covariates on pseudotime-to-event with Breslow tie handling.  Subjects
belonging to several trajectories enter every one of them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.stats

from ._special import chi2_sf
from .treeanalysis import PseudotimeAssignment


@dataclass(frozen=True)
class EventTable:
    """Per-subject pseudotime, event flag, optional cause and covariates."""

    time: np.ndarray
    event: np.ndarray
    cause: tuple | None = None
    covariates: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        time = np.asarray(self.time, dtype=float)
        event = np.asarray(self.event)
        if time.ndim != 1 or time.shape != event.shape:
            raise ValueError("time and event must be aligned 1-d arrays")
        if not np.all(np.isfinite(time)) or np.any(time < 0):
            raise ValueError("times must be finite and non-negative")
        if not np.all(np.isin(event, (0, 1))):
            raise ValueError("event flags must be 0 or 1")
        event = event.astype(bool)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event)
        if self.cause is not None:
            cause = tuple(self.cause)
            if len(cause) != len(time):
                raise ValueError("cause labels must align with subjects")
            bad = [i for i, c in enumerate(cause) if (c is not None) != event[i]]
            if bad:
                raise ValueError(
                    f"cause must be set exactly for event subjects; check rows {bad[:5]}"
                )
            object.__setattr__(self, "cause", cause)
        if self.covariates is not None:
            cov = np.atleast_2d(np.asarray(self.covariates, dtype=float))
            if cov.shape[0] != len(time):
                raise ValueError("covariates must have one row per subject")
            if not np.all(np.isfinite(cov)):
                raise ValueError("covariates must be finite")
            names = tuple(self.covariate_names) or tuple(
                f"x{j}" for j in range(cov.shape[1])
            )
            if len(names) != cov.shape[1]:
                raise ValueError("covariate_names must match covariate columns")
            object.__setattr__(self, "covariates", cov)
            object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return len(self.time)

    def subset(self, mask) -> "EventTable":
        mask = np.asarray(mask, dtype=bool)
        return EventTable(
            self.time[mask],
            self.event[mask],
            None if self.cause is None else tuple(
                c for c, keep in zip(self.cause, mask) if keep
            ),
            None if self.covariates is None else self.covariates[mask],
            self.covariate_names,
        )


@dataclass(frozen=True)
class HazardCurve:
    """Right-continuous cumulative hazard step function."""

    times: np.ndarray
    hazard: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        hazard = np.asarray(self.hazard, dtype=float)
        variance = np.asarray(self.variance, dtype=float)
        if not (times.shape == hazard.shape == variance.shape):
            raise ValueError("times, hazard and variance must align")
        if times.size and np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(np.diff(hazard) < 0) or np.any(hazard < 0):
            raise ValueError("cumulative hazard must be non-decreasing from 0")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "hazard", hazard)
        object.__setattr__(self, "variance", variance)

    def at(self, t):
        """Evaluate H(t); zero before the first event time."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        padded = np.concatenate([[0.0], self.hazard])
        out = padded[idx + 1]
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CoxFit:
    """Proportional-hazards coefficients with Wald inference."""

    names: tuple[str, ...]
    coefficients: np.ndarray
    std_errors: np.ndarray
    p_values: np.ndarray
    log_likelihood: float
    converged: bool = True


@dataclass(frozen=True)
class GroupComparison:
    """Per-group cumulative hazards plus a log-rank test."""

    curves: tuple[HazardCurve, HazardCurve]
    statistic: float
    p_value: float


def trajectory_events(
    assignment: PseudotimeAssignment,
    event,
    trajectory: int,
    cause=None,
    covariates=None,
    covariate_names: tuple[str, ...] = (),
) -> EventTable:
    """Event table for the subjects lying on one trajectory."""
    sel = np.array(
        [trajectory in ids for ids in assignment.trajectory_ids], dtype=bool
    )
    if not sel.any():
        raise ValueError(f"trajectory {trajectory} has no subjects")
    event = np.asarray(event)
    return EventTable(
        assignment.pt[sel],
        event[sel],
        None if cause is None else tuple(
            c for c, keep in zip(cause, sel) if keep
        ),
        None if covariates is None else np.asarray(covariates, dtype=float)[sel],
        covariate_names,
    )


def nelson_aalen(events: EventTable) -> HazardCurve:
    """Nelson-Aalen cumulative hazard H(t) = sum of d_i / n_i.

    The sum runs over distinct event times up to t, with d_i events at
    time t_i and n_i subjects still at risk (time >= t_i); the variance
    estimate accumulates d_i / n_i^2.
    """
    if events.n == 0:
        raise ValueError("need at least one subject")
    order = np.argsort(events.time, kind="stable")
    time = events.time[order]
    flag = events.event[order]
    event_times = np.unique(time[flag])
    if event_times.size == 0:
        empty = np.empty(0)
        return HazardCurve(empty, empty.copy(), empty.copy())
    start = np.searchsorted(time, event_times, side="left")
    at_risk = events.n - start
    d = np.array(
        [np.count_nonzero(flag & (time == t)) for t in event_times], dtype=float
    )
    return HazardCurve(
        event_times, np.cumsum(d / at_risk), np.cumsum(d / at_risk**2)
    )


def cause_specific_hazards(events: EventTable, causes=None) -> dict:
    """Nelson-Aalen per cause, other causes treated as censoring.

    With ``causes=None`` every observed cause gets a curve; an explicit
    list may include extra labels, which yield flat zero curves.  The
    risk sets match the all-cause analysis, so the per-cause hazards
    sum to the total hazard at every event time.
    """
    if events.cause is None:
        raise ValueError("event table has no cause labels")
    if causes is None:
        causes = sorted({c for c in events.cause if c is not None}, key=str)
    out = {}
    for c in causes:
        flag = np.array([lbl == c for lbl in events.cause], dtype=int)
        out[c] = nelson_aalen(EventTable(events.time, flag & events.event))
    return out


def _cox_derivatives(time, event, x, beta, ridge):
    # Breslow partial likelihood: risk sets are suffixes of the
    # time-sorted arrays; exp is shift-stabilized.
    n, p = x.shape
    eta = x @ beta
    shift = float(eta.max())
    w = np.exp(eta - shift)
    s0 = np.cumsum(w[::-1])[::-1]
    s1 = np.cumsum((w[:, None] * x)[::-1], axis=0)[::-1]
    s2 = np.cumsum(np.einsum("i,ij,ik->ijk", w, x, x)[::-1], axis=0)[::-1]
    event_times = np.unique(time[event])
    start = np.searchsorted(time, event_times, side="left")
    ll = float(eta[event].sum())
    grad = x[event].sum(axis=0)
    info = np.zeros((p, p))
    for t, i in zip(event_times, start):
        d = float(np.count_nonzero(event & (time == t)))
        mean = s1[i] / s0[i]
        ll -= d * (np.log(s0[i]) + shift)
        grad -= d * mean
        info += d * (s2[i] / s0[i] - np.outer(mean, mean))
    ll -= 0.5 * ridge * float(beta @ beta)
    grad = grad - ridge * beta
    info = info + ridge * np.eye(p)
    return ll, grad, info


def _cox_newton(time, event, x, ridge, max_iter=50, tol=1e-8):
    p = x.shape[1]
    beta = np.zeros(p)
    ll, grad, info = _cox_derivatives(time, event, x, beta, ridge)
    for _ in range(max_iter):
        if np.linalg.norm(grad) < tol:
            break
        try:
            step = scipy.linalg.solve(info, grad, assume_a="pos")
        except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
            return beta, info, ll, "singular"
        # Step-halving keeps the likelihood climbing.
        for _ in range(30):
            cand = beta + step
            ll_new, grad_new, info_new = _cox_derivatives(
                time, event, x, cand, ridge
            )
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12:
                break
            step = 0.5 * step
        beta, ll, grad, info = cand, ll_new, grad_new, info_new
        if np.abs(beta).max() > 500.0:
            return beta, info, ll, "monotone"
    if np.linalg.norm(grad) >= tol:
        return beta, info, ll, "monotone"
    # A gradient can vanish numerically while the likelihood is still
    # monotone; relative risks spanning more than e^20 give it away.
    eta = x @ beta
    if float(eta.max() - eta.min()) > 20.0:
        return beta, info, ll, "monotone"
    return beta, info, ll, "ok"


def _collinear_names(x, names):
    _, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    scale = diag.max() if diag.size else 0.0
    if scale == 0.0:
        return list(names)
    return [names[j] for j in piv[diag < scale * 1e-10]]


def cox_fit(events: EventTable) -> CoxFit:
    """Cox proportional-hazards fit by Newton-Raphson, Breslow ties.

    Standard errors come from the inverse observed information; p-values
    are two-sided Wald.  A monotone partial likelihood (separation)
    triggers a warning and a ridge-damped refit; a singular information
    matrix raises an error naming the collinear covariates.
    """
    if events.covariates is None or events.covariates.shape[1] == 0:
        raise ValueError("no covariates to fit")
    if len(np.unique(events.time[events.event])) < 2:
        raise ValueError("need at least 2 distinct event times")
    order = np.argsort(events.time, kind="stable")
    time = events.time[order]
    event = events.event[order]
    x = events.covariates[order]
    beta, info, ll, status = _cox_newton(time, event, x, ridge=0.0)
    if status == "singular":
        bad = _collinear_names(x, events.covariate_names)
        raise ValueError(
            f"singular information matrix; collinear covariates: "
            f"{bad or list(events.covariate_names)}"
        )
    converged = status == "ok"
    if not converged:
        warnings.warn(
            "Cox fit did not converge (monotone likelihood, possible "
            "separation); returning ridge-damped fit",
            stacklevel=2,
        )
        beta, info, ll, _ = _cox_newton(time, event, x, ridge=1e-2)
    cov = scipy.linalg.inv(info)
    se = np.sqrt(np.diag(cov))
    z = np.divide(np.abs(beta), se, out=np.zeros_like(beta), where=se > 0)
    return CoxFit(
        events.covariate_names,
        beta,
        se,
        2.0 * scipy.stats.norm.sf(z),
        ll,
        converged,
    )


def group_cumhazard_compare(events: EventTable, group) -> GroupComparison:
    """Per-group Nelson-Aalen curves plus a log-rank test.

    ``group`` is a binary indicator per subject.  The test compares
    observed to expected events in group 1 under the pooled hazard,
    with the usual hypergeometric variance.
    """
    group = np.asarray(group)
    if group.shape != events.time.shape or not np.all(np.isin(group, (0, 1))):
        raise ValueError("group must be a 0/1 indicator per subject")
    group = group.astype(bool)
    if not group.any() or group.all():
        raise ValueError("both groups must be non-empty")
    curves = (nelson_aalen(events.subset(~group)), nelson_aalen(events.subset(group)))
    event_times = np.unique(events.time[events.event])
    observed = expected = var = 0.0
    for t in event_times:
        risk = events.time >= t
        n_t = float(risk.sum())
        n1 = float((risk & group).sum())
        d_t = float((events.event & (events.time == t)).sum())
        observed += float((events.event & (events.time == t) & group).sum())
        expected += d_t * n1 / n_t
        if n_t > 1:
            var += d_t * (n1 / n_t) * (1 - n1 / n_t) * (n_t - d_t) / (n_t - 1)
    if var == 0.0:
        warnings.warn("no usable events for the log-rank test; p = 1", stacklevel=2)
        return GroupComparison(curves, 0.0, 1.0)
    stat = (observed - expected) ** 2 / var
    return GroupComparison(curves, stat, chi2_sf(stat, 1))


def curve_table(curve: HazardCurve) -> np.ndarray:
    """Curve as rows of (time, cumulative hazard, variance) for export."""
    return np.column_stack([curve.times, curve.hazard, curve.variance])


def cox_table(fit: CoxFit) -> list[dict]:
    """Coefficient table as plain dicts for JSON export."""
    return [
        {
            "covariate": name,
            "coefficient": float(b),
            "std_error": float(s),
            "p_value": float(p),
        }
        for name, b, s, p in zip(
            fit.names, fit.coefficients, fit.std_errors, fit.p_values
        )
    ]
