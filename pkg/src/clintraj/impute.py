"""Missingness filtering and SVD-based imputation.

Columns whose missing fraction exceeds a threshold are dropped first,
then rows, leaving a small residual of gaps.  Those gaps are filled by
projecting each incomplete row onto the rank-k hyperplane of a principal
component model, fit either on complete rows only (``svd_complete``) or
on the whole matrix by fill-and-refit alternation (``svd_full``).
Imputed values in discrete columns can be rounded back onto legal level
values, with mutual exclusivity enforced inside dummy-coded groups.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import MixedDataTable, NumericMatrix, estimate_dimension_pca

IMPUTERS = ("svd_complete", "svd_full")

DISCRETE_KINDS = ("binary", "ordinal", "dummy")


@dataclass(frozen=True)
class MissingnessPolicy:
    """Thresholds and imputer selection for gap handling."""

    delta_row: float = 0.2
    delta_column: float = 0.3
    svd_order: int = 1
    imputer: str = "svd_complete"
    round_discrete: bool = True

    def __post_init__(self):
        for name in ("delta_row", "delta_column"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.svd_order < 1:
            raise ValueError(f"svd_order must be >= 1, got {self.svd_order}")
        if self.imputer not in IMPUTERS:
            raise ValueError(f"imputer must be one of {IMPUTERS}, got {self.imputer!r}")


@dataclass(frozen=True)
class FilterReport:
    """What filter_missing removed and what is left."""

    dropped_columns: tuple[str, ...]
    dropped_rows: tuple[int, ...]
    residual_missing_fraction: float
    n_complete_rows: int


@dataclass(frozen=True)
class ImputedCell:
    row: int
    column: str
    value: float
    was_rounded: bool


@dataclass(frozen=True)
class ImputationReport:
    """Per-cell imputation record plus iteration diagnostics."""

    cells: tuple[ImputedCell, ...]
    converged: bool = True
    n_iterations: int = 0
    error_trace: tuple[float, ...] = ()


def filter_missing(
    m: NumericMatrix, policy: MissingnessPolicy
) -> tuple[NumericMatrix, FilterReport]:
    """Drop columns, then rows, whose missing fraction exceeds the policy.

    The column pass uses fractions over the original rows; the row pass
    uses fractions over the surviving columns.  Raises if nothing
    survives.
    """
    mask = m.missing_mask
    col_frac = mask.mean(axis=0)
    keep_cols = np.flatnonzero(col_frac <= policy.delta_column)
    dropped_cols = tuple(
        m.column_names[j] for j in np.flatnonzero(col_frac > policy.delta_column)
    )
    if keep_cols.size == 0:
        raise ValueError("no columns survive the missingness filter")
    row_frac = mask[:, keep_cols].mean(axis=1)
    keep_rows = np.flatnonzero(row_frac <= policy.delta_row)
    dropped_rows = tuple(int(i) for i in np.flatnonzero(row_frac > policy.delta_row))
    if keep_rows.size == 0:
        raise ValueError("no rows survive the missingness filter")
    values = m.values[np.ix_(keep_rows, keep_cols)]
    out_mask = mask[np.ix_(keep_rows, keep_cols)]
    out = NumericMatrix(
        values, out_mask, tuple(m.column_names[j] for j in keep_cols)
    )
    report = FilterReport(
        dropped_columns=dropped_cols,
        dropped_rows=dropped_rows,
        residual_missing_fraction=float(out_mask.mean()),
        n_complete_rows=int((~out_mask.any(axis=1)).sum()),
    )
    return out, report


def filter_table(
    table: MixedDataTable, policy: MissingnessPolicy
) -> tuple[MixedDataTable, FilterReport]:
    """Apply the column-then-row missingness filter to a raw table.

    Same thresholds and pass order as `filter_missing`, applied to the
    token table before quantification so that categorical dummy
    expansion cannot distort the column fractions.
    """
    mask = table.missing_mask
    col_frac = mask.mean(axis=0)
    keep_cols = np.flatnonzero(col_frac <= policy.delta_column)
    dropped_cols = tuple(
        table.schema[j].name for j in np.flatnonzero(col_frac > policy.delta_column)
    )
    if keep_cols.size == 0:
        raise ValueError("no columns survive the missingness filter")
    row_frac = mask[:, keep_cols].mean(axis=1)
    keep_rows = np.flatnonzero(row_frac <= policy.delta_row)
    dropped_rows = tuple(int(i) for i in np.flatnonzero(row_frac > policy.delta_row))
    if keep_rows.size == 0:
        raise ValueError("no rows survive the missingness filter")
    schema = tuple(table.schema[j] for j in keep_cols)
    cells = tuple(
        tuple(table.cells[i][j] for j in keep_cols) for i in keep_rows
    )
    out_mask = mask[np.ix_(keep_rows, keep_cols)]
    out = MixedDataTable(schema, cells, out_mask)
    report = FilterReport(
        dropped_columns=dropped_cols,
        dropped_rows=dropped_rows,
        residual_missing_fraction=float(out_mask.mean()),
        n_complete_rows=int((~out_mask.any(axis=1)).sum()),
    )
    return out, report


def default_svd_order(m: NumericMatrix, c: float = 10.0) -> int:
    """Effective dimensionality of the complete-row submatrix."""
    complete = ~m.missing_mask.any(axis=1)
    sub = NumericMatrix(
        m.values[complete], np.zeros((int(complete.sum()), m.n_columns), bool),
        m.column_names,
    )
    return estimate_dimension_pca(sub, c=c)


def _finalize(
    raw: np.ndarray,
    m: NumericMatrix,
    column_kinds,
    round_discrete: bool,
    dummy_groups,
) -> tuple[np.ndarray, tuple[ImputedCell, ...]]:
    # Snap imputed cells of discrete columns onto observed legal values,
    # then make dummy groups one-hot again without touching observed
    # entries.
    values = raw.copy()
    mask = m.missing_mask
    rounded = np.zeros_like(mask)
    if round_discrete and column_kinds is not None:
        for j, kind in enumerate(column_kinds):
            if kind not in DISCRETE_KINDS:
                continue
            legal = np.unique(m.values[~mask[:, j], j])
            if legal.size == 0:
                continue
            for i in np.flatnonzero(mask[:, j]):
                values[i, j] = legal[np.argmin(np.abs(legal - values[i, j]))]
                rounded[i, j] = True
        for group in dummy_groups:
            cols = np.asarray(group, dtype=int)
            for i in np.flatnonzero(mask[:, cols].any(axis=1)):
                miss = mask[i, cols]
                imp_cols = cols[miss]
                obs_cols = cols[~miss]
                values[i, imp_cols] = 0.0
                if not np.any(m.values[i, obs_cols] == 1.0):
                    values[i, imp_cols[np.argmax(raw[i, imp_cols])]] = 1.0
                rounded[i, imp_cols] = True
    cells = tuple(
        ImputedCell(int(i), m.column_names[j], float(values[i, j]), bool(rounded[i, j]))
        for i, j in zip(*np.nonzero(mask))
    )
    return values, cells


def _project_rows(
    values: np.ndarray, mask: np.ndarray, center: np.ndarray, basis: np.ndarray
) -> np.ndarray:
    # Least-squares fit of each incomplete row's observed coordinates to
    # the affine rank-k model, reading imputations off the missing ones.
    out = values.copy()
    for i in np.flatnonzero(mask.any(axis=1)):
        obs = ~mask[i]
        coef, *_ = np.linalg.lstsq(basis[obs], values[i, obs] - center[obs], rcond=None)
        fit = center + basis @ coef
        out[i, mask[i]] = fit[mask[i]]
    return out


def impute_svd_complete(
    m: NumericMatrix,
    k: int,
    column_kinds=None,
    round_discrete: bool = True,
    dummy_groups=(),
) -> tuple[NumericMatrix, ImputationReport]:
    """Impute gaps from a rank-k model fit on the complete rows only.

    Each incomplete row is moved to the closest point of the model's
    affine hyperplane that matches its observed coordinates in the
    least-squares sense.  Requires at least k+1 complete rows.
    """
    mask = m.missing_mask
    complete = ~mask.any(axis=1)
    n_complete = int(complete.sum())
    if n_complete < k + 1:
        raise ValueError(
            f"svd_complete needs at least {k + 1} complete rows, found {n_complete}"
        )
    frac = n_complete / m.n_rows
    if frac < 0.4:
        warnings.warn(
            f"only {frac:.1%} of rows are complete; "
            "the complete-row model may be unrepresentative",
            stacklevel=2,
        )
    center = m.values[complete].mean(axis=0)
    _, _, vt = np.linalg.svd(m.values[complete] - center, full_matrices=False)
    basis = vt[:k].T
    raw = _project_rows(m.values, mask, center, basis)
    values, cells = _finalize(raw, m, column_kinds, round_discrete, dummy_groups)
    out = NumericMatrix(values, np.zeros_like(mask), m.column_names)
    return out, ImputationReport(cells)


def impute_svd_full(
    m: NumericMatrix,
    k: int,
    column_kinds=None,
    round_discrete: bool = True,
    dummy_groups=(),
    max_iter: int = 100,
    tol: float = 1e-8,
) -> tuple[NumericMatrix, ImputationReport]:
    """Impute gaps by fill-and-refit alternation with a rank-k model.

    Missing cells start at observed column means; each iteration refits
    an affine rank-k model (column means plus SVD) on the filled matrix
    and refills the gaps from the reconstruction.  The observed-entry
    error never increases.  Stops when the largest cell change drops
    below ``tol``; otherwise warns and returns the last iterate flagged
    as unconverged.
    """
    mask = m.missing_mask
    if not mask.any():
        return m, ImputationReport(())
    if mask.all(axis=1).any():
        raise ValueError("svd_full requires at least one observed entry per row")
    if mask.all(axis=0).any():
        raise ValueError("svd_full requires at least one observed entry per column")
    obs = ~mask
    init = np.array(
        [m.values[obs[:, j], j].mean() for j in range(m.n_columns)]
    )
    filled = np.where(mask, init, m.values)
    trace: list[float] = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        center = filled.mean(axis=0)
        u, s, vt = np.linalg.svd(filled - center, full_matrices=False)
        recon = center + (u[:, :k] * s[:k]) @ vt[:k]
        trace.append(float(np.sqrt(np.sum((m.values[obs] - recon[obs]) ** 2))))
        delta = float(np.max(np.abs(recon[mask] - filled[mask])))
        filled[mask] = recon[mask]
        if delta < tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"svd_full did not converge in {max_iter} iterations "
            f"(last change {delta:.3g})",
            stacklevel=2,
        )
    values, cells = _finalize(filled, m, column_kinds, round_discrete, dummy_groups)
    out = NumericMatrix(values, np.zeros_like(mask), m.column_names)
    return out, ImputationReport(cells, converged, iterations, tuple(trace))


def impute(
    m: NumericMatrix,
    policy: MissingnessPolicy,
    column_kinds=None,
    dummy_groups=(),
) -> tuple[NumericMatrix, ImputationReport]:
    """Run the imputer selected by the policy."""
    if policy.imputer == "svd_complete":
        return impute_svd_complete(
            m, policy.svd_order, column_kinds, policy.round_discrete, dummy_groups
        )
    return impute_svd_full(
        m, policy.svd_order, column_kinds, policy.round_discrete, dummy_groups
    )
