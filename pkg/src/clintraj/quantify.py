"""Numeric quantification of ordinal, binary and categorical columns.

Ordinal levels (binary columns are 2-level ordinals) are mapped to the
quantiles of a latent standard normal: level i with frequency p_i gets
the value ``ppf(sum(p_1..p_{i-1}) + p_i/2)``.  A multivariate refinement
(optimal scaling) then adjusts level values to maximize the sum of
squared pairwise correlations between all columns, keeping each
column's level ordering monotone and its scale normalized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._special import norm_ppf
from .dataset import MixedDataTable, NumericMatrix, VariableSchema


@dataclass(frozen=True)
class QuantifiedVariable:
    """Level-value assignment for one ordinal/binary column."""

    column: str
    level_values: dict[int, float]  # level index -> numeric value
    level_probs: dict[int, float]  # level index -> observed frequency
    levels: tuple[str, ...] = ()

    def value_of(self, level_index: int) -> float:
        return self.level_values[level_index]


@dataclass(frozen=True)
class ScalingResult:
    """Outcome of the optimal-scaling sweep."""

    level_values: dict[str, dict[int, float]]  # column -> level index -> value
    objective_trace: tuple[float, ...]
    matrix: NumericMatrix | None = field(repr=False, default=None)


def quantify_ordinal_univariate(
    tokens, levels, missing_tokens=frozenset({""}), column="",
) -> QuantifiedVariable:
    """Quantify one ordinal column from its observed level frequencies.

    ``levels`` is the ordered list of legal tokens; only observed levels
    receive values.  Raises on a column with no observed values.
    """
    level_index = {tok: i for i, tok in enumerate(levels)}
    counts = np.zeros(len(levels), dtype=int)
    for tok in tokens:
        if tok in missing_tokens:
            continue
        counts[level_index[tok]] += 1
    total = int(counts.sum())
    if total == 0:
        raise ValueError(f"column {column!r} has no observed values")
    probs = counts / total
    values: dict[int, float] = {}
    probs_out: dict[int, float] = {}
    cum = 0.0
    for i, p in enumerate(probs):
        if counts[i] == 0:
            continue
        values[i] = norm_ppf(cum + p / 2.0)
        probs_out[i] = float(p)
        cum += p
    return QuantifiedVariable(column, values, probs_out, tuple(levels))


def binary_levels(table: MixedDataTable, column: str) -> tuple[str, ...]:
    """Level ordering for a binary column: declared levels, else sorted tokens."""
    var = table.schema[table.column_index(column)]
    if var.ordinal_levels:
        return var.ordinal_levels
    j = table.column_index(column)
    tokens = sorted(
        {row[j] for i, row in enumerate(table.cells) if not table.missing_mask[i, j]}
    )
    return tuple(tokens)


def encode_categorical(table: MixedDataTable, column: str) -> NumericMatrix:
    """One-hot encode a categorical column into one 0/1 column per category.

    All categories are emitted; dropping a redundant reference level is
    left to the caller.  Rows missing the source cell are missing in
    every emitted column.
    """
    j = table.column_index(column)
    var = table.schema[j]
    if var.kind != "categorical":
        raise ValueError(f"column {column!r} is {var.kind}, not categorical")
    observed = ~table.missing_mask[:, j]
    categories = sorted({row[j] for i, row in enumerate(table.cells) if observed[i]})
    n = table.n_rows
    values = np.zeros((n, len(categories)))
    mask = np.zeros_like(values, dtype=bool)
    mask[~observed, :] = True
    for k, cat in enumerate(categories):
        for i, row in enumerate(table.cells):
            if observed[i] and row[j] == cat:
                values[i, k] = 1.0
    names = tuple(f"{column}_{cat}" for cat in categories)
    return NumericMatrix(values, mask, names)


@dataclass(frozen=True)
class QuantifiedTable:
    """Numeric view of a mixed table plus the metadata needed downstream."""

    matrix: NumericMatrix
    variables: dict[str, QuantifiedVariable]
    column_kinds: tuple[str, ...]  # per output column: continuous/binary/ordinal/dummy
    source_columns: tuple[str, ...]  # original column feeding each output column
    dummy_groups: tuple[tuple[int, ...], ...]  # output-column index groups per categorical


def quantify_table(table: MixedDataTable) -> QuantifiedTable:
    """Apply per-kind quantification to every column of a table.

    Continuous columns parse as floats, ordinal/binary columns get
    latent-normal quantile values, categorical columns expand into
    dummy groups.  The missingness mask is carried through.
    """
    blocks: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    names: list[str] = []
    kinds: list[str] = []
    sources: list[str] = []
    variables: dict[str, QuantifiedVariable] = {}
    dummy_groups: list[tuple[int, ...]] = []
    n = table.n_rows
    for j, var in enumerate(table.schema):
        col_mask = table.missing_mask[:, j]
        if var.kind == "continuous":
            col = np.zeros(n)
            for i, row in enumerate(table.cells):
                if not col_mask[i]:
                    col[i] = float(row[j])
            blocks.append(col[:, None])
            masks.append(col_mask[:, None])
            names.append(var.name)
            kinds.append("continuous")
            sources.append(var.name)
        elif var.kind in ("ordinal", "binary"):
            if var.kind == "ordinal":
                levels = var.ordinal_levels
            else:
                levels = binary_levels(table, var.name)
            tokens = [row[j] for row in table.cells]
            qv = quantify_ordinal_univariate(
                tokens, levels, var.missing_tokens, var.name
            )
            variables[var.name] = qv
            level_index = {tok: i for i, tok in enumerate(levels)}
            col = np.zeros(n)
            for i, row in enumerate(table.cells):
                if not col_mask[i]:
                    col[i] = qv.level_values[level_index[row[j]]]
            blocks.append(col[:, None])
            masks.append(col_mask[:, None])
            names.append(var.name)
            kinds.append(var.kind)
            sources.append(var.name)
        else:  # categorical
            sub = encode_categorical(table, var.name)
            start = sum(b.shape[1] for b in blocks)
            dummy_groups.append(tuple(range(start, start + sub.n_columns)))
            blocks.append(sub.values)
            masks.append(sub.missing_mask)
            names.extend(sub.column_names)
            kinds.extend(["dummy"] * sub.n_columns)
            sources.extend([var.name] * sub.n_columns)
    matrix = NumericMatrix(
        np.hstack(blocks), np.hstack(masks), tuple(names)
    )
    return QuantifiedTable(
        matrix,
        variables,
        tuple(kinds),
        tuple(sources),
        tuple(dummy_groups),
    )


def correlation_objective(values: np.ndarray) -> float:
    """Sum of squared pairwise correlations between all columns."""
    sd = values.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise ValueError("constant column in objective")
    corr = np.corrcoef(values, rowvar=False)
    upper = np.triu_indices(values.shape[1], k=1)
    return float(np.sum(corr[upper] ** 2))


def _monotone_level_fit(target, codes, n_levels):
    # Weighted least-squares fit of level values to a target column,
    # projected onto non-decreasing level values (pool adjacent violators).
    weights = np.bincount(codes, minlength=n_levels).astype(float)
    sums = np.bincount(codes, weights=target, minlength=n_levels)
    present = weights > 0
    means = sums[present] / weights[present]
    w = weights[present]
    # PAVA over the observed levels.
    vals = means.copy()
    wts = w.copy()
    idx = list(range(len(vals)))
    blocks = [[i] for i in idx]
    v = list(vals)
    bw = list(wts)
    i = 0
    while i < len(v) - 1:
        if v[i] > v[i + 1] + 1e-15:
            merged = (v[i] * bw[i] + v[i + 1] * bw[i + 1]) / (bw[i] + bw[i + 1])
            blocks[i] = blocks[i] + blocks[i + 1]
            v[i] = merged
            bw[i] = bw[i] + bw[i + 1]
            del blocks[i + 1], v[i + 1], bw[i + 1]
            if i > 0:
                i -= 1
        else:
            i += 1
    fitted = np.empty(len(vals))
    for val, members in zip(v, blocks):
        for mbr in members:
            fitted[mbr] = val
    out = np.full(n_levels, np.nan)
    out[present] = fitted
    return out


def optimal_scale(
    m: NumericMatrix,
    ordinal_columns,
    max_iter: int = 50,
    tol: float = 1e-8,
) -> ScalingResult:
    """Refine ordinal level values to maximize squared pairwise correlations.

    Alternating sweep: each ordinal column in turn is regressed on all
    other columns, the fit is collapsed to monotone level values, and
    the column is renormalized.  An update is kept only when it improves
    the objective, so the recorded trace never decreases.  Requires a
    complete matrix.
    """
    if not m.complete:
        raise ValueError("optimal scaling requires a complete matrix (impute first)")
    ordinal_columns = list(ordinal_columns)
    if not ordinal_columns:
        raise ValueError("no ordinal columns given")
    name_to_idx = {nm: j for j, nm in enumerate(m.column_names)}
    values = m.values.copy()

    # Standardize all columns once so correlations are plain dot products.
    mean = values.mean(axis=0)
    sd = values.std(axis=0, ddof=1)
    if np.any(sd == 0):
        bad = [m.column_names[j] for j in np.flatnonzero(sd == 0)]
        raise ValueError(f"constant columns: {bad}")
    values = (values - mean) / sd

    # Recover the level structure of each ordinal column from its
    # distinct values (levels were strictly increasing after univariate
    # quantification).
    col_codes: dict[str, np.ndarray] = {}
    col_n_levels: dict[str, int] = {}
    for name in ordinal_columns:
        j = name_to_idx[name]
        uniq, codes = np.unique(values[:, j], return_inverse=True)
        col_codes[name] = codes
        col_n_levels[name] = len(uniq)

    if m.n_columns == 1:
        name = ordinal_columns[0]
        codes = col_codes[name]
        j = name_to_idx[name]
        levels = {
            name: {
                int(i): float(values[codes == i, j][0])
                for i in range(col_n_levels[name])
            }
        }
        out = NumericMatrix(values, np.zeros_like(values, bool), m.column_names)
        return ScalingResult(levels, (0.0,), out)

    objective = correlation_objective(values)
    trace = [objective]
    n = m.n_rows
    for _ in range(max_iter):
        improved = False
        for name in ordinal_columns:
            j = name_to_idx[name]
            codes = col_codes[name]
            others = np.delete(np.arange(values.shape[1]), j)
            x_others = values[:, others]
            # Least-squares fit of this column on the others.
            design = np.column_stack([np.ones(n), x_others])
            coef, *_ = np.linalg.lstsq(design, values[:, j], rcond=None)
            target = design @ coef
            fitted_levels = _monotone_level_fit(target, codes, col_n_levels[name])
            candidate = fitted_levels[codes]
            csd = candidate.std(ddof=1)
            if csd == 0.0 or not np.isfinite(csd):
                continue
            candidate = (candidate - candidate.mean()) / csd
            old_col = values[:, j].copy()
            values[:, j] = candidate
            new_objective = correlation_objective(values)
            if new_objective > objective:
                objective = new_objective
                improved = True
            else:
                values[:, j] = old_col
        trace.append(objective)
        if not improved or trace[-1] - trace[-2] < tol:
            break

    level_values: dict[str, dict[int, float]] = {}
    for name in ordinal_columns:
        j = name_to_idx[name]
        codes = col_codes[name]
        level_values[name] = {
            int(lvl): float(values[codes == lvl, j][0])
            for lvl in range(col_n_levels[name])
        }
    out = NumericMatrix(values, np.zeros_like(values, bool), m.column_names)
    return ScalingResult(level_values, tuple(trace), out)
