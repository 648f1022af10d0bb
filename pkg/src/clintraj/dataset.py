"""Mixed-type table ingestion and basic numeric preprocessing.

A table is described by an explicit per-column schema (continuous,
binary, ordinal or categorical); cells are kept as raw text tokens with
a missingness mask so that downstream quantification is reproducible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

VARIABLE_KINDS = ("continuous", "binary", "ordinal", "categorical")

DEFAULT_MISSING_TOKENS = frozenset({"", "?", "NA", "N/A", "NaN", "nan", "null", "None"})


class SchemaError(ValueError):
    """Raised when a table does not conform to its declared schema."""


@dataclass(frozen=True)
class VariableSchema:
    """Declared type of one column."""

    name: str
    kind: str
    ordinal_levels: tuple[str, ...] = ()
    missing_tokens: frozenset[str] = DEFAULT_MISSING_TOKENS

    def __post_init__(self):
        if self.kind not in VARIABLE_KINDS:
            raise SchemaError(
                f"column {self.name!r}: unknown kind {self.kind!r}; "
                f"expected one of {VARIABLE_KINDS}"
            )
        if self.kind == "ordinal":
            if not self.ordinal_levels:
                raise SchemaError(f"ordinal column {self.name!r} declares no levels")
            if len(set(self.ordinal_levels)) != len(self.ordinal_levels):
                raise SchemaError(f"ordinal column {self.name!r} has duplicate levels")
        if self.kind == "binary" and self.ordinal_levels and len(self.ordinal_levels) != 2:
            raise SchemaError(
                f"binary column {self.name!r} must declare exactly 2 levels"
            )


@dataclass(frozen=True)
class MixedDataTable:
    """Raw rows of tokens plus a missingness mask."""

    schema: tuple[VariableSchema, ...]
    cells: tuple[tuple[str, ...], ...]
    missing_mask: np.ndarray  # bool, rows x columns

    @property
    def n_rows(self) -> int:
        return len(self.cells)

    @property
    def n_columns(self) -> int:
        return len(self.schema)

    @property
    def column_names(self) -> list[str]:
        return [v.name for v in self.schema]

    def column_index(self, name: str) -> int:
        for i, v in enumerate(self.schema):
            if v.name == name:
                return i
        raise KeyError(f"no column named {name!r}")

    def column_tokens(self, name: str) -> list[str]:
        j = self.column_index(name)
        return [row[j] for row in self.cells]

    def subset_rows(self, keep: np.ndarray) -> "MixedDataTable":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        cells = tuple(self.cells[i] for i in keep)
        return MixedDataTable(self.schema, cells, self.missing_mask[keep])


@dataclass(frozen=True)
class NumericMatrix:
    """Real-valued matrix with a missingness mask and column names."""

    values: np.ndarray
    missing_mask: np.ndarray
    column_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.missing_mask, dtype=bool)
        if values.shape != mask.shape:
            raise ValueError("values and missing_mask shapes differ")
        if not np.all(np.isfinite(values[~mask])):
            raise ValueError("non-missing entries must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing_mask", mask)
        if not self.column_names:
            object.__setattr__(
                self,
                "column_names",
                tuple(f"c{j}" for j in range(values.shape[1])),
            )
        elif len(self.column_names) != values.shape[1]:
            raise ValueError("column_names length does not match matrix width")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    @property
    def complete(self) -> bool:
        return not self.missing_mask.any()


def read_schema(schema_path) -> list[VariableSchema]:
    """Parse a schema file: a JSON array of column descriptors."""
    with open(schema_path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise SchemaError("schema file must contain a JSON array")
    out = []
    for entry in raw:
        levels = tuple(str(t) for t in entry.get("levels", []))
        missing = entry.get("missing_tokens")
        out.append(
            VariableSchema(
                name=str(entry["name"]),
                kind=str(entry["kind"]),
                ordinal_levels=levels,
                missing_tokens=(
                    frozenset(str(t) for t in missing)
                    if missing is not None
                    else DEFAULT_MISSING_TOKENS
                ),
            )
        )
    return out


def write_schema(schema, schema_path) -> None:
    payload = []
    for v in schema:
        entry = {"name": v.name, "kind": v.kind}
        if v.ordinal_levels:
            entry["levels"] = list(v.ordinal_levels)
        if v.missing_tokens != DEFAULT_MISSING_TOKENS:
            entry["missing_tokens"] = sorted(v.missing_tokens)
        payload.append(entry)
    with open(schema_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_table(csv_path, schema_path) -> MixedDataTable:
    """Load a CSV with a header row against a declared schema.

    The schema must cover every CSV column; rows must all have the
    header's width; ordinal cells must hold a declared level or a
    missing token.
    """
    schema = read_schema(schema_path)
    by_name = {v.name: v for v in schema}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{csv_path}: empty file, expected a header row")
        unknown = [c for c in header if c not in by_name]
        if unknown:
            raise SchemaError(f"columns missing from schema: {unknown}")
        absent = [n for n in by_name if n not in header]
        if absent:
            raise SchemaError(f"schema columns not present in CSV: {absent}")
        ordered = [by_name[c] for c in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaError(
                    f"{csv_path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            rows.append(tuple(row))
    mask = np.zeros((len(rows), len(header)), dtype=bool)
    for j, var in enumerate(ordered):
        tokens = set()
        for i, row in enumerate(rows):
            tok = row[j]
            if tok in var.missing_tokens:
                mask[i, j] = True
                continue
            tokens.add(tok)
            if var.kind == "ordinal" and tok not in var.ordinal_levels:
                raise SchemaError(
                    f"{csv_path}: ordinal column {var.name!r} has token {tok!r} "
                    f"outside declared levels {list(var.ordinal_levels)}"
                )
            if var.kind == "continuous":
                try:
                    float(tok)
                except ValueError:
                    raise SchemaError(
                        f"{csv_path}: continuous column {var.name!r} has "
                        f"non-numeric token {tok!r}"
                    ) from None
        if var.kind == "binary" and len(tokens) > 2:
            raise SchemaError(
                f"{csv_path}: binary column {var.name!r} has more than two "
                f"distinct tokens: {sorted(tokens)}"
            )
    return MixedDataTable(tuple(ordered), tuple(rows), mask)


def write_table(table: MixedDataTable, csv_path) -> None:
    """Write raw tokens back out; round-trips bit-identically."""
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.column_names)
        for row in table.cells:
            writer.writerow(row)


def write_matrix(m: NumericMatrix, values_path, mask_path=None) -> None:
    """Persist a matrix as CSV plus an optional 0/1 mask sidecar."""
    with open(values_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(m.column_names)
        for i in range(m.n_rows):
            writer.writerow(
                [
                    "" if m.missing_mask[i, j] else repr(float(m.values[i, j]))
                    for j in range(m.n_columns)
                ]
            )
    if mask_path is not None:
        with open(mask_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(m.column_names)
            for i in range(m.n_rows):
                writer.writerow([int(x) for x in m.missing_mask[i]])


def read_matrix(values_path) -> NumericMatrix:
    with open(values_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    values = np.zeros((len(rows), len(header)))
    mask = np.zeros_like(values, dtype=bool)
    for i, row in enumerate(rows):
        for j, tok in enumerate(row):
            if tok == "":
                mask[i, j] = True
            else:
                values[i, j] = float(tok)
    return NumericMatrix(values, mask, tuple(header))


def standardize(m: NumericMatrix) -> NumericMatrix:
    """Scale every column to zero mean and unit sample variance.

    Statistics use the non-missing entries only, with the unbiased
    (divide by N-1) variance convention; missing entries stay missing.
    """
    values = m.values.copy()
    for j in range(m.n_columns):
        obs = ~m.missing_mask[:, j]
        col = values[obs, j]
        if col.size < 2:
            raise ValueError(
                f"column {m.column_names[j]!r} needs at least 2 observed values"
            )
        sd = float(np.std(col, ddof=1))
        if sd == 0.0:
            raise ValueError(f"column {m.column_names[j]!r} is constant")
        values[obs, j] = (col - col.mean()) / sd
    return NumericMatrix(values, m.missing_mask.copy(), m.column_names)


def estimate_dimension_pca(m: NumericMatrix, c: float = 10.0) -> int:
    """Count covariance eigenvalues above a fraction of the largest.

    Returns how many eigenvalues strictly exceed ``lambda0 / c`` where
    ``lambda0`` is the top eigenvalue; ``c`` bounds the condition
    number of the covariance after reduction.
    """
    if not m.complete:
        raise ValueError("dimension estimate requires a complete matrix")
    if c <= 1.0:
        raise ValueError("condition-number bound must exceed 1")
    if m.n_rows < 2:
        raise ValueError("need at least 2 rows")
    centered = m.values - m.values.mean(axis=0)
    cov = centered.T @ centered / m.n_rows
    eig = np.linalg.eigvalsh(cov)
    top = eig[-1]
    if top <= 0:
        return 0
    return int(np.sum(eig > top / c))
