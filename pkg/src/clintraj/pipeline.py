"""Pipeline orchestration: validated config, staged artifacts, provenance.

Each subcommand reads the artifacts of its upstream stage from the
output directory, writes its own artifacts plus a manifest recording
input hashes, parameters and the seed, and can therefore be re-run in
isolation.  Artifact writers are deterministic: with a fixed config and
seed, two runs produce byte-identical files, including the SVG.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset
from . import layout as layout_mod
from . import quantify as quantify_mod
from .elpigraph import (
    ElasticParams,
    PrincipalGraph,
    compute_energy,
    explained_variance,
    extend_leaves,
    grow_tree,
    partition_points,
    prune_tree,
)
from .impute import MissingnessPolicy, default_svd_order, filter_table, impute
from .stats import (
    anova_association,
    benjamini_hochberg,
    chi2_association,
    screen_trajectory_associations,
)
from .survival import (
    EventTable,
    cox_fit,
    cox_table,
    cause_specific_hazards,
    curve_table,
    group_cumhazard_compare,
    nelson_aalen,
    trajectory_events,
)
from .treeanalysis import (
    PseudotimeAssignment,
    compute_pseudotime,
    decompose_segments,
    extract_trajectories,
    partition_by_segments,
    select_root,
)

FORMAT_VERSION = 1

STAGES = (
    "quantify",
    "impute",
    "reduce",
    "fit",
    "segment",
    "pseudotime",
    "associate",
    "survival",
    "layout",
)

# Artifact filenames, keyed by the stage that writes them.
FILTERED_TABLE = "table_filtered.csv"
FILTERED_SCHEMA = "schema_filtered.json"
QUANTIFIED = "quantified.csv"
QUANTIFY_META = "quantify_meta.json"
IMPUTED = "imputed.csv"
IMPUTE_REPORT = "impute_report.json"
REDUCED = "reduced.csv"
PCA_META = "pca.json"
TREE = "tree.json"
SEGMENTS = "segments.csv"
SEGMENTS_META = "segments_meta.json"
PSEUDOTIME = "pseudotime.csv"
TRAJECTORIES = "trajectories.json"
ASSOCIATIONS = "associations.csv"
SEGMENT_TESTS = "segment_tests.csv"
ASSOCIATE_SUMMARY = "associate_summary.json"
SURVIVAL_SUMMARY = "survival_summary.json"
COX_TABLE = "cox.csv"
LOGRANK = "logrank.json"
LAYOUT_SVG = "layout.svg"
LAYOUT_JSON = "layout.json"


class PipelineError(Exception):
    """User-correctable failure: bad config or missing artifacts."""


class ConfigError(PipelineError):
    """A config field is missing, has the wrong type, or is out of range."""


class ArtifactError(PipelineError):
    """An upstream artifact is absent or unusable for the requested stage."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class SurvivalSpec:
    """Which table columns drive the survival stage."""

    event_column: str
    event_value: str
    cause_column: str | None = None
    covariates: tuple[str, ...] = ()
    group_column: str | None = None
    group_value: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    """Fully validated pipeline settings with resolved paths."""

    data: Path
    schema: Path
    out: Path
    seed: int = 0
    pca_components: int = 12
    policy: MissingnessPolicy = MissingnessPolicy()
    svd_order_auto: bool = True
    elastic: ElasticParams = ElasticParams()
    optimal_scaling: bool = False
    root_node: int | None = None
    root_column: str | None = None
    root_target: str | None = None
    r_squared: float = 0.3
    p_value: float = 0.05
    scattering: float | None = None
    composition_column: str | None = None
    width_column: str | None = None
    svg_size: tuple[int, int] = (640, 480)
    survival: SurvivalSpec | None = None


_REQUIRED = object()


def _dotted(where: str, key: str) -> str:
    return f"{where}.{key}" if where else key


def _bad(where: str, key: str, want: str, got) -> None:
    raise ConfigError(
        f"config field {_dotted(where, key)!r} must be {want}, got {got!r}"
    )


def _pop(section: dict, key: str, where: str, default=_REQUIRED):
    if key in section:
        return section.pop(key)
    if default is _REQUIRED:
        raise ConfigError(f"missing config field {_dotted(where, key)!r}")
    return default


def _as_str(value, where: str, key: str) -> str:
    if not isinstance(value, str) or not value:
        _bad(where, key, "a non-empty string", value)
    return value


def _as_opt_str(value, where: str, key: str) -> str | None:
    if value is None:
        return None
    return _as_str(value, where, key)


def _as_bool(value, where: str, key: str) -> bool:
    if not isinstance(value, bool):
        _bad(where, key, "a boolean", value)
    return value


def _as_int(value, where: str, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        _bad(where, key, "an integer", value)
    return value


def _as_float(value, where: str, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _bad(where, key, "a number", value)
    return float(value)


def _as_section(value, where: str, key: str) -> dict:
    if not isinstance(value, dict):
        _bad(where, key, "an object", value)
    return dict(value)


def _reject_unknown(section: dict, where: str) -> None:
    if section:
        key = sorted(section)[0]
        raise ConfigError(f"unknown config field {_dotted(where, key)!r}")


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _parse_missingness(raw: dict) -> tuple[MissingnessPolicy, bool]:
    where = "missingness"
    order = _pop(raw, "svd_order", where, default="auto")
    auto = order in (None, "auto")
    kwargs = {
        "delta_row": _as_float(_pop(raw, "delta_row", where, 0.2), where, "delta_row"),
        "delta_column": _as_float(
            _pop(raw, "delta_column", where, 0.3), where, "delta_column"
        ),
        "imputer": _as_str(
            _pop(raw, "imputer", where, "svd_complete"), where, "imputer"
        ),
        "round_discrete": _as_bool(
            _pop(raw, "round_discrete", where, True), where, "round_discrete"
        ),
        "svd_order": 1 if auto else _as_int(order, where, "svd_order"),
    }
    _reject_unknown(raw, where)
    try:
        return MissingnessPolicy(**kwargs), auto
    except ValueError as exc:
        raise ConfigError(f"config section 'missingness': {exc}") from None


def _parse_elastic(raw: dict) -> ElasticParams:
    where = "elastic"
    r0 = _pop(raw, "r0", where, default=None)
    kwargs = {
        "lam": _as_float(_pop(raw, "lambda", where, 0.05), where, "lambda"),
        "mu": _as_float(_pop(raw, "mu", where, 0.1), where, "mu"),
        "alpha": _as_float(_pop(raw, "alpha", where, 0.01), where, "alpha"),
        "r0": math.inf if r0 is None else _as_float(r0, where, "r0"),
        "n_nodes": _as_int(_pop(raw, "n_nodes", where, 50), where, "n_nodes"),
    }
    _reject_unknown(raw, where)
    try:
        return ElasticParams(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"config section 'elastic': {exc}") from None


def _parse_root(raw: dict) -> tuple[int | None, str | None, str | None]:
    where = "root"
    node = _pop(raw, "node", where, default=None)
    column = _as_opt_str(_pop(raw, "column", where, None), where, "column")
    target = _as_opt_str(_pop(raw, "target", where, None), where, "target")
    _reject_unknown(raw, where)
    if node is not None:
        node = _as_int(node, where, "node")
        if column is not None or target is not None:
            raise ConfigError(
                "config field 'root' takes either 'node' or "
                "'column'+'target', not both"
            )
        if node < 0:
            _bad(where, "node", "a non-negative integer", node)
        return node, None, None
    if (column is None) != (target is None):
        raise ConfigError(
            "config field 'root' needs both 'column' and 'target' "
            "for automatic root selection"
        )
    return None, column, target


def _parse_survival(raw: dict) -> SurvivalSpec:
    where = "survival"
    covs = _pop(raw, "covariates", where, default=[])
    if not isinstance(covs, list) or not all(isinstance(c, str) for c in covs):
        _bad(where, "covariates", "a list of column names", covs)
    spec = SurvivalSpec(
        event_column=_as_str(_pop(raw, "event_column", where), where, "event_column"),
        event_value=_as_str(_pop(raw, "event_value", where), where, "event_value"),
        cause_column=_as_opt_str(
            _pop(raw, "cause_column", where, None), where, "cause_column"
        ),
        covariates=tuple(covs),
        group_column=_as_opt_str(
            _pop(raw, "group_column", where, None), where, "group_column"
        ),
        group_value=_as_opt_str(
            _pop(raw, "group_value", where, None), where, "group_value"
        ),
    )
    _reject_unknown(raw, where)
    if (spec.group_column is None) != (spec.group_value is None):
        raise ConfigError(
            "config section 'survival' needs both 'group_column' and "
            "'group_value' for a group comparison"
        )
    return spec


def load_config(
    path, seed: int | None = None, out: str | None = None
) -> PipelineConfig:
    """Parse and validate a JSON config file.

    ``data``/``schema`` paths are resolved relative to the config file.
    The output directory comes from the ``--out`` flag if given, else
    the ``CLINTRAJ_OUT`` environment variable, else the config; the
    ``--seed`` flag overrides the config seed the same way.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    try:
        raw = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")

    base = path.parent
    data = _resolve(base, _as_str(_pop(raw, "data", ""), "", "data"))
    schema = _resolve(base, _as_str(_pop(raw, "schema", ""), "", "schema"))
    cfg_out = _as_str(_pop(raw, "out", "", default="out"), "", "out")
    out_value = out or os.environ.get("CLINTRAJ_OUT") or cfg_out
    cfg_seed = _as_int(_pop(raw, "seed", "", default=0), "", "seed")
    seed_value = cfg_seed if seed is None else seed
    pca = _as_int(_pop(raw, "pca_components", "", default=12), "", "pca_components")
    if pca < 1:
        _bad("", "pca_components", "an integer >= 1", pca)
    policy, svd_auto = _parse_missingness(
        _as_section(_pop(raw, "missingness", "", {}), "", "missingness")
    )
    elastic = _parse_elastic(
        _as_section(_pop(raw, "elastic", "", {}), "", "elastic")
    )
    scaling = _as_bool(
        _pop(raw, "optimal_scaling", "", default=False), "", "optimal_scaling"
    )
    root_raw = _pop(raw, "root", "", default=None)
    if root_raw is None:
        root_node = root_column = root_target = None
    else:
        root_node, root_column, root_target = _parse_root(
            _as_section(root_raw, "", "root")
        )

    thresholds = _as_section(_pop(raw, "thresholds", "", {}), "", "thresholds")
    r_squared = _as_float(
        _pop(thresholds, "r_squared", "thresholds", 0.3), "thresholds", "r_squared"
    )
    p_value = _as_float(
        _pop(thresholds, "p_value", "thresholds", 0.05), "thresholds", "p_value"
    )
    _reject_unknown(thresholds, "thresholds")
    if not 0.0 < p_value <= 1.0:
        _bad("thresholds", "p_value", "in (0, 1]", p_value)
    if r_squared < 0.0:
        _bad("thresholds", "r_squared", "non-negative", r_squared)

    lay = _as_section(_pop(raw, "layout", "", {}), "", "layout")
    scattering = _pop(lay, "scattering", "layout", default=None)
    if scattering is not None:
        scattering = _as_float(scattering, "layout", "scattering")
        if scattering < 0.0:
            _bad("layout", "scattering", "non-negative", scattering)
    composition = _as_opt_str(
        _pop(lay, "composition_column", "layout", None), "layout", "composition_column"
    )
    width = _as_opt_str(
        _pop(lay, "width_column", "layout", None), "layout", "width_column"
    )
    size_raw = _pop(lay, "size", "layout", default=[640, 480])
    if (
        not isinstance(size_raw, list)
        or len(size_raw) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in size_raw)
        or min(size_raw) <= 0
    ):
        _bad("layout", "size", "a [width, height] pair of positive integers", size_raw)
    _reject_unknown(lay, "layout")

    surv_raw = _pop(raw, "survival", "", default=None)
    survival = (
        None
        if surv_raw is None
        else _parse_survival(_as_section(surv_raw, "", "survival"))
    )
    _reject_unknown(raw, "")

    return PipelineConfig(
        data=data,
        schema=schema,
        out=Path(out_value),
        seed=seed_value,
        pca_components=pca,
        policy=policy,
        svd_order_auto=svd_auto,
        elastic=elastic,
        optimal_scaling=scaling,
        root_node=root_node,
        root_column=root_column,
        root_target=root_target,
        r_squared=r_squared,
        p_value=p_value,
        scattering=scattering,
        composition_column=composition,
        width_column=width,
        svg_size=(size_raw[0], size_raw[1]),
        survival=survival,
    )


# ---------------------------------------------------------------------------
# Artifact plumbing


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    # repr keeps full precision and is byte-stable across runs.
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_manifest(cfg, stage, inputs, outputs, parameters) -> None:
    """Record hashes of everything a stage read and wrote.

    Keys are file basenames, so manifests do not depend on where the
    output directory lives and stay byte-identical across runs.
    """
    payload = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "seed": cfg.seed,
        "parameters": parameters,
        "inputs": {Path(p).name: _sha256(p) for p in inputs},
        "outputs": {name: _sha256(cfg.out / name) for name in outputs},
    }
    _write_json(cfg.out / f"manifest_{stage}.json", payload)


def _require(cfg: PipelineConfig, name: str, produced_by: str) -> Path:
    path = cfg.out / name
    if not path.exists():
        raise ArtifactError(
            f"missing upstream artifact {name!r}; run the {produced_by!r} "
            f"stage first"
        )
    return path


def _matrix_for(cfg: PipelineConfig, stage: str, names) -> tuple:
    """First existing matrix artifact from ``names``, or an error."""
    for name in names:
        path = cfg.out / name
        if path.exists():
            return dataset.read_matrix(path), name
    raise ArtifactError(
        f"missing upstream artifact {names[-1]!r}; run the 'quantify' "
        f"stage before {stage!r}"
    )


def _complete_or_fail(m, source: str, stage: str):
    if not m.complete:
        raise ArtifactError(
            f"artifact {source!r} still has missing cells; run the "
            f"'impute' stage before {stage!r}"
        )
    return m


def _load_tree(cfg: PipelineConfig) -> tuple[PrincipalGraph, dict]:
    meta = _read_json(_require(cfg, TREE, "fit"))
    g = PrincipalGraph(
        np.array(meta["nodes"], dtype=float),
        tuple(tuple(e) for e in meta["edges"]),
    )
    return g, meta


def _load_fit_input(cfg: PipelineConfig, stage: str):
    """The matrix the tree was fitted on, per the fit stage's record."""
    _, meta = _load_tree(cfg)
    name = meta["input_matrix"]
    path = _require(cfg, name, "fit")
    return dataset.read_matrix(path), name


def _load_filtered_table(cfg: PipelineConfig):
    table_path = _require(cfg, FILTERED_TABLE, "quantify")
    schema_path = _require(cfg, FILTERED_SCHEMA, "quantify")
    return dataset.load_table(table_path, schema_path)


def _load_assignment(cfg: PipelineConfig) -> PseudotimeAssignment:
    pt_path = _require(cfg, PSEUDOTIME, "pseudotime")
    traj = _read_json(_require(cfg, TRAJECTORIES, "pseudotime"))
    with open(pt_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = list(reader)
    edge = np.array([int(r[2]) for r in rows])
    eps = np.array([float(r[3]) for r in rows])
    d2 = np.array([float(r[4]) for r in rows])
    pt = np.array([float(r[1]) for r in rows])
    ids = tuple(
        tuple(int(t) for t in r[5].split("|")) if r[5] else () for r in rows
    )
    return PseudotimeAssignment(int(traj["root"]), edge, eps, d2, pt, ids)


def _table_column(table, name: str, where: str) -> int:
    try:
        return table.column_index(name)
    except KeyError:
        raise ConfigError(
            f"config field {where!r} names column {name!r}, which is not "
            f"in the filtered table"
        ) from None


# ---------------------------------------------------------------------------
# Stages


def stage_quantify(cfg: PipelineConfig) -> list[str]:
    """Load, filter by missingness, and quantify the raw table."""
    table = dataset.load_table(cfg.data, cfg.schema)
    filtered, report = filter_table(table, cfg.policy)
    q = quantify_mod.quantify_table(filtered)
    matrix = q.matrix
    scaling_trace = None
    if cfg.optimal_scaling:
        if not matrix.complete:
            raise ConfigError(
                "optimal_scaling requires a table with no residual missing "
                "cells; impute first or disable it"
            )
        ordinals = [
            name
            for name, kind in zip(matrix.column_names, q.column_kinds)
            if kind in ("ordinal", "binary")
        ]
        if ordinals:
            scaled = quantify_mod.optimal_scale(matrix, ordinals)
            matrix = scaled.matrix
            scaling_trace = list(scaled.objective_trace)

    cfg.out.mkdir(parents=True, exist_ok=True)
    dataset.write_table(filtered, cfg.out / FILTERED_TABLE)
    dataset.write_schema(filtered.schema, cfg.out / FILTERED_SCHEMA)
    dataset.write_matrix(matrix, cfg.out / QUANTIFIED)
    meta = {
        "format_version": FORMAT_VERSION,
        "column_kinds": list(q.column_kinds),
        "source_columns": list(q.source_columns),
        "dummy_groups": [list(group) for group in q.dummy_groups],
        "level_values": {
            name: {str(level): value for level, value in var.level_values.items()}
            for name, var in sorted(q.variables.items())
        },
        "filter": {
            "dropped_columns": list(report.dropped_columns),
            "n_dropped_columns": len(report.dropped_columns),
            "dropped_rows": list(report.dropped_rows),
            "n_dropped_rows": len(report.dropped_rows),
            "n_rows_kept": filtered.n_rows,
            "n_complete_rows": report.n_complete_rows,
            "residual_missing_fraction": report.residual_missing_fraction,
        },
        "optimal_scaling": cfg.optimal_scaling,
        "scaling_trace": scaling_trace,
    }
    _write_json(cfg.out / QUANTIFY_META, meta)
    outputs = [FILTERED_TABLE, FILTERED_SCHEMA, QUANTIFIED, QUANTIFY_META]
    _write_manifest(
        cfg,
        "quantify",
        inputs=[cfg.data, cfg.schema],
        outputs=outputs,
        parameters={
            "delta_row": cfg.policy.delta_row,
            "delta_column": cfg.policy.delta_column,
            "optimal_scaling": cfg.optimal_scaling,
        },
    )
    return outputs


def stage_impute(cfg: PipelineConfig) -> list[str]:
    """Fill residual gaps in the quantified matrix by SVD projection."""
    qpath = _require(cfg, QUANTIFIED, "quantify")
    meta = _read_json(_require(cfg, QUANTIFY_META, "quantify"))
    m = dataset.read_matrix(qpath)
    policy = cfg.policy
    if cfg.svd_order_auto and not m.complete:
        policy = dataclasses.replace(policy, svd_order=default_svd_order(m))
    imputed, report = impute(
        m,
        policy,
        column_kinds=tuple(meta["column_kinds"]),
        dummy_groups=tuple(tuple(g) for g in meta["dummy_groups"]),
    )
    dataset.write_matrix(imputed, cfg.out / IMPUTED)
    _write_json(
        cfg.out / IMPUTE_REPORT,
        {
            "format_version": FORMAT_VERSION,
            "imputer": policy.imputer,
            "svd_order": policy.svd_order,
            "svd_order_auto": cfg.svd_order_auto,
            "round_discrete": policy.round_discrete,
            "n_imputed_cells": len(report.cells),
            "n_rounded_cells": sum(1 for c in report.cells if c.was_rounded),
            "converged": report.converged,
            "n_iterations": report.n_iterations,
        },
    )
    outputs = [IMPUTED, IMPUTE_REPORT]
    _write_manifest(
        cfg,
        "impute",
        inputs=[qpath, cfg.out / QUANTIFY_META],
        outputs=outputs,
        parameters={
            "imputer": policy.imputer,
            "svd_order": policy.svd_order,
            "round_discrete": policy.round_discrete,
        },
    )
    return outputs


def stage_reduce(cfg: PipelineConfig) -> list[str]:
    """Standardize the matrix and project it onto the leading PCs."""
    m, source = _matrix_for(cfg, "reduce", (IMPUTED, QUANTIFIED))
    _complete_or_fail(m, source, "reduce")
    std = dataset.standardize(m)
    k = cfg.pca_components
    if k > std.n_columns:
        raise ConfigError(
            f"pca_components={k} exceeds the {std.n_columns} available columns"
        )
    n = std.n_rows
    _, s, vt = np.linalg.svd(std.values, full_matrices=False)
    # Fix each component's sign so its largest loading is positive;
    # SVD alone leaves the sign arbitrary.
    for comp in range(vt.shape[0]):
        j = int(np.argmax(np.abs(vt[comp])))
        if vt[comp, j] < 0:
            vt[comp] = -vt[comp]
    scores = std.values @ vt[:k].T
    eig = s**2 / (n - 1)
    ratio = eig / eig.sum()
    reduced = dataset.NumericMatrix(
        scores,
        np.zeros_like(scores, dtype=bool),
        tuple(f"pc{i + 1}" for i in range(k)),
    )
    dataset.write_matrix(reduced, cfg.out / REDUCED)
    _write_json(
        cfg.out / PCA_META,
        {
            "format_version": FORMAT_VERSION,
            "n_components": k,
            "input_matrix": source,
            "column_names": list(std.column_names),
            "explained_variance_ratio": [float(r) for r in ratio],
            "first_two_ratio": float(ratio[: min(2, len(ratio))].sum()),
            "kept_variance_fraction": float(ratio[:k].sum()),
            "components": [[float(v) for v in vt[i]] for i in range(k)],
        },
    )
    outputs = [REDUCED, PCA_META]
    _write_manifest(
        cfg,
        "reduce",
        inputs=[cfg.out / source],
        outputs=outputs,
        parameters={"pca_components": k, "input_matrix": source},
    )
    return outputs


def stage_fit(cfg: PipelineConfig) -> list[str]:
    """Grow, prune and leaf-extend a principal tree on the point cloud."""
    m, source = _matrix_for(cfg, "fit", (REDUCED, IMPUTED, QUANTIFIED))
    _complete_or_fail(m, source, "fit")
    x = m.values
    fit = grow_tree(x, cfg.elastic)
    g = extend_leaves(x, prune_tree(fit.graph))
    part = partition_points(x, g)
    energy = compute_energy(x, g, part)
    ev = explained_variance(x, g)
    ev_total = ev
    if source == REDUCED and (cfg.out / PCA_META).exists():
        pca_meta = _read_json(cfg.out / PCA_META)
        ev_total = ev * float(pca_meta["kept_variance_fraction"])
    params = cfg.elastic
    _write_json(
        cfg.out / TREE,
        {
            "format_version": FORMAT_VERSION,
            "input_matrix": source,
            "n_points": m.n_rows,
            "nodes": [[float(v) for v in row] for row in g.node_positions],
            "edges": [list(e) for e in g.edges],
            "params": {
                "lambda": params.lam,
                "mu": params.mu,
                "alpha": params.alpha,
                "r0": None if math.isinf(params.r0) else params.r0,
                "n_nodes": params.n_nodes,
            },
            "converged": fit.converged,
            "energy": {
                "total": energy.total,
                "msd": energy.msd,
                "stretching": energy.stretching,
                "bending": energy.bending,
            },
            "explained_variance": ev,
            "explained_variance_total": ev_total,
        },
    )
    inputs = [cfg.out / source]
    if source == REDUCED and (cfg.out / PCA_META).exists():
        inputs.append(cfg.out / PCA_META)
    outputs = [TREE]
    _write_manifest(
        cfg,
        "fit",
        inputs=inputs,
        outputs=outputs,
        parameters={
            "lambda": params.lam,
            "mu": params.mu,
            "alpha": params.alpha,
            "r0": None if math.isinf(params.r0) else params.r0,
            "n_nodes": params.n_nodes,
            "input_matrix": source,
        },
    )
    return outputs


def stage_segment(cfg: PipelineConfig) -> list[str]:
    """Split the tree into non-branching segments and label every point."""
    g, _ = _load_tree(cfg)
    m, source = _load_fit_input(cfg, "segment")
    seg = decompose_segments(g)
    labels = partition_by_segments(m.values, g, seg)
    part = partition_points(m.values, g)
    _write_csv(
        cfg.out / SEGMENTS,
        ("point", "node", "segment"),
        (
            (i, int(part.node_index[i]), int(labels[i]))
            for i in range(m.n_rows)
        ),
    )
    _write_json(
        cfg.out / SEGMENTS_META,
        {
            "format_version": FORMAT_VERSION,
            "n_segments": seg.n_segments,
            "segments": [
                {"id": i, "kind": seg.kinds[i], "nodes": list(seg.segments[i])}
                for i in range(seg.n_segments)
            ],
        },
    )
    outputs = [SEGMENTS, SEGMENTS_META]
    _write_manifest(
        cfg,
        "segment",
        inputs=[cfg.out / TREE, cfg.out / source],
        outputs=outputs,
        parameters={"input_matrix": source},
    )
    return outputs


def stage_pseudotime(cfg: PipelineConfig) -> list[str]:
    """Pick the root and assign every point a geodesic pseudotime."""
    g, _ = _load_tree(cfg)
    m, source = _load_fit_input(cfg, "pseudotime")
    inputs = [cfg.out / TREE, cfg.out / source]
    if cfg.root_node is not None:
        root = cfg.root_node
        if root >= g.n_nodes:
            raise ConfigError(
                f"config field 'root.node' is {root} but the tree has "
                f"{g.n_nodes} nodes"
            )
        root_meta = {"mode": "manual", "node": root}
    elif cfg.root_column is not None:
        table = _load_filtered_table(cfg)
        j = _table_column(table, cfg.root_column, "root.column")
        classes = np.array([row[j] for row in table.cells], dtype=object)
        part = partition_points(m.values, g)
        try:
            root = select_root(g, part.node_index, classes, cfg.root_target)
        except ValueError as exc:
            raise ConfigError(f"config field 'root.target': {exc}") from None
        inputs += [cfg.out / FILTERED_TABLE, cfg.out / FILTERED_SCHEMA]
        root_meta = {
            "mode": "auto",
            "node": root,
            "column": cfg.root_column,
            "target": cfg.root_target,
        }
    else:
        raise ConfigError(
            "config field 'root' is required for the pseudotime stage"
        )
    assignment = compute_pseudotime(m.values, g, root)
    trajectories = extract_trajectories(g, root)
    _write_csv(
        cfg.out / PSEUDOTIME,
        ("point", "pseudotime", "edge", "epsilon", "sq_distance", "trajectories"),
        (
            (
                i,
                _fmt(assignment.pt[i]),
                int(assignment.edge[i]),
                _fmt(assignment.epsilon[i]),
                _fmt(assignment.sq_distance[i]),
                "|".join(str(t) for t in assignment.trajectory_ids[i]),
            )
            for i in range(m.n_rows)
        ),
    )
    _write_json(
        cfg.out / TRAJECTORIES,
        {
            "format_version": FORMAT_VERSION,
            "root": root,
            "root_selection": root_meta,
            "n_trajectories": len(trajectories),
            "paths": [list(t.nodes) for t in trajectories],
        },
    )
    outputs = [PSEUDOTIME, TRAJECTORIES]
    _write_manifest(
        cfg,
        "pseudotime",
        inputs=inputs,
        outputs=outputs,
        parameters={"root": root_meta, "metric": "edges", "input_matrix": source},
    )
    return outputs


def stage_associate(cfg: PipelineConfig) -> list[str]:
    """Screen variables against pseudotime and against segments."""
    assignment = _load_assignment(cfg)
    m, source = _matrix_for(cfg, "associate", (IMPUTED, QUANTIFIED))
    _complete_or_fail(m, source, "associate")
    screen = screen_trajectory_associations(assignment, m, threshold=cfg.r_squared)
    rows = []
    for j, name in enumerate(screen.variables):
        for t in range(screen.n_trajectories):
            r2 = screen.r_squared[j, t]
            rows.append(
                (
                    name,
                    t,
                    "" if np.isnan(r2) else _fmt(r2),
                    int(screen.passed[j, t]),
                )
            )
    _write_csv(
        cfg.out / ASSOCIATIONS,
        ("variable", "trajectory", "r_squared", "passed"),
        rows,
    )
    passed_variables = [
        name
        for j, name in enumerate(screen.variables)
        if bool(screen.passed[j].any())
    ]

    # Segment-level tests run on the raw tokens: chi-squared for the
    # discrete kinds, one-way ANOVA for continuous columns.
    seg_path = _require(cfg, SEGMENTS, "segment")
    with open(seg_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        seg_labels = np.array([int(r[2]) for r in reader])
    table = _load_filtered_table(cfg)
    test_rows = []
    results = []
    for j, var in enumerate(table.schema):
        observed = ~table.missing_mask[:, j]
        if int(observed.sum()) < 3:
            continue
        labels = seg_labels[observed]
        tokens = [row[j] for i, row in enumerate(table.cells) if observed[i]]
        try:
            if var.kind == "continuous":
                res = anova_association(
                    labels, np.array([float(t) for t in tokens]), variable=var.name
                )
            else:
                res = chi2_association(labels, np.array(tokens), variable=var.name)
        except ValueError:
            continue  # degenerate table (single segment or single level)
        results.append((var.kind, res))
    q_values = benjamini_hochberg([res.p_value for _, res in results])
    for (kind, res), q in zip(results, q_values):
        test_rows.append(
            (
                res.variable,
                kind,
                res.test,
                _fmt(res.statistic),
                _fmt(res.p_value),
                _fmt(float(q)),
                int(q <= cfg.p_value),
            )
        )
    _write_csv(
        cfg.out / SEGMENT_TESTS,
        ("variable", "kind", "test", "statistic", "p_value", "q_value", "significant"),
        test_rows,
    )
    _write_json(
        cfg.out / ASSOCIATE_SUMMARY,
        {
            "format_version": FORMAT_VERSION,
            "r_squared_threshold": cfg.r_squared,
            "p_value_threshold": cfg.p_value,
            "n_trajectories": screen.n_trajectories,
            "n_variables": len(screen.variables),
            "n_passed_variables": len(passed_variables),
            "passed_variables": passed_variables,
            "n_segment_tests": len(test_rows),
            "n_significant_segment_tests": int(sum(r[6] for r in test_rows)),
        },
    )
    outputs = [ASSOCIATIONS, SEGMENT_TESTS, ASSOCIATE_SUMMARY]
    _write_manifest(
        cfg,
        "associate",
        inputs=[
            cfg.out / PSEUDOTIME,
            cfg.out / TRAJECTORIES,
            cfg.out / source,
            cfg.out / SEGMENTS,
            cfg.out / FILTERED_TABLE,
            cfg.out / FILTERED_SCHEMA,
        ],
        outputs=outputs,
        parameters={
            "r_squared": cfg.r_squared,
            "p_value": cfg.p_value,
            "input_matrix": source,
        },
    )
    return outputs


def _safe_label(label: str, used: set[str]) -> str:
    safe = "".join(ch if ch.isalnum() else "-" for ch in str(label)) or "x"
    out = safe
    k = 2
    while out in used:
        out = f"{safe}{k}"
        k += 1
    used.add(out)
    return out


def stage_survival(cfg: PipelineConfig) -> list[str]:
    """Cumulative-hazard curves along trajectories, plus optional models.

    Subjects enter every trajectory they lie on; a subject's time is its
    own pseudotime, with non-events censored there.  A missing event
    cell counts as censored, a missing cause on an event row becomes the
    label ``unknown``.
    """
    spec = cfg.survival
    if spec is None:
        raise ConfigError(
            "config section 'survival' is required for the survival stage"
        )
    assignment = _load_assignment(cfg)
    traj_meta = _read_json(cfg.out / TRAJECTORIES)
    table = _load_filtered_table(cfg)
    if table.n_rows != len(assignment.pt):
        raise ArtifactError(
            "filtered table and pseudotime artifacts disagree on the "
            "number of rows; re-run the pipeline from 'quantify'"
        )
    j_event = _table_column(table, spec.event_column, "survival.event_column")
    event_tokens = [row[j_event] for row in table.cells]
    event_missing = table.missing_mask[:, j_event]
    event = np.array(
        [
            (not miss) and tok == spec.event_value
            for tok, miss in zip(event_tokens, event_missing)
        ]
    )
    causes = None
    causes_seen: list[str] = []
    if spec.cause_column is not None:
        j_cause = _table_column(table, spec.cause_column, "survival.cause_column")
        cause_missing = table.missing_mask[:, j_cause]
        causes = tuple(
            ("unknown" if cause_missing[i] else row[j_cause]) if event[i] else None
            for i, row in enumerate(table.cells)
        )
        causes_seen = sorted({c for c in causes if c is not None})

    inputs = [
        cfg.out / PSEUDOTIME,
        cfg.out / TRAJECTORIES,
        cfg.out / FILTERED_TABLE,
        cfg.out / FILTERED_SCHEMA,
    ]
    outputs: list[str] = []
    per_trajectory = []
    used_names: set[str] = set()
    cause_files: dict[str, str] = {
        c: _safe_label(c, used_names) for c in causes_seen
    }
    for t in range(int(traj_meta["n_trajectories"])):
        events_t = trajectory_events(assignment, event, t, cause=causes)
        curve = nelson_aalen(events_t)
        name = f"hazard_total_traj{t}.csv"
        _write_csv(
            cfg.out / name,
            ("time", "cumulative_hazard", "variance"),
            ([_fmt(a), _fmt(b), _fmt(c)] for a, b, c in curve_table(curve)),
        )
        outputs.append(name)
        if causes is not None and int(events_t.event.sum()) > 0:
            for label, sub_curve in sorted(cause_specific_hazards(events_t).items()):
                cname = f"hazard_cause-{cause_files[label]}_traj{t}.csv"
                _write_csv(
                    cfg.out / cname,
                    ("time", "cumulative_hazard", "variance"),
                    ([_fmt(a), _fmt(b), _fmt(c)] for a, b, c in curve_table(sub_curve)),
                )
                outputs.append(cname)
        per_trajectory.append(
            {
                "trajectory": t,
                "n_subjects": int(events_t.n),
                "n_events": int(events_t.event.sum()),
            }
        )

    summary = {
        "format_version": FORMAT_VERSION,
        "event_column": spec.event_column,
        "event_value": spec.event_value,
        "n_subjects": int(len(event)),
        "n_events": int(event.sum()),
        "n_missing_event_cells": int(event_missing.sum()),
        "cause_column": spec.cause_column,
        "causes": causes_seen,
        "cause_files": cause_files,
        "per_trajectory": per_trajectory,
    }

    if spec.covariates:
        m, msource = _matrix_for(cfg, "survival", (IMPUTED, QUANTIFIED))
        _complete_or_fail(m, msource, "survival")
        std = dataset.standardize(m)
        missing = [c for c in spec.covariates if c not in std.column_names]
        if missing:
            raise ConfigError(
                f"config field 'survival.covariates' names unknown "
                f"columns: {missing}"
            )
        cols = [std.column_names.index(c) for c in spec.covariates]
        fit = cox_fit(
            EventTable(
                assignment.pt,
                event,
                covariates=std.values[:, cols],
                covariate_names=tuple(spec.covariates),
            )
        )
        _write_csv(
            cfg.out / COX_TABLE,
            ("covariate", "coefficient", "std_error", "p_value"),
            (
                (
                    row["covariate"],
                    _fmt(row["coefficient"]),
                    _fmt(row["std_error"]),
                    _fmt(row["p_value"]),
                )
                for row in cox_table(fit)
            ),
        )
        outputs.append(COX_TABLE)
        inputs.append(cfg.out / msource)
        summary["cox"] = {
            "covariates": list(spec.covariates),
            "log_likelihood": fit.log_likelihood,
            "converged": fit.converged,
            "input_matrix": msource,
        }

    if spec.group_column is not None:
        j_group = _table_column(table, spec.group_column, "survival.group_column")
        group_missing = table.missing_mask[:, j_group]
        group = np.array(
            [
                int((not group_missing[i]) and row[j_group] == spec.group_value)
                for i, row in enumerate(table.cells)
            ]
        )
        comparison = group_cumhazard_compare(
            EventTable(assignment.pt, event), group
        )
        _write_json(
            cfg.out / LOGRANK,
            {
                "format_version": FORMAT_VERSION,
                "group_column": spec.group_column,
                "group_value": spec.group_value,
                "n_in_group": int(group.sum()),
                "n_out_of_group": int(len(group) - group.sum()),
                "statistic": comparison.statistic,
                "p_value": comparison.p_value,
            },
        )
        outputs.append(LOGRANK)
        summary["logrank"] = {"statistic": comparison.statistic, "p_value": comparison.p_value}

    _write_json(cfg.out / SURVIVAL_SUMMARY, summary)
    outputs.append(SURVIVAL_SUMMARY)
    _write_manifest(
        cfg,
        "survival",
        inputs=inputs,
        outputs=outputs,
        parameters={
            "event_column": spec.event_column,
            "event_value": spec.event_value,
            "cause_column": spec.cause_column,
            "covariates": list(spec.covariates),
            "group_column": spec.group_column,
            "group_value": spec.group_value,
        },
    )
    return outputs


def stage_layout(cfg: PipelineConfig) -> list[str]:
    """Draw the tree and the scattered points as SVG plus plain JSON."""
    g, _ = _load_tree(cfg)
    m, source = _load_fit_input(cfg, "layout")
    inputs = [cfg.out / TREE, cfg.out / source]
    node_xy = layout_mod.layout_graph(g, seed=cfg.seed)
    layout = layout_mod.layout_points(
        m.values, g, node_xy, s=cfg.scattering, seed=cfg.seed
    )
    part = partition_points(m.values, g)

    widths = None
    if cfg.width_column is not None:
        vm, vsource = _matrix_for(cfg, "layout", (IMPUTED, QUANTIFIED))
        _complete_or_fail(vm, vsource, "layout")
        if cfg.width_column not in vm.column_names:
            raise ConfigError(
                f"config field 'layout.width_column' names column "
                f"{cfg.width_column!r}, which is not in {vsource!r}"
            )
        widths = layout_mod.edge_widths(
            g, vm.values[:, vm.column_names.index(cfg.width_column)], part
        )
        inputs.append(cfg.out / vsource)

    compositions = None
    counts = None
    point_classes = None
    if cfg.composition_column is not None:
        table = _load_filtered_table(cfg)
        j = _table_column(table, cfg.composition_column, "layout.composition_column")
        point_classes = [
            "missing" if table.missing_mask[i, j] else row[j]
            for i, row in enumerate(table.cells)
        ]
        compositions, counts = layout_mod.node_composition(g, point_classes, part)
        inputs += [cfg.out / FILTERED_TABLE, cfg.out / FILTERED_SCHEMA]

    svg = layout_mod.render_svg(
        g,
        layout,
        widths=widths,
        point_classes=point_classes,
        compositions=compositions,
        node_counts=counts,
        size=cfg.svg_size,
    )
    with open(cfg.out / LAYOUT_SVG, "w", encoding="utf-8") as fh:
        fh.write(svg)
    payload = layout_mod.layout_payload(
        g, layout, widths=widths, compositions=compositions, node_counts=counts
    )
    payload["format_version"] = FORMAT_VERSION
    _write_json(cfg.out / LAYOUT_JSON, payload)
    outputs = [LAYOUT_SVG, LAYOUT_JSON]
    _write_manifest(
        cfg,
        "layout",
        inputs=inputs,
        outputs=outputs,
        parameters={
            "scattering": cfg.scattering,
            "scattering_used": layout.scattering,
            "width_column": cfg.width_column,
            "composition_column": cfg.composition_column,
            "size": list(cfg.svg_size),
            "input_matrix": source,
        },
    )
    return outputs


_STAGE_FUNCTIONS = {
    "quantify": stage_quantify,
    "impute": stage_impute,
    "reduce": stage_reduce,
    "fit": stage_fit,
    "segment": stage_segment,
    "pseudotime": stage_pseudotime,
    "associate": stage_associate,
    "survival": stage_survival,
    "layout": stage_layout,
}


def run_stage(name: str, cfg: PipelineConfig) -> list[str]:
    """Run one named stage; returns the artifact filenames it wrote."""
    if name not in _STAGE_FUNCTIONS:
        raise ConfigError(f"unknown stage {name!r}; expected one of {STAGES}")
    return _STAGE_FUNCTIONS[name](cfg)


def run_all(cfg: PipelineConfig) -> dict[str, list[str]]:
    """Run every stage in order; survival only when configured."""
    written = {}
    for name in STAGES:
        if name == "survival" and cfg.survival is None:
            continue
        written[name] = run_stage(name, cfg)
    return written
