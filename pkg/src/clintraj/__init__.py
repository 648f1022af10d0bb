"""Branching trajectory extraction from mixed-type tabular data.

The package turns a table of ordinal, binary, categorical, and continuous
variables into a numeric matrix, fits an elastic principal tree to it, and
reads the tree back out as segments, pseudotime, variable associations,
cause-specific hazards, and a two-dimensional layout.  Each step is usable
as a library call; the ``clintraj`` command chains them into a pipeline
with content-addressed artifacts.
"""

from .dataset import (
    MixedDataTable,
    NumericMatrix,
    SchemaError,
    VariableSchema,
    load_table,
    read_matrix,
    read_schema,
    standardize,
)
from .elpigraph import (
    ElasticParams,
    FitResult,
    PrincipalGraph,
    compute_energy,
    explained_variance,
    extend_leaves,
    grow_tree,
    partition_points,
    project_points,
    prune_tree,
)
from .impute import MissingnessPolicy, filter_table, impute
from .layout import layout_graph, layout_points, render_svg
from .pipeline import (
    ArtifactError,
    ConfigError,
    PipelineConfig,
    PipelineError,
    SurvivalSpec,
    load_config,
    run_all,
    run_stage,
)
from .quantify import QuantifiedTable, optimal_scale, quantify_table
from .stats import benjamini_hochberg, screen_trajectory_associations
from .survival import EventTable, cox_fit, nelson_aalen, trajectory_events
from .treeanalysis import (
    PseudotimeAssignment,
    compute_pseudotime,
    decompose_segments,
    extract_trajectories,
    select_root,
)

__version__ = "0.1.0"

__all__ = [
    "ArtifactError",
    "ConfigError",
    "ElasticParams",
    "EventTable",
    "FitResult",
    "MissingnessPolicy",
    "MixedDataTable",
    "NumericMatrix",
    "PipelineConfig",
    "PipelineError",
    "PrincipalGraph",
    "PseudotimeAssignment",
    "QuantifiedTable",
    "SchemaError",
    "SurvivalSpec",
    "VariableSchema",
    "benjamini_hochberg",
    "compute_energy",
    "compute_pseudotime",
    "cox_fit",
    "decompose_segments",
    "explained_variance",
    "extend_leaves",
    "extract_trajectories",
    "filter_table",
    "grow_tree",
    "impute",
    "layout_graph",
    "layout_points",
    "load_config",
    "load_table",
    "nelson_aalen",
    "optimal_scale",
    "partition_points",
    "project_points",
    "prune_tree",
    "quantify_table",
    "read_matrix",
    "read_schema",
    "render_svg",
    "run_all",
    "run_stage",
    "screen_trajectory_associations",
    "select_root",
    "standardize",
    "trajectory_events",
]
