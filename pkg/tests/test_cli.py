"""End-to-end tests of the command-line pipeline.

A small synthetic clinic table with three branches, mixed column kinds
and injected missingness is pushed through every subcommand; the tests
check artifact chaining, determinism, config validation and the exit
code contract.
"""

import csv
import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from clintraj.cli import main
from clintraj.pipeline import ConfigError, load_config


def write_dataset(root: Path, n_per: int = 70, seed: int = 7) -> None:
    """Synthetic three-arm table: data.csv, schema.json, config.json."""
    rng = np.random.default_rng(seed)
    dirs = np.array(
        [[1.0, 0.0, 0.2, 0.0], [-0.5, 1.0, 0.0, 0.3], [-0.5, -1.0, 0.4, -0.2]]
    )
    rows = []
    for arm in range(3):
        t = rng.uniform(0.0, 4.0, n_per)
        pts = t[:, None] * dirs[arm] + rng.normal(0.0, 0.25, (n_per, 4))
        for i in range(n_per):
            prog = t[i]
            comp = "none"
            if arm == 1 and prog > 2.0 and rng.random() < 0.8:
                comp = "cardiac"
            elif arm == 2 and prog > 2.0 and rng.random() < 0.8:
                comp = "renal"
            row = {
                "x1": f"{pts[i, 0]:.4f}",
                "x2": f"{pts[i, 1]:.4f}",
                "x3": f"{pts[i, 2]:.4f}",
                "x4": f"{pts[i, 3]:.4f}",
                "severity": str(min(3, int(prog))),
                "complication": comp,
                "died": "yes" if comp != "none" and rng.random() < 0.5 else "no",
                "sex": "m" if rng.random() < 0.5 else "f",
                "junk": f"{rng.normal():.3f}" if rng.random() > 0.5 else "",
            }
            for col in ("x3", "severity", "sex"):
                if rng.random() < 0.05:
                    row[col] = ""
            rows.append(row)
    for _ in range(4):  # nearly empty rows, dropped by the row filter
        rows.append(
            {
                "x1": f"{rng.normal():.4f}",
                "x2": "",
                "x3": "",
                "x4": "",
                "severity": "",
                "complication": "none",
                "died": "no",
                "sex": "",
                "junk": "",
            }
        )
    header = ["x1", "x2", "x3", "x4", "severity", "complication", "died", "sex", "junk"]
    with open(root / "data.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for i in rng.permutation(len(rows)):
            writer.writerow(rows[i])
    schema = [
        {"name": "x1", "kind": "continuous"},
        {"name": "x2", "kind": "continuous"},
        {"name": "x3", "kind": "continuous"},
        {"name": "x4", "kind": "continuous"},
        {"name": "severity", "kind": "ordinal", "levels": ["0", "1", "2", "3"]},
        {"name": "complication", "kind": "categorical"},
        {"name": "died", "kind": "binary", "levels": ["no", "yes"]},
        {"name": "sex", "kind": "binary"},
        {"name": "junk", "kind": "continuous"},
    ]
    with open(root / "schema.json", "w") as fh:
        json.dump(schema, fh, indent=2)
    config = {
        "data": "data.csv",
        "schema": "schema.json",
        "out": str(root / "out"),
        "seed": 3,
        "pca_components": 3,
        "missingness": {"delta_row": 0.2, "delta_column": 0.3},
        "elastic": {"n_nodes": 10},
        "root": {"column": "complication", "target": "none"},
        "layout": {"composition_column": "complication"},
        "survival": {
            "event_column": "died",
            "event_value": "yes",
            "cause_column": "complication",
            "covariates": ["severity", "x1"],
            "group_column": "sex",
            "group_value": "m",
        },
    }
    with open(root / "config.json", "w") as fh:
        json.dump(config, fh, indent=2)


def run(*argv) -> int:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # screen may hit separated dummies
        return main(list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_dataset(root)
    return root


@pytest.fixture(scope="module")
def finished(workspace):
    """One completed `all` run shared by the read-only assertions."""
    code = run("all", "--config", str(workspace / "config.json"))
    assert code == 0
    return workspace / "out"


EXPECTED = [
    "table_filtered.csv",
    "schema_filtered.json",
    "quantified.csv",
    "quantify_meta.json",
    "imputed.csv",
    "impute_report.json",
    "reduced.csv",
    "pca.json",
    "tree.json",
    "segments.csv",
    "segments_meta.json",
    "pseudotime.csv",
    "trajectories.json",
    "associations.csv",
    "segment_tests.csv",
    "associate_summary.json",
    "cox.csv",
    "logrank.json",
    "survival_summary.json",
    "layout.svg",
    "layout.json",
]


def test_all_emits_every_artifact(finished):
    for name in EXPECTED:
        assert (finished / name).exists(), name
    for stage in (
        "quantify",
        "impute",
        "reduce",
        "fit",
        "segment",
        "pseudotime",
        "associate",
        "survival",
        "layout",
    ):
        assert (finished / f"manifest_{stage}.json").exists(), stage


def test_filter_drops_sparse_column_and_rows(finished):
    meta = json.loads((finished / "quantify_meta.json").read_text())
    assert meta["filter"]["dropped_columns"] == ["junk"]
    assert meta["filter"]["n_dropped_rows"] >= 4
    assert 0.0 < meta["filter"]["residual_missing_fraction"] < 0.1


def test_tree_artifact_is_consistent(finished):
    tree = json.loads((finished / "tree.json").read_text())
    n = len(tree["nodes"])
    assert len(tree["edges"]) == n - 1
    assert 0.0 < tree["explained_variance_total"] <= tree["explained_variance"] <= 1.0
    assert tree["input_matrix"] == "reduced.csv"


def test_pseudotime_rows_align_with_matrix(finished):
    with open(finished / "pseudotime.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    with open(finished / "reduced.csv", newline="") as fh:
        n_points = len(list(csv.reader(fh))) - 1
    assert len(rows) == n_points
    pt = np.array([float(r[1]) for r in rows])
    assert np.all(pt >= 0.0)
    traj = json.loads((finished / "trajectories.json").read_text())
    assert traj["root_selection"]["mode"] == "auto"
    assert traj["n_trajectories"] >= 2


def test_branch_variables_pass_the_screen(finished):
    summary = json.loads((finished / "associate_summary.json").read_text())
    passed = set(summary["passed_variables"])
    assert {"x1", "x2"} <= passed
    assert summary["n_significant_segment_tests"] >= 1


def test_survival_artifacts_cover_trajectories(finished):
    summary = json.loads((finished / "survival_summary.json").read_text())
    assert summary["n_events"] > 0
    assert set(summary["causes"]) <= {"cardiac", "renal"}
    for entry in summary["per_trajectory"]:
        name = f"hazard_total_traj{entry['trajectory']}.csv"
        assert (finished / name).exists()
        with open(finished / name, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        assert len(rows) >= 0 if entry["n_events"] == 0 else len(rows) > 0
        hazard = [float(r[1]) for r in rows]
        assert hazard == sorted(hazard)


def test_manifest_hashes_match_files(finished):
    import hashlib

    for manifest_path in sorted(finished.glob("manifest_*.json")):
        manifest = json.loads(manifest_path.read_text())
        for name, digest in manifest["outputs"].items():
            blob = (finished / name).read_bytes()
            assert hashlib.sha256(blob).hexdigest() == digest, name


def test_two_runs_are_byte_identical(workspace, finished):
    code = run("all", "--config", str(workspace / "config.json"), "--out", str(workspace / "out_b"))
    assert code == 0
    other = workspace / "out_b"
    names = sorted(p.name for p in finished.iterdir())
    assert names == sorted(p.name for p in other.iterdir())
    for name in names:
        assert (finished / name).read_bytes() == (other / name).read_bytes(), name


def test_stagewise_chain_matches_all(workspace, finished):
    out = workspace / "out_chain"
    for stage in (
        "quantify",
        "impute",
        "reduce",
        "fit",
        "segment",
        "pseudotime",
        "associate",
        "survival",
        "layout",
    ):
        code = run(stage, "--config", str(workspace / "config.json"), "--out", str(out))
        assert code == 0, stage
    for name in EXPECTED:
        assert (out / name).read_bytes() == (finished / name).read_bytes(), name


def test_seed_flag_changes_layout_only(workspace, finished):
    out = workspace / "out_seed"
    assert run("all", "--config", str(workspace / "config.json"), "--out", str(out), "--seed", "11") == 0
    assert (out / "tree.json").read_bytes() == (finished / "tree.json").read_bytes()
    assert (out / "layout.svg").read_bytes() != (finished / "layout.svg").read_bytes()


def test_fit_without_impute_names_the_precondition(workspace, capsys):
    out = workspace / "out_noimp"
    assert run("quantify", "--config", str(workspace / "config.json"), "--out", str(out)) == 0
    code = run("fit", "--config", str(workspace / "config.json"), "--out", str(out))
    assert code == 1
    err = capsys.readouterr().err
    assert "missing cells" in err and "impute" in err


def test_missing_upstream_artifact(workspace, tmp_path, capsys):
    code = run("fit", "--config", str(workspace / "config.json"), "--out", str(tmp_path / "empty"))
    assert code == 1
    err = capsys.readouterr().err
    assert "quantified.csv" in err and "quantify" in err


def test_missing_data_file(tmp_path, capsys):
    cfg = {"data": "absent.csv", "schema": "absent.json", "out": str(tmp_path / "o")}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert run("quantify", "--config", str(path)) == 1


def test_usage_errors_exit_one(capsys):
    assert main(["quantify"]) == 1  # missing --config
    assert main(["frobnicate", "--config", "x"]) == 1
    capsys.readouterr()


def test_internal_error_exits_two(workspace, monkeypatch, capsys):
    import clintraj.pipeline as pipeline

    def boom(name, cfg):
        raise RuntimeError("boom")

    monkeypatch.setattr(pipeline, "run_stage", boom)
    code = main(["quantify", "--config", str(workspace / "config.json")])
    assert code == 2
    capsys.readouterr()


def test_env_var_sets_output_dir(workspace, tmp_path, monkeypatch):
    target = tmp_path / "from_env"
    monkeypatch.setenv("CLINTRAJ_OUT", str(target))
    assert run("quantify", "--config", str(workspace / "config.json")) == 0
    assert (target / "quantified.csv").exists()


def config_dict(**overrides):
    base = {"data": "d.csv", "schema": "s.json"}
    base.update(overrides)
    return base


def write_config(tmp_path, payload) -> Path:
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(payload))
    return path


def test_config_defaults(tmp_path):
    cfg = load_config(write_config(tmp_path, config_dict()))
    assert cfg.seed == 0
    assert cfg.pca_components == 12
    assert cfg.elastic.n_nodes == 50
    assert cfg.elastic.lam == 0.05
    assert cfg.policy.delta_column == 0.3
    assert cfg.svd_order_auto
    assert cfg.r_squared == 0.3
    assert cfg.root_node is None and cfg.root_column is None
    assert cfg.survival is None
    assert cfg.data == tmp_path / "d.csv"


def test_config_r0_null_means_unbounded(tmp_path):
    import math

    cfg = load_config(write_config(tmp_path, config_dict(elastic={"r0": None})))
    assert math.isinf(cfg.elastic.r0)
    cfg = load_config(write_config(tmp_path, config_dict(elastic={"r0": 2.5})))
    assert cfg.elastic.r0 == 2.5


@pytest.mark.parametrize(
    "payload,fragment",
    [
        (config_dict(extra=1), "extra"),
        (config_dict(pca_components=0), "pca_components"),
        (config_dict(elastic={"lambda": -1.0}), "elastic"),
        (config_dict(elastic={"bogus": 1.0}), "elastic.bogus"),
        (config_dict(missingness={"delta_row": 2.0}), "missingness"),
        (config_dict(thresholds={"p_value": 0.0}), "p_value"),
        (config_dict(root={"node": 1, "column": "c", "target": "t"}), "root"),
        (config_dict(root={"column": "c"}), "root"),
        (config_dict(survival={"event_column": "died"}), "event_value"),
        (
            config_dict(
                survival={
                    "event_column": "died",
                    "event_value": "yes",
                    "group_column": "sex",
                }
            ),
            "group_value",
        ),
        (config_dict(layout={"size": [640]}), "layout.size"),
        (config_dict(seed="zero"), "seed"),
    ],
)
def test_config_rejections_name_the_field(tmp_path, payload, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config(write_config(tmp_path, payload))


def test_flag_overrides_clamp_config(tmp_path):
    path = write_config(tmp_path, config_dict(seed=5, out="cfg_out"))
    cfg = load_config(path, seed=9, out="flag_out")
    assert cfg.seed == 9
    assert cfg.out == Path("flag_out")
