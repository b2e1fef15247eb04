import csv
import json

import pytest
from click.testing import CliRunner

from dfalign.cli import main
from dfalign.geometry import SUBSETS

SMALL = """\
n_train = 40
n_val = 12
n_test = 20
image_size = 32
iterations = 20
t1 = 5
t2 = 10
n_clusters = 4
channels = 4, 8
dense = 16
log_every = 5
val_every = 10
"""


def run(*args):
    return CliRunner().invoke(main, list(map(str, args)), catch_exceptions=False)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    common = ["--config", cfg, "--seed", 4]
    r = run(*common, "--out", root / "data", "generate")
    assert r.exit_code == 0, r.output
    r = run(*common, "--out", root / "bundle", "train", "--data", root / "data")
    assert r.exit_code == 0, r.output
    return root, common


def test_generate_prints_histogram(workspace):
    root, _ = workspace
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert manifest["sizes"] == {"train": 40, "val": 12, "test": 20}
    r = run("--config", root / "small.cfg", "--seed", 4, "--out", root / "gen2", "generate")
    for s in SUBSETS:
        assert s in r.output


def test_existing_output_needs_force(workspace):
    root, common = workspace
    r = run(*common, "--out", root / "data", "generate")
    assert r.exit_code == 1 and "--force" in r.output


def test_force_only_replaces_own_directories(tmp_path):
    (tmp_path / "keep.txt").write_text("user data")
    r = run("--out", tmp_path, "--force", "generate")
    assert r.exit_code == 1 and "refusing" in r.output
    assert (tmp_path / "keep.txt").exists()


def test_bad_config_exits_nonzero(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("n_train = 10\nbogus = 1\n")
    r = run("--config", bad, "generate")
    assert r.exit_code == 1 and "bad.cfg:2" in r.output


def test_train_writes_bundle(workspace):
    root, _ = workspace
    bundle = root / "bundle"
    for name in ("stage1.dfanet", "stage2.dfanet", "stage3_branch1.dfanet", "stage3_branch2.dfanet",
                 "routing_table.dfaroute", "clusters_stage1.dfaclus", "assignments_stage2.csv",
                 "train_log_stage1.csv", "config.txt", "manifest.json"):
        assert (bundle / name).exists(), name


def test_evaluate_emits_all_subsets(workspace):
    root, common = workspace
    out = root / "eval"
    r = run(*common, "--out", out, "evaluate", "--bundle", root / "bundle", "--data", root / "data")
    assert r.exit_code == 0, r.output
    for stage in (1, 2, 3):
        with open(out / f"metrics_stage{stage}.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert {row["subset"] for row in rows} == {"all", *SUBSETS}
    assert (out / "metrics.csv").read_bytes() == (out / "metrics_stage3.csv").read_bytes()
    assert (out / "pdl_stages.svg").exists() and (out / "pdl_subsets.svg").exists()


def test_evaluate_is_idempotent_with_force(workspace):
    root, common = workspace
    args = [*common, "--force", "--out", root / "eval_twice", "evaluate", "--bundle", root / "bundle",
            "--data", root / "data"]
    run(*args)
    first = {p.name: p.read_bytes() for p in (root / "eval_twice").iterdir()}
    run(*args)
    second = {p.name: p.read_bytes() for p in (root / "eval_twice").iterdir()}
    assert first == second


@pytest.mark.parametrize("stage", [1, 2, 3])
def test_inspect_clusters(workspace, stage):
    root, common = workspace
    out = root / f"clusters{stage}"
    r = run(*common, "--out", out, "inspect-clusters", "--stage", stage, "--bundle", root / "bundle",
            "--data", root / "data")
    assert r.exit_code == 0, r.output
    with open(out / "clusters.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert sum(int(row["population"]) for row in rows) == 40
    assert all(row["mean_NE"] != "" for row in rows) == (stage == 2)
    assert (out / "montage.svg").exists()


def test_compare_baselines_with_bundle(workspace):
    root, common = workspace
    out = root / "compare"
    r = run(*common, "--out", out, "compare-baselines", "--bundle", root / "bundle", "--data", root / "data")
    assert r.exit_code == 0, r.output
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["network_counts"] == {"DFA": 4, "direct": 1, "patch-cascade": 17}
    assert (out / "report.csv").exists() and (out / "pdl_models.svg").exists()


def test_compare_baselines_rejects_foreign_bundle(workspace):
    root, _ = workspace
    r = run("--config", root / "small.cfg", "--seed", 5, "--out", root / "cmp2", "compare-baselines",
            "--bundle", root / "bundle", "--data", root / "data")
    assert r.exit_code == 1 and "different configuration" in r.output


def test_missing_inputs_exit_nonzero(tmp_path):
    r = run("--out", tmp_path / "o", "evaluate", "--bundle", tmp_path / "none", "--data", tmp_path / "none")
    assert r.exit_code == 1
    r = run("--out", tmp_path / "o", "train", "--data", tmp_path / "none")
    assert r.exit_code == 1
