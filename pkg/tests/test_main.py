import json

import pytest
from typer.testing import CliRunner

from harness import ModelKind, ModelSpec, ParallelPlan, Strategy, build_pair
from ir import parse_graph, serialize_annotations, serialize_graph
from main import app

runner = CliRunner()


def write_pair(tmp_path, g_s, g_m, ann):
    paths = [tmp_path / "baseline.json", tmp_path / "distributed.json", tmp_path / "annotations.json"]
    for path, text in zip(paths, (serialize_graph(g_s), serialize_graph(g_m), serialize_annotations(ann))):
        path.write_text(text)
    return [str(p) for p in paths]


@pytest.fixture
def mlp_files(tmp_path):
    return write_pair(tmp_path, *build_pair(ModelSpec(ModelKind.MLP, layers=2), ParallelPlan(Strategy.TP, 2)))


def invoke(tmp_path, *args):
    return runner.invoke(app, [*args, "--app-dir", str(tmp_path / "app")])


# ------------------------------
# verify
# ------------------------------
def test_verify_exit_zero(tmp_path, mlp_files):
    result = invoke(tmp_path, "verify", *mlp_files)
    assert result.exit_code == 0
    assert result.stdout.startswith("verified")


def test_verify_injected_bug_exit_one(tmp_path, mlp_files):
    bad = tmp_path / "bad.json"
    injected = runner.invoke(app, ["inject", mlp_files[1], "swap", "l1.ar", "--out", str(bad)])
    assert injected.exit_code == 0
    assert "category 1" in injected.stdout

    result = invoke(tmp_path, "verify", mlp_files[0], str(bad), mlp_files[2], "--format", "json")
    assert result.exit_code == 1
    doc = json.loads(result.stdout)
    assert doc["verdict"] == "unverified"
    assert doc["frontier"][0]["id"] == "l1.ar"


def test_verify_budget_exit_two(tmp_path, mlp_files):
    result = invoke(tmp_path, "verify", *mlp_files, "--max-iterations", "1", "--no-memo")
    assert result.exit_code == 2
    assert result.stdout.startswith("inconclusive")


def test_verify_writes_report_and_facts(tmp_path, mlp_files):
    report = tmp_path / "report.txt"
    facts = tmp_path / "facts.txt"
    result = invoke(tmp_path, "verify", *mlp_files, "--report", str(report), "--dump-facts", str(facts),
                    "--no-partition", "--jobs", "4")
    assert result.exit_code == 0
    assert report.read_text() == result.stdout
    assert facts.read_text().startswith("# layer 0")
    assert "partial(" in facts.read_text()


def test_verify_missing_annotations_exit_three(tmp_path, mlp_files):
    result = invoke(tmp_path, "verify", mlp_files[0], mlp_files[1], str(tmp_path / "missing.json"))
    assert result.exit_code == 3
    assert "Error:" in result.output


def test_verify_unknown_flag_exit_three(tmp_path, mlp_files):
    result = invoke(tmp_path, "verify", *mlp_files, "--flags", "pp")
    assert result.exit_code == 3


# ------------------------------
# gen, inject, explain-rules
# ------------------------------
def test_gen_single_pair(tmp_path):
    out = tmp_path / "corpus"
    result = runner.invoke(app, ["gen", str(out), "--model", "attention", "--hidden", "16", "--heads", "4"])
    assert result.exit_code == 0
    manifest = json.loads((out / "corpus.manifest").read_text())
    assert len(manifest) == 1
    assert manifest[0]["model"] == "attention"
    assert (out / manifest[0]["name"] / "distributed.json").exists()


def test_gen_indivisible_exit_three(tmp_path):
    result = runner.invoke(app, ["gen", str(tmp_path / "c"), "--model", "attention", "--heads", "2",
                                 "--degree", "4"])
    assert result.exit_code == 3


def test_inject_inapplicable_exit_three(tmp_path, mlp_files):
    result = runner.invoke(app, ["inject", mlp_files[1], "split", "l0.ar", "--out", str(tmp_path / "x.json")])
    assert result.exit_code == 3
    assert not (tmp_path / "x.json").exists()


def test_inject_writes_parsable_graph(tmp_path, mlp_files):
    out = tmp_path / "x.json"
    result = runner.invoke(app, ["inject", mlp_files[1], "delete", "l0.ar", "-o", str(out)])
    assert result.exit_code == 0
    assert "l0.ar" not in parse_graph(out.read_text())


def test_explain_rules():
    result = runner.invoke(app, ["explain-rules", "L6-allreduce-discharge"])
    assert result.exit_code == 0
    assert result.stdout.startswith("L6-allreduce-discharge [Layout]")

    listing = runner.invoke(app, ["explain-rules", "--flags", "ep"])
    assert listing.exit_code == 0
    assert "U17-loopred-duplicate" in listing.stdout
    assert "L7-reducescatter-mark" not in listing.stdout


def test_explain_unknown_rule_exit_three():
    result = runner.invoke(app, ["explain-rules", "nope"])
    assert result.exit_code == 3
