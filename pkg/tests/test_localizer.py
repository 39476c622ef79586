import json

import pytest

from driver import Verdict, VerifyOptions, verify_pair
from egraph import Budget
from harness import BugInjection, ModelKind, ModelSpec, ParallelPlan, Strategy, Variant, build_pair, inject
from ir import AnnotationSet, GraphBuilder, GraphKind, OpKind, OpName
from localizer import Status, build_report, consumers, frontier, render_report
from rules import default_catalog
from tests.conftest import replicate


def _report(g_s, g_m, ann, **opts):
    outcome = verify_pair(g_s, g_m, ann, default_catalog(), VerifyOptions(**opts))
    return build_report(outcome, g_s, g_m)


def _reshape_for_transpose():
    """The distributed side reshapes where the baseline transposes."""
    b = GraphBuilder(GraphKind.BASELINE, layer=0, file="model.py")
    b.input("a", (4, 6))
    b.input("b", (6, 4))
    b.add("t", OpKind.of(OpName.TRANSPOSE, perm=(1, 0)), ["a"])
    b.add("s", OpKind.of(OpName.ELEM, fn="add"), ["t", "b"])
    g_s = b.build(["s"])

    m = GraphBuilder(GraphKind.DISTRIBUTED, layer=0, file="dist.py")
    m.input("a", (4, 6))
    m.input("b", (6, 4))
    m.add("t", OpKind.of(OpName.RESHAPE, shape=(6, 4)), ["a"])
    m.add("s", OpKind.of(OpName.ELEM, fn="add"), ["t", "b"])
    g_m = m.build(["s"])
    return g_s, g_m, AnnotationSet((replicate("a"), replicate("b")))


# ------------------------------
# Frontier
# ------------------------------
def test_frontier_stops_at_first_unrelated_node():
    report = _report(*_reshape_for_transpose())
    assert report.verdict == Verdict.UNVERIFIED
    assert report.frontier_ids == ["s"]
    entry = report.frontier[0]
    assert (entry.file, entry.line) == ("dist.py", 4)
    assert any(fact.startswith("t: ") for fact in entry.input_facts)
    assert report.dangling == [("s", "s")]


def test_swapped_combiner_is_localized():
    g_s, g_m, ann = build_pair(ModelSpec(ModelKind.MLP), ParallelPlan(Strategy.TP, 2))
    bad = inject(g_m, BugInjection(Variant.SWAP, "l0.ar"))
    report = _report(g_s, bad, ann)
    assert report.frontier_ids == ["l0.ar"]
    assert report.frontier[0].file == "distributed_model.py"


def test_verified_report_is_empty(tp_matmul):
    report = _report(*tp_matmul)
    assert report.verdict == Verdict.VERIFIED
    assert report.frontier == []
    assert report.message == ""


def test_inconclusive_report_carries_budget_message(tp_matmul):
    report = _report(*tp_matmul, budget=Budget(max_iterations=1))
    assert report.verdict == Verdict.INCONCLUSIVE
    assert report.message.startswith("layer 0: iteration budget")
    assert report.frontier == []


def test_frontier_and_consumers_on_statuses():
    b = GraphBuilder(GraphKind.DISTRIBUTED)
    b.input("x", (2, 2))
    b.add("p", OpKind.of(OpName.ELEM, fn="neg"), ["x"])
    b.add("q", OpKind.of(OpName.ELEM, fn="relu"), ["p"])
    b.add("r", OpKind.of(OpName.ELEM, fn="add"), ["q", "x"])
    g = b.build(["r"])
    status = {"x": Status.VERIFIED, "p": Status.UNVERIFIED, "q": Status.UNVERIFIED, "r": Status.UNVERIFIED}
    assert frontier(status, g) == ["p"]
    assert consumers(status, g, ["p"]) == ["q", "r"]
    assert consumers(status, g, ["p"], depth=1) == ["q"]


# ------------------------------
# Rendering
# ------------------------------
def test_render_text():
    text = render_report(_report(*_reshape_for_transpose()), "text")
    lines = text.splitlines()
    assert lines[0] == "unverified"
    assert "frontier:" in lines
    assert any(line.startswith("  s  ") and "dist.py:4" in line for line in lines)
    assert "dangling outputs: s / s" in lines
    assert text.endswith("\n")


def test_render_json():
    doc = json.loads(render_report(_report(*_reshape_for_transpose()), "json"))
    assert set(doc) == {"verdict", "frontier", "consumers", "dangling", "stats"}
    assert doc["verdict"] == "unverified"
    assert doc["frontier"][0]["id"] == "s"
    assert doc["frontier"][0]["line"] == 4
    assert doc["dangling"] == [{"baseline": "s", "distributed": "s"}]
    assert "L4-layout-transpose" in doc["stats"]["rules"]


def test_render_unknown_format(tp_matmul):
    with pytest.raises(ValueError):
        render_report(_report(*tp_matmul), "yaml")
