import pytest

from egraph import EGraph
from ir import OpKind, OpName
from relations import Duplicate, Layout, RelKind, Sharded, Side, Transpose
from rules import (
    RULES, Family, Parallelism, UnknownRule, default_catalog, explain_rule, firing_summary, load_catalog,
)


def leaf(eg, name, shape, side):
    return eg.add_node(OpKind.of(OpName.INPUT), (), shape, origin=(side, name), leaf=("input", side.value, name))


def op(eg, name, children, out_shape, side, node_id, **attrs):
    return eg.add_node(OpKind.of(name, **attrs), children, out_shape, origin=(side, node_id))


# ------------------------------
# Catalog
# ------------------------------
def test_default_catalog_has_every_rule():
    catalog = default_catalog()
    assert len(catalog) == len(RULES)
    assert len(set(catalog.ids)) == len(catalog)
    assert {r.family for r in catalog} == set(Family)


def test_flags_select_rule_families():
    tp = default_catalog(["tp"])
    ep = default_catalog(["ep"])
    assert "L6-allreduce-discharge" in tp.ids
    assert "U12-loopred-B-init" not in tp.ids
    assert "U12-loopred-B-init" in ep.ids
    assert "P8-allgather-duplicate" not in ep.ids
    assert "L7-reducescatter-mark" in default_catalog(["sp"]).ids
    assert tp.flags == frozenset({Parallelism.TP})


def test_unknown_flag_rejected():
    with pytest.raises(ValueError):
        default_catalog(["pp"])


def test_get_and_select():
    catalog = default_catalog()
    with pytest.raises(UnknownRule):
        catalog.get("nope")
    picked = catalog.select(["L6-allreduce-discharge", "P2-dot-partial"])
    assert picked.ids == ["P2-dot-partial", "L6-allreduce-discharge"]
    with pytest.raises(UnknownRule):
        catalog.select(["P2-dot-partial", "nope"])


def test_load_catalog(tmp_path):
    path = tmp_path / "rules.txt"
    path.write_text("# tensor parallel only\nP2-dot-partial\n\nL6-allreduce-discharge  # discharge\n")
    catalog = load_catalog(path)
    assert catalog.ids == ["P2-dot-partial", "L6-allreduce-discharge"]


def test_explain_rule():
    text = explain_rule("P2-dot-partial")
    assert text.startswith("P2-dot-partial [Partition]")
    assert "partial(z, z', c, add) <- " in text
    assert "anchor:" in text


def test_firing_summary_is_sorted():
    assert list(firing_summary({"b": 1, "a": 2})) == ["a", "b"]


# ------------------------------
# Individual rules
# ------------------------------
def test_congruence_relates_shared_ops():
    eg = EGraph()
    a = leaf(eg, "a", (4, 6), Side.BASELINE)
    a2 = leaf(eg, "a", (4, 6), Side.DISTRIBUTED)
    eg.commit([("annotation", Duplicate(a, a2, 2))], {})
    t = op(eg, OpName.TRANSPOSE, (a,), (6, 4), Side.BASELINE, "t", perm=(1, 0))
    t2 = op(eg, OpName.TRANSPOSE, (a2,), (6, 4), Side.DISTRIBUTED, "t", perm=(1, 0))
    assert eg.equiv(t, t2)


def test_allgather_needs_ordered_group():
    for group, related in (((0, 1), True), ((1, 0), False)):
        eg = EGraph()
        x = leaf(eg, "x", (4, 6), Side.BASELINE)
        x2 = leaf(eg, "x", (2, 6), Side.DISTRIBUTED)
        eg.commit([("annotation", Sharded(x, x2, 0, 2))], {})
        g2 = op(eg, OpName.ALL_GATHER, (x2,), (4, 6), Side.DISTRIBUTED, "g", dim=0, group=group)
        eg.run_to_fixpoint(default_catalog())
        assert eg.equiv(x, g2) == related


def test_transpose_keeps_shard():
    eg = EGraph()
    x = leaf(eg, "x", (4, 6), Side.BASELINE)
    x2 = leaf(eg, "x", (4, 3), Side.DISTRIBUTED)
    eg.commit([("annotation", Sharded(x, x2, 1, 2))], {})
    t = op(eg, OpName.TRANSPOSE, (x,), (6, 4), Side.BASELINE, "t", perm=(1, 0))
    t2 = op(eg, OpName.TRANSPOSE, (x2,), (3, 4), Side.DISTRIBUTED, "t", perm=(1, 0))
    eg.run_to_fixpoint(default_catalog())
    assert Sharded(eg.find(t), eg.find(t2), 0, 2) in eg.facts


def test_layout_through_baseline_transpose():
    eg = EGraph()
    a = leaf(eg, "a", (4, 6), Side.BASELINE)
    a2 = leaf(eg, "a", (4, 6), Side.DISTRIBUTED)
    eg.commit([("annotation", Duplicate(a, a2, 2))], {})
    t = op(eg, OpName.TRANSPOSE, (a,), (6, 4), Side.BASELINE, "t", perm=(1, 0))
    r2 = op(eg, OpName.RESHAPE, (a2,), (6, 4), Side.DISTRIBUTED, "r", shape=(6, 4))
    firings = {}
    eg.run_to_fixpoint(default_catalog(), firings=firings)
    layouts = eg.facts.query(RelKind.LAYOUT, t=eg.find(t), t2=eg.find(r2))
    assert layouts
    assert not eg.equiv(t, r2)
    assert firings["L4-layout-transpose"] >= 1
    assert firings["L5-layout-reshape"] >= 1


def test_transpose_pair_cancels_to_duplicate():
    eg = EGraph()
    a = leaf(eg, "a", (4, 6), Side.BASELINE)
    a2 = leaf(eg, "a", (6, 4), Side.DISTRIBUTED)
    eg.commit([("annotation", Layout(a, a2, Transpose((1, 0)), 2))], {})
    t2 = op(eg, OpName.TRANSPOSE, (a2,), (4, 6), Side.DISTRIBUTED, "t", perm=(1, 0))
    eg.run_to_fixpoint(default_catalog())
    assert eg.equiv(a, t2)


def test_max_reduce_partial_and_discharge():
    eg = EGraph()
    x = leaf(eg, "x", (4, 6), Side.BASELINE)
    x2 = leaf(eg, "x", (4, 3), Side.DISTRIBUTED)
    eg.commit([("annotation", Sharded(x, x2, 1, 2))], {})
    m = op(eg, OpName.MAX_REDUCE, (x,), (4, 1), Side.BASELINE, "m", dim=1)
    m2 = op(eg, OpName.MAX_REDUCE, (x2,), (4, 1), Side.DISTRIBUTED, "m", dim=1)
    z2 = op(eg, OpName.ALL_REDUCE, (m2,), (4, 1), Side.DISTRIBUTED, "z", group=(0, 1), combiner="max")
    wrong = op(eg, OpName.ALL_REDUCE, (m2,), (4, 1), Side.DISTRIBUTED, "w", group=(0, 1), combiner="add")
    eg.run_to_fixpoint(default_catalog())
    assert eg.equiv(m, z2)
    assert not eg.equiv(m, wrong)


# ------------------------------
# Replica groups
# ------------------------------
def _dot_over(eg, x_ranks, w_ranks):
    x = leaf(eg, "x", (4, 8), Side.BASELINE)
    w = leaf(eg, "w", (8, 6), Side.BASELINE)
    x2 = leaf(eg, "x", (4, 4), Side.DISTRIBUTED)
    w2 = leaf(eg, "w", (4, 6), Side.DISTRIBUTED)
    eg.commit([("annotation", Sharded(x, x2, 1, 2, x_ranks)), ("annotation", Sharded(w, w2, 0, 2, w_ranks))], {})
    y = op(eg, OpName.DOT, (x, w), (4, 6), Side.BASELINE, "y")
    y2 = op(eg, OpName.DOT, (x2, w2), (4, 6), Side.DISTRIBUTED, "y")
    return y, y2


@pytest.mark.parametrize("annotated, reduced, discharged", [
    ((0, 1), (0, 1), True),
    ((0, 1), (1, 0), True),
    ((2, 3), (2, 3), True),
    ((0, 1), (2, 3), False),
    ((2, 3), (0, 1), False),
    ((2, 3), (3, 4), False),
])
def test_all_reduce_discharges_only_its_own_group(annotated, reduced, discharged):
    eg = EGraph()
    y, y2 = _dot_over(eg, annotated, annotated)
    z2 = op(eg, OpName.ALL_REDUCE, (y2,), (4, 6), Side.DISTRIBUTED, "z", group=reduced, combiner="add")
    eg.run_to_fixpoint(default_catalog())
    assert eg.facts.query(RelKind.PARTIAL, t=eg.find(y), t2=eg.find(y2))[0].group == annotated
    assert eg.equiv(y, z2) == discharged


def test_operands_on_different_groups_make_no_partial():
    eg = EGraph()
    y, y2 = _dot_over(eg, (0, 1), (2, 3))
    z2 = op(eg, OpName.ALL_REDUCE, (y2,), (4, 6), Side.DISTRIBUTED, "z", group=(0, 1), combiner="add")
    eg.run_to_fixpoint(default_catalog())
    assert not eg.facts.query(RelKind.PARTIAL)
    assert not eg.equiv(y, z2)


def test_collective_on_a_foreign_group_is_rejected():
    eg = EGraph()
    y, y2 = _dot_over(eg, (0, 1), (0, 1))
    c = leaf(eg, "c", (4, 6), Side.BASELINE)
    c2 = leaf(eg, "c", (4, 6), Side.DISTRIBUTED)
    eg.commit([("annotation", Duplicate(c, c2, 2, (2, 3)))], {})
    z2 = op(eg, OpName.ALL_REDUCE, (y2,), (4, 6), Side.DISTRIBUTED, "z", group=(2, 3), combiner="add")
    o = op(eg, OpName.ELEM, (y, c), (4, 6), Side.BASELINE, "o", fn="add")
    o2 = op(eg, OpName.ELEM, (z2, c2), (4, 6), Side.DISTRIBUTED, "o", fn="add")
    firings = {}
    eg.run_to_fixpoint(default_catalog(), firings=firings)
    assert firings.get("P2-dot-partial")
    assert not firings.get("L6-allreduce-discharge")
    assert not eg.equiv(o, o2)


@pytest.mark.parametrize("gathered, related", [((2, 3), True), ((3, 2), False), ((0, 1), False)])
def test_allgather_matches_the_shard_group(gathered, related):
    eg = EGraph()
    x = leaf(eg, "x", (4, 6), Side.BASELINE)
    x2 = leaf(eg, "x", (2, 6), Side.DISTRIBUTED)
    eg.commit([("annotation", Sharded(x, x2, 0, 2, (2, 3)))], {})
    g2 = op(eg, OpName.ALL_GATHER, (x2,), (4, 6), Side.DISTRIBUTED, "g", dim=0, group=gathered)
    eg.run_to_fixpoint(default_catalog())
    assert eg.equiv(x, g2) == related


# ------------------------------
# Anchors
# ------------------------------
@pytest.mark.parametrize("rule_id, fragment", [
    ("P10-maxreduce-partial", "max_reduce"),
    ("P10-sumreduce-partial", "sum_reduce"),
    ("L6-allreduce-discharge", "add"),
    ("L6-allreduce-discharge-max", "max"),
])
def test_anchor_names_the_rule_operator(rule_id, fragment):
    assert fragment in default_catalog().get(rule_id).anchor
