import pytest

from egraph import Budget, BudgetExceeded, EGraph, Equate
from ir import OpKind, OpName
from relations import Combiner, Duplicate, Partial, RelKind, Sharded, Side
from rules import RuleCatalog, default_catalog

INPUT = OpKind.of(OpName.INPUT)
NEG = OpKind.of(OpName.ELEM, fn="neg")


def leaf(eg, name, shape=(4, 4), side=Side.BASELINE):
    return eg.add_node(INPUT, (), shape, origin=(side, name), leaf=("input", side.value, name))


# ------------------------------
# Hashcons and union-find
# ------------------------------
def test_hashcons_shares_identical_nodes():
    eg = EGraph()
    a = leaf(eg, "a")
    n1 = eg.add_node(NEG, (a,), (4, 4))
    n2 = eg.add_node(NEG, (a,), (4, 4))
    assert n1 == n2
    assert len(eg.classes) == 2


def test_merge_keeps_smallest_id_and_origins():
    eg = EGraph()
    a = leaf(eg, "a")
    b = leaf(eg, "b", side=Side.DISTRIBUTED)
    root = eg.merge(b, a)
    assert root == a
    assert eg.find(b) == a
    assert eg.origins(b) == {(Side.BASELINE, "a"), (Side.DISTRIBUTED, "b")}
    assert eg.merges == 1


def test_rebuild_restores_congruence():
    eg = EGraph()
    a = leaf(eg, "a")
    b = leaf(eg, "b")
    na = eg.add_node(NEG, (a,), (4, 4))
    nb = eg.add_node(NEG, (b,), (4, 4))
    assert not eg.equiv(na, nb)
    eg.merge(a, b)
    eg.rebuild()
    assert eg.equiv(na, nb)
    assert len(eg.uses(a, OpName.ELEM)) == 1


def test_rebuild_canonicalizes_facts():
    eg = EGraph()
    a = leaf(eg, "a")
    b = leaf(eg, "b")
    c = leaf(eg, "c", side=Side.DISTRIBUTED)
    eg.facts.add(Sharded(b, c, 0, 2))
    eg.merge(a, b)
    changed = eg.rebuild()
    assert Sharded(a, c, 0, 2) in eg.facts
    assert Sharded(a, c, 0, 2) in changed


# ------------------------------
# Fact database
# ------------------------------
def test_fact_query_by_fields():
    eg = EGraph()
    a, b, c = leaf(eg, "a"), leaf(eg, "b"), leaf(eg, "c")
    eg.facts.add(Sharded(a, b, 0, 2))
    eg.facts.add(Sharded(a, c, 1, 2))
    eg.facts.add(Partial(a, b, 2, Combiner.ADD))
    assert eg.facts.query(RelKind.SHARDED, t=a, dim=1) == [Sharded(a, c, 1, 2)]
    assert len(eg.facts.query(RelKind.SHARDED)) == 2
    assert eg.facts.query(RelKind.PARTIAL, t2=b, op=Combiner.ADD) == [Partial(a, b, 2, Combiner.ADD)]
    assert not eg.facts.add(Sharded(a, b, 0, 2))
    assert len(eg.facts) == 3


def test_fact_dump_is_sorted():
    eg = EGraph()
    a, b = leaf(eg, "a"), leaf(eg, "b")
    eg.facts.add(Sharded(a, b, 0, 2))
    eg.facts.add(Duplicate(a, b, 2))
    assert eg.facts.dump() == ["duplicate(e0, e1, c=2)", "sharded(e0, e1, d=0, c=2)"]


# ------------------------------
# Commit and saturation
# ------------------------------
def test_commit_merges_on_duplicate():
    eg = EGraph()
    a = leaf(eg, "a")
    b = leaf(eg, "b", side=Side.DISTRIBUTED)
    firings = {}
    changes = eg.commit([("r", Duplicate(a, b, 2))], firings)
    assert changes == 1
    assert eg.equiv(a, b)
    assert firings == {"r": 1}


def test_commit_drops_ill_shaped_facts():
    eg = EGraph()
    a = leaf(eg, "a", shape=(4, 8))
    b = leaf(eg, "b", shape=(4, 8), side=Side.DISTRIBUTED)
    assert eg.commit([("r", Sharded(a, b, 1, 2))], {}) == 0
    assert len(eg.facts) == 0


def test_commit_equate():
    eg = EGraph()
    a, b = leaf(eg, "a"), leaf(eg, "b")
    firings = {}
    eg.commit([("r", Equate(a, b)), ("r", Equate(b, a))], firings)
    assert eg.equiv(a, b)
    assert firings == {"r": 1}


def _tp_egraph():
    eg = EGraph()
    x = leaf(eg, "x", (4, 8))
    w = leaf(eg, "w", (8, 6))
    x2 = leaf(eg, "x", (4, 4), Side.DISTRIBUTED)
    w2 = leaf(eg, "w", (4, 6), Side.DISTRIBUTED)
    eg.commit([("annotation", Sharded(x, x2, 1, 2)), ("annotation", Sharded(w, w2, 0, 2))], {})
    y = eg.add_node(OpKind.of(OpName.DOT), (x, w), (4, 6), origin=(Side.BASELINE, "y"))
    y2 = eg.add_node(OpKind.of(OpName.DOT), (x2, w2), (4, 6), origin=(Side.DISTRIBUTED, "y"))
    z2 = eg.add_node(OpKind.of(OpName.ALL_REDUCE, group=(0, 1), combiner="add"), (y2,), (4, 6),
                     origin=(Side.DISTRIBUTED, "z"))
    return eg, y, y2, z2


def test_run_to_fixpoint_discharges_partial():
    eg, y, y2, z2 = _tp_egraph()
    firings = {}
    result = eg.run_to_fixpoint(default_catalog(), Budget(), firings=firings)
    assert result.saturated
    assert Partial(eg.find(y), eg.find(y2), 2, Combiner.ADD) in eg.facts
    assert eg.equiv(y, z2)
    assert firings["P2-dot-partial"] == 1
    assert firings["L6-allreduce-discharge"] == 1


def test_saturation_is_idempotent():
    eg, *_ = _tp_egraph()
    eg.run_to_fixpoint(default_catalog())
    before = eg.facts.dump()
    again = eg.run_to_fixpoint(default_catalog())
    assert again.saturated
    assert again.iterations == 1
    assert eg.facts.dump() == before


def test_parallel_matching_is_deterministic():
    dumps = []
    for jobs in (1, 8):
        eg, *_ = _tp_egraph()
        eg.run_to_fixpoint(default_catalog(), jobs=jobs)
        dumps.append(eg.facts.dump())
    assert dumps[0] == dumps[1]


def test_iteration_budget():
    eg, *_ = _tp_egraph()
    with pytest.raises(BudgetExceeded) as info:
        eg.run_to_fixpoint(default_catalog(), Budget(max_iterations=1))
    assert not info.value.result.saturated


def test_fact_budget():
    eg, *_ = _tp_egraph()
    with pytest.raises(BudgetExceeded):
        eg.run_to_fixpoint(default_catalog(), Budget(max_facts=2))


def test_empty_catalog_saturates_immediately():
    eg, *_ = _tp_egraph()
    result = eg.run_to_fixpoint(RuleCatalog(()))
    assert result.saturated
    assert result.iterations == 1
