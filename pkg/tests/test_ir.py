import json
import pytest

from ir import (
    AnnotationError, CycleError, DType, ElementCountMismatch, GraphBuilder, GraphKind, NotAPermutation, OpKind,
    OpName, ParseError, ShapeMismatch, UnknownOp, ValidationError, infer_shape, parse_annotations, parse_graph,
    serialize_annotations, serialize_graph, topo_stages, validate_graph,
)


def node(node_id, op, inputs=(), shape=(), dtype="f32", **extra):
    raw = {"id": node_id, "op": op, "inputs": list(inputs), "shape": list(shape), "dtype": dtype}
    raw.update(extra)
    return raw


def doc(nodes, outputs, kind="baseline"):
    return json.dumps({"kind": kind, "nodes": nodes, "outputs": outputs})


# ------------------------------
# Shape inference
# ------------------------------
@pytest.mark.parametrize("op, inputs, expected", [
    (OpKind.of(OpName.DOT), [(4, 8), (8, 6)], (4, 6)),
    (OpKind.of(OpName.DOT), [(2, 4, 8), (2, 8, 3)], (2, 4, 3)),
    (OpKind.of(OpName.TRANSPOSE, perm=(1, 0, 2)), [(2, 3, 4)], (3, 2, 4)),
    (OpKind.of(OpName.RESHAPE, shape=(6, 4)), [(2, 3, 4)], (6, 4)),
    (OpKind.of(OpName.SLICE, dim=0, start=1, length=2), [(4, 5)], (2, 5)),
    (OpKind.of(OpName.SUM_REDUCE, dim=1), [(4, 5)], (4, 1)),
    (OpKind.of(OpName.ELEM, fn="sub"), [(3, 4), (3, 1)], (3, 4)),
    (OpKind.of(OpName.ALL_GATHER, dim=0, group=(0, 1)), [(2, 5)], (4, 5)),
    (OpKind.of(OpName.REDUCE_SCATTER, dim=1, group=(0, 1), combiner="add"), [(2, 6)], (2, 3)),
    (OpKind.of(OpName.CONCAT, dim=0), [(1, 3), (2, 3)], (3, 3)),
])
def test_infer_shape(op, inputs, expected):
    assert infer_shape("n", op, inputs) == expected


@pytest.mark.parametrize("op, inputs, error", [
    (OpKind.of(OpName.DOT), [(4, 8), (6, 6)], ShapeMismatch),
    (OpKind.of(OpName.TRANSPOSE, perm=(0, 0)), [(2, 3)], NotAPermutation),
    (OpKind.of(OpName.RESHAPE, shape=(5,)), [(2, 3)], ElementCountMismatch),
    (OpKind.of(OpName.SLICE, dim=0, start=3, length=2), [(4, 5)], ShapeMismatch),
    (OpKind.of(OpName.REDUCE_SCATTER, dim=0, group=(0, 1, 2), combiner="add"), [(4, 5)], ShapeMismatch),
    (OpKind.of(OpName.ALL_REDUCE, group=(0, 1), combiner="mul"), [(4, 5)], ValidationError),
])
def test_infer_shape_rejects(op, inputs, error):
    with pytest.raises(error):
        infer_shape("n", op, inputs)


def test_opkind_normalizes_attrs():
    op = OpKind.of("convert", dtype="bf16")
    assert op.get("dtype") == DType.BF16
    assert OpKind.of(OpName.TRANSPOSE, perm=[1, 0]) == OpKind.of(OpName.TRANSPOSE, perm=(1, 0))
    assert str(OpKind.of(OpName.TRANSPOSE, perm=(1, 0))) == "transpose(perm=(1,0))"
    assert OpKind.of(OpName.ALL_REDUCE, group=(0, 1), combiner="add").is_collective


# ------------------------------
# Parsing and validation
# ------------------------------
def test_parse_graph_preserves_ids_and_locations():
    text = doc([
        node("a", "input", shape=(2, 3), loc={"file": "m.py", "line": 4, "expr": "a = load()"}, layer=0),
        node("t", "transpose", ["a"], (3, 2), attrs={"perm": [1, 0]}, layer=0),
    ], ["t"])
    g = parse_graph(text)
    assert list(g.nodes) == ["a", "t"]
    assert g["t"].op.get("perm") == (1, 0)
    assert str(g["a"].loc) == "m.py:4"
    assert g.outputs == ("t",)
    assert g.layers == [0]


def test_parse_graph_roundtrip_is_stable():
    text = doc([node("a", "input", shape=(2, 3)), node("r", "reshape", ["a"], (6,), attrs={"shape": [6]})], ["r"])
    g = parse_graph(text)
    again = parse_graph(serialize_graph(g))
    assert serialize_graph(again) == serialize_graph(g)


@pytest.mark.parametrize("text, error", [
    ("{not json", ParseError),
    (doc([node("a", "input", shape=(2,))], ["a"], kind="other"), ParseError),
    (doc([node("a", "input", shape=(2,)), node("a", "input", shape=(2,))], ["a"]), ParseError),
    (doc([node("a", "fft", shape=(2,))], ["a"]), UnknownOp),
    (doc([node("a", "input", shape=(2,)), node("b", "transpose", ["a"], (2,), attrs={"dim": 0})], ["b"]),
     ParseError),
    (doc([node("a", "input", shape=(2, 3)), node("r", "reshape", ["a"], (5,), attrs={"shape": [5]})], ["r"]),
     ElementCountMismatch),
    (doc([node("a", "input", shape=(2, 3)), node("t", "transpose", ["a"], (2, 3), attrs={"perm": [1, 0]})],
         ["t"]), ShapeMismatch),
])
def test_parse_graph_errors(text, error):
    with pytest.raises(error):
        parse_graph(text)


def test_cycle_detected():
    text = doc([
        node("a", "elem_op", ["b"], (2,), attrs={"fn": "neg"}),
        node("b", "elem_op", ["a"], (2,), attrs={"fn": "neg"}),
    ], ["a"])
    with pytest.raises(CycleError):
        parse_graph(text)


def test_baseline_rejects_collectives():
    b = GraphBuilder(GraphKind.BASELINE)
    b.input("a", (2, 2))
    b.add("r", OpKind.of(OpName.ALL_REDUCE, group=(0, 1), combiner="add"), ["a"])
    errors = validate_graph(b.build(["r"]))
    assert any("collective" in e.reason for e in errors)


def test_layer_order_enforced():
    b = GraphBuilder(GraphKind.BASELINE)
    b.layer = 1
    b.input("a", (2,))
    b.layer = 0
    b.add("n", OpKind.of(OpName.ELEM, fn="neg"), ["a"])
    errors = validate_graph(b.build(["n"]))
    assert any("later layer" in e.reason for e in errors)


def test_topo_stages_group_independent_nodes():
    b = GraphBuilder(GraphKind.BASELINE)
    b.input("a", (2, 2))
    b.add("p", OpKind.of(OpName.ELEM, fn="neg"), ["a"])
    b.add("q", OpKind.of(OpName.ELEM, fn="square"), ["a"])
    b.add("s", OpKind.of(OpName.ELEM, fn="add"), ["p", "q"])
    g = b.build(["s"])
    assert topo_stages(g) == [[["a"]], [["p"], ["q"]], [["s"]]]
    assert g.topo_order == ["a", "p", "q", "s"]
    assert g.consumers["a"] == ["p", "q"]


def test_builder_assigns_source_lines():
    b = GraphBuilder(GraphKind.BASELINE, file="m.py")
    b.input("a", (2,))
    b.add("n", OpKind.of(OpName.ELEM, fn="neg"), ["a"], expr="n = -a")
    g = b.build(["n"])
    assert g["a"].loc.line == 1
    assert g["n"].loc.line == 2
    assert g["n"].loc.expr == "n = -a"


# ------------------------------
# Annotations
# ------------------------------
def _pair():
    b = GraphBuilder(GraphKind.BASELINE)
    b.input("x", (4, 8))
    g_s = b.build(["x"])
    m = GraphBuilder(GraphKind.DISTRIBUTED)
    m.input("x", (4, 4))
    return g_s, m.build(["x"])


def test_annotations_roundtrip():
    g_s, g_m = _pair()
    text = json.dumps({"relations": [
        {"baseline": "x", "distributed": ["x", "x"], "kind": "shard", "group": [0, 1], "dim": 1},
    ]})
    ann = parse_annotations(text, g_s, g_m)
    assert ann.entries[0].dim == 1
    assert ann.entries[0].group.size == 2
    assert parse_annotations(serialize_annotations(ann), g_s, g_m) == ann


@pytest.mark.parametrize("relation", [
    {"baseline": "nope", "distributed": ["x", "x"], "kind": "shard", "group": [0, 1], "dim": 1},
    {"baseline": "x", "distributed": ["x"], "kind": "shard", "group": [0, 1], "dim": 1},
    {"baseline": "x", "distributed": ["x", "x"], "kind": "shard", "group": [0, 1], "dim": 5},
])
def test_annotation_errors(relation):
    g_s, g_m = _pair()
    with pytest.raises(AnnotationError):
        parse_annotations(json.dumps({"relations": [relation]}), g_s, g_m)


def test_annotation_rejects_bad_group():
    g_s, g_m = _pair()
    text = json.dumps({"relations": [{"baseline": "x", "distributed": ["x", "x"], "kind": "replicate",
                                      "group": [1, 1]}]})
    with pytest.raises(ParseError):
        parse_annotations(text, g_s, g_m)
