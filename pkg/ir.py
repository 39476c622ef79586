"""
Tensor graph IR shared by every other module: node table, JSON format,
shape inference, validation and stage ordering.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from math import prod
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from loguru import logger

Shape = Tuple[int, ...]


class DType(str, Enum):
    F32 = "f32"
    BF16 = "bf16"
    F16 = "f16"
    I32 = "i32"
    EXACT = "exact"


class GraphKind(str, Enum):
    BASELINE = "baseline"
    DISTRIBUTED = "distributed"


class OpName(str, Enum):
    INPUT = "input"
    CONSTANT = "constant"
    ELEM = "elem_op"
    DOT = "dot"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    SLICE = "slice"
    MAX_REDUCE = "max_reduce"
    SUM_REDUCE = "sum_reduce"
    CONVERT = "convert"
    ALL_REDUCE = "all_reduce"
    ALL_GATHER = "all_gather"
    REDUCE_SCATTER = "reduce_scatter"
    CONCAT = "concat"


COLLECTIVES = frozenset({OpName.ALL_REDUCE, OpName.ALL_GATHER, OpName.REDUCE_SCATTER})
COMBINERS = ("add", "max")
LEAF_OPS = frozenset({OpName.INPUT, OpName.CONSTANT})


# -------------------------
# Errors
# -------------------------
class ParseError(Exception):
    def __init__(self, position: Any, message: str):
        super().__init__(f"{position}: {message}")
        self.position = position
        self.message = message


class ValidationError(Exception):
    def __init__(self, node_id: Optional[str], reason: str):
        super().__init__(f"{node_id}: {reason}" if node_id else reason)
        self.node_id = node_id
        self.reason = reason


class ElementCountMismatch(ValidationError):
    pass


class NotAPermutation(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class CycleError(ValidationError):
    pass


class UnknownOp(ValidationError):
    pass


class AnnotationError(ValidationError):
    pass


# -------------------------
# Value types
# -------------------------
@dataclass(frozen=True, slots=True)
class SourceLoc:
    file: str
    line: int
    expr: Optional[str] = None

    def __str__(self) -> str:
        return f"{self.file}:{self.line}"


@dataclass(frozen=True, slots=True)
class ReplicaGroup:
    ranks: Tuple[int, ...]

    def __post_init__(self):
        if not self.ranks:
            raise ValueError("replica group is empty")
        if len(set(self.ranks)) != len(self.ranks):
            raise ValueError(f"replica group has duplicate ranks: {list(self.ranks)}")
        if any(r < 0 for r in self.ranks):
            raise ValueError(f"replica group has negative ranks: {list(self.ranks)}")

    @property
    def size(self) -> int:
        return len(self.ranks)

    @classmethod
    def of(cls, n: int) -> "ReplicaGroup":
        return cls(tuple(range(n)))


@dataclass(frozen=True, slots=True)
class OpKind:
    name: OpName
    attrs: Tuple[Tuple[str, Any], ...] = ()

    @classmethod
    def of(cls, name: OpName | str, **attrs: Any) -> "OpKind":
        normalized = {}
        for key, value in attrs.items():
            if value is None:
                continue
            if isinstance(value, list):
                value = tuple(value)
            if key == "dtype":
                value = DType(value)
            normalized[key] = value
        return cls(OpName(name), tuple(sorted(normalized.items())))

    def get(self, key: str, default: Any = None) -> Any:
        for k, v in self.attrs:
            if k == key:
                return v
        return default

    @property
    def group(self) -> Optional[ReplicaGroup]:
        ranks = self.get("group")
        return ReplicaGroup(tuple(ranks)) if ranks is not None else None

    @property
    def is_collective(self) -> bool:
        return self.name in COLLECTIVES

    def __str__(self) -> str:
        if not self.attrs:
            return self.name.value
        rendered = ", ".join(f"{k}={_render_attr(v)}" for k, v in self.attrs)
        return f"{self.name.value}({rendered})"


def _render_attr(value: Any) -> str:
    if isinstance(value, tuple):
        return "(" + ",".join(str(v) for v in value) + ")"
    if isinstance(value, Enum):
        return value.value
    return str(value)


@dataclass(frozen=True, slots=True)
class TensorNode:
    id: str
    op: OpKind
    inputs: Tuple[str, ...]
    shape: Shape
    dtype: DType
    rank: Optional[int] = None
    loc: Optional[SourceLoc] = None
    layer: Optional[int] = None


@dataclass(frozen=True)
class Graph:
    kind: GraphKind
    nodes: Dict[str, TensorNode]
    outputs: Tuple[str, ...]

    def __getitem__(self, node_id: str) -> TensorNode:
        return self.nodes[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @cached_property
    def consumers(self) -> Dict[str, List[str]]:
        users: Dict[str, List[str]] = {node_id: [] for node_id in self.nodes}
        for node in self.nodes.values():
            for src in dict.fromkeys(node.inputs):
                if src in users:
                    users[src].append(node.id)
        for ids in users.values():
            ids.sort()
        return users

    @cached_property
    def topo_order(self) -> List[str]:
        return [node_id for stage in topo_stages(self) for group in stage for node_id in group]

    @property
    def layers(self) -> List[int]:
        return sorted({n.layer for n in self.nodes.values() if n.layer is not None})

    def replace(self, nodes: Dict[str, TensorNode], outputs: Optional[Sequence[str]] = None) -> "Graph":
        return Graph(self.kind, dict(nodes), tuple(outputs) if outputs is not None else self.outputs)


# -------------------------
# Shape inference
# -------------------------
def _require(cond: bool, exc: type, node_id: str, reason: str):
    if not cond:
        raise exc(node_id, reason)


def _arity(node_id: str, inputs: Sequence[Shape], n: int):
    _require(len(inputs) == n, ValidationError, node_id, f"expected {n} inputs, got {len(inputs)}")


def _broadcast(node_id: str, inputs: Sequence[Shape]) -> Shape:
    ranked = [s for s in inputs if len(s) > 0]
    if not ranked:
        return ()
    rank = len(ranked[0])
    _require(all(len(s) == rank for s in ranked), ShapeMismatch, node_id,
             f"elementwise operands differ in rank: {[list(s) for s in inputs]}")
    out = []
    for dims in zip(*ranked):
        extents = {d for d in dims if d != 1}
        _require(len(extents) <= 1, ShapeMismatch, node_id,
                 f"elementwise operands do not broadcast: {[list(s) for s in inputs]}")
        out.append(extents.pop() if extents else 1)
    return tuple(out)


def infer_shape(node_id: str, op: OpKind, inputs: Sequence[Shape]) -> Optional[Shape]:
    """
    Infer the output shape of an operation from its input shapes.

    Args:
        node_id (str): Node id used in error messages.
        op (OpKind): The operation.
        inputs (Sequence[Shape]): Shapes of the operands in order.

    Returns:
        Shape: The inferred shape, or None for leaves whose declared shape is authoritative.
    """
    name = op.name
    if name in LEAF_OPS:
        _arity(node_id, inputs, 0)
        return None
    if name == OpName.ELEM:
        _require(len(inputs) >= 1, ValidationError, node_id, "elementwise op without operands")
        _require(op.get("fn") is not None, ValidationError, node_id, "elementwise op without fn")
        return _broadcast(node_id, inputs)
    if name == OpName.DOT:
        _arity(node_id, inputs, 2)
        x, y = inputs
        _require(len(x) >= 2 and len(y) >= 2, ShapeMismatch, node_id, "dot operands need rank >= 2")
        _require(x[-1] == y[-2], ShapeMismatch, node_id, f"dot contracts {x[-1]} against {y[-2]}")
        if len(y) > 2:
            _require(len(x) == len(y) and x[:-2] == y[:-2], ShapeMismatch, node_id,
                     f"dot batch dims differ: {list(x)} vs {list(y)}")
        return tuple(x[:-1]) + (y[-1],)
    _arity(node_id, inputs, len(inputs) if name == OpName.CONCAT else 1)
    x = inputs[0] if inputs else ()
    if name == OpName.TRANSPOSE:
        perm = tuple(op.get("perm", ()))
        _require(sorted(perm) == list(range(len(x))), NotAPermutation, node_id,
                 f"{list(perm)} is not a permutation of rank {len(x)}")
        return tuple(x[p] for p in perm)
    if name == OpName.RESHAPE:
        target = tuple(op.get("shape", ()))
        _require(all(d >= 1 for d in target), ShapeMismatch, node_id, f"non-positive target {list(target)}")
        _require(prod(target) == prod(x), ElementCountMismatch, node_id,
                 f"reshape {list(x)} -> {list(target)} changes element count")
        return target
    if name in (OpName.SLICE, OpName.MAX_REDUCE, OpName.SUM_REDUCE, OpName.ALL_GATHER,
                OpName.REDUCE_SCATTER, OpName.CONCAT):
        dim = op.get("dim")
        _require(isinstance(dim, int) and 0 <= dim < len(x), ShapeMismatch, node_id,
                 f"dim {dim} out of range for rank {len(x)}")
    if name == OpName.SLICE:
        start, length = op.get("start"), op.get("length")
        _require(start is not None and start >= 0 and length is not None and length >= 1,
                 ShapeMismatch, node_id, "slice needs start >= 0 and length >= 1")
        _require(start + length <= x[dim], ShapeMismatch, node_id,
                 f"slice {start}+{length} exceeds extent {x[dim]}")
        return _with_dim(x, dim, length)
    if name in (OpName.MAX_REDUCE, OpName.SUM_REDUCE):
        return _with_dim(x, dim, 1)
    if name == OpName.CONVERT:
        _require(op.get("dtype") is not None, ValidationError, node_id, "convert without dtype")
        return tuple(x)
    if name == OpName.CONCAT:
        _require(len(inputs) >= 1, ValidationError, node_id, "concat without operands")
        rest = [s[:dim] + s[dim + 1:] for s in inputs]
        _require(all(len(s) == len(x) for s in inputs) and len(set(rest)) == 1, ShapeMismatch, node_id,
                 f"concat operands disagree off dim {dim}")
        return _with_dim(x, dim, sum(s[dim] for s in inputs))
    if op.is_collective:
        _require(op.get("group") is not None, ValidationError, node_id, "collective without group")
        try:
            group = op.group
        except ValueError as e:
            raise ValidationError(node_id, str(e))
        if name != OpName.ALL_GATHER:
            _require(op.get("combiner") in COMBINERS, ValidationError, node_id,
                     f"combiner must be one of {COMBINERS}")
        if name == OpName.ALL_REDUCE:
            return tuple(x)
        if name == OpName.ALL_GATHER:
            return _with_dim(x, dim, x[dim] * group.size)
        _require(x[dim] % group.size == 0, ShapeMismatch, node_id,
                 f"reduce_scatter extent {x[dim]} not divisible by {group.size}")
        return _with_dim(x, dim, x[dim] // group.size)
    raise ValidationError(node_id, f"unknown op {name}")


def _with_dim(shape: Shape, dim: int, extent: int) -> Shape:
    return tuple(shape[:dim]) + (extent,) + tuple(shape[dim + 1:])


# -------------------------
# Validation and ordering
# -------------------------
def validate_graph(g: Graph) -> List[ValidationError]:
    """Collect every per-node invariant violation; an empty list means the graph is valid."""
    errors: List[ValidationError] = []
    for out in g.outputs:
        if out not in g.nodes:
            errors.append(ValidationError(out, "output does not exist"))
    for node in g.nodes.values():
        missing = [i for i in node.inputs if i not in g.nodes]
        if missing:
            errors.append(ValidationError(node.id, f"unknown inputs {missing}"))
        if any(d < 1 for d in node.shape):
            errors.append(ShapeMismatch(node.id, f"non-positive dims {list(node.shape)}"))
        if g.kind == GraphKind.BASELINE:
            if node.op.is_collective:
                errors.append(ValidationError(node.id, "baseline graph contains a collective"))
            if node.rank is not None:
                errors.append(ValidationError(node.id, "baseline node carries a rank"))
        if node.loc is not None and not node.loc.file:
            errors.append(ValidationError(node.id, "source location without file"))
    if errors:
        return errors
    try:
        order = g.topo_order
    except CycleError as e:
        return [e]
    for node_id in order:
        node = g.nodes[node_id]
        try:
            inferred = infer_shape(node.id, node.op, [g.nodes[i].shape for i in node.inputs])
            if inferred is not None and tuple(inferred) != tuple(node.shape):
                raise ShapeMismatch(node.id, f"declared {list(node.shape)}, inferred {list(inferred)}")
            if node.op.name == OpName.CONVERT and node.op.get("dtype") != node.dtype:
                raise ValidationError(node.id, "convert result dtype differs from its target")
        except ValidationError as e:
            errors.append(e)
        for src in node.inputs:
            src_layer = g.nodes[src].layer
            if src_layer is not None and node.layer is not None and src_layer > node.layer:
                errors.append(ValidationError(node.id, f"layer {node.layer} consumes later layer {src_layer}"))
    return errors


def topo_stages(g: Graph, nodes: Optional[Iterable[str]] = None) -> List[List[List[str]]]:
    """
    Split nodes into stages of mutually independent groups.

    Nodes outside `nodes` count as already resolved boundary inputs.
    """
    members = set(g.nodes if nodes is None else nodes)
    depth: Dict[str, int] = {}
    pending = {n: sum(1 for i in dict.fromkeys(g.nodes[n].inputs) if i in members) for n in members}
    ready = sorted(n for n, count in pending.items() if count == 0)
    users: Dict[str, List[str]] = {n: [] for n in members}
    for n in members:
        for src in dict.fromkeys(g.nodes[n].inputs):
            if src in members:
                users[src].append(n)
    while ready:
        current = ready.pop()
        depth[current] = 1 + max((depth[i] for i in g.nodes[current].inputs if i in members), default=-1)
        for user in users[current]:
            pending[user] -= 1
            if pending[user] == 0:
                ready.append(user)
    if len(depth) != len(members):
        stuck = sorted(members - set(depth))
        raise CycleError(stuck[0], f"cycle through {stuck[:5]}")
    stages: List[List[List[str]]] = [[] for _ in range(max(depth.values(), default=-1) + 1)]
    for node_id in sorted(depth):
        stages[depth[node_id]].append([node_id])
    return stages


# -------------------------
# Graph file format
# -------------------------
_ATTR_KEYS = {
    OpName.TRANSPOSE: ("perm",),
    OpName.RESHAPE: ("shape",),
    OpName.SLICE: ("dim", "start", "length"),
    OpName.ELEM: ("fn",),
    OpName.CONSTANT: ("value",),
    OpName.CONVERT: ("dtype",),
    OpName.MAX_REDUCE: ("dim",),
    OpName.SUM_REDUCE: ("dim",),
    OpName.CONCAT: ("dim",),
    OpName.ALL_REDUCE: ("group", "combiner"),
    OpName.ALL_GATHER: ("dim", "group"),
    OpName.REDUCE_SCATTER: ("dim", "group", "combiner"),
}


def _parse_node(i: int, raw: Any) -> TensorNode:
    where = f"nodes[{i}]"
    if not isinstance(raw, dict):
        raise ParseError(where, "node must be an object")
    try:
        node_id = raw["id"]
        if raw["op"] not in {o.value for o in OpName}:
            raise UnknownOp(node_id, f"unknown op {raw['op']!r}")
        op_name = OpName(raw["op"])
        dtype = DType(raw["dtype"])
        shape = tuple(int(d) for d in raw["shape"])
    except KeyError as e:
        raise ParseError(where, f"missing field {e}")
    except (ValueError, TypeError) as e:
        raise ParseError(where, str(e))
    if not isinstance(node_id, str) or not node_id:
        raise ParseError(where, "id must be a nonempty string")
    attrs = raw.get("attrs") or {}
    unknown = set(attrs) - set(_ATTR_KEYS.get(op_name, ()))
    if unknown:
        raise ParseError(where, f"unexpected attrs {sorted(unknown)} for {op_name.value}")
    try:
        op = OpKind.of(op_name, **attrs)
    except ValueError as e:
        raise ParseError(where, str(e))
    loc = raw.get("loc")
    if loc is not None:
        loc = SourceLoc(str(loc.get("file", "")), int(loc.get("line", 0)), loc.get("expr"))
    rank = raw.get("rank")
    layer = raw.get("layer")
    return TensorNode(
        id=node_id, op=op, inputs=tuple(raw.get("inputs", [])), shape=shape, dtype=dtype,
        rank=int(rank) if rank is not None else None, loc=loc,
        layer=int(layer) if layer is not None else None,
    )


def parse_graph(text: str) -> Graph:
    """
    Parse and validate a graph file.

    Args:
        text (str): UTF-8 JSON graph document.

    Returns:
        Graph: The validated graph with ids preserved verbatim.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.pos, e.msg)
    if not isinstance(raw, dict):
        raise ParseError(0, "graph must be a JSON object")
    try:
        kind = GraphKind(raw.get("kind"))
    except ValueError:
        raise ParseError("kind", f"unknown graph kind {raw.get('kind')!r}")
    nodes: Dict[str, TensorNode] = {}
    for i, item in enumerate(raw.get("nodes", [])):
        node = _parse_node(i, item)
        if node.id in nodes:
            raise ParseError(f"nodes[{i}]", f"duplicate id {node.id}")
        nodes[node.id] = node
    g = Graph(kind, nodes, tuple(raw.get("outputs", [])))
    errors = validate_graph(g)
    if errors:
        logger.debug("Graph rejected with {} validation errors", len(errors))
        raise errors[0]
    logger.debug("Parsed {} graph with {} nodes", kind.value, len(nodes))
    return g


def graph_to_dict(g: Graph) -> Dict[str, Any]:
    nodes = []
    for node in g.nodes.values():
        entry: Dict[str, Any] = {
            "id": node.id,
            "op": node.op.name.value,
            "attrs": {k: (list(v) if isinstance(v, tuple) else v.value if isinstance(v, Enum) else v)
                      for k, v in node.op.attrs},
            "inputs": list(node.inputs),
            "shape": list(node.shape),
            "dtype": node.dtype.value,
        }
        if node.rank is not None:
            entry["rank"] = node.rank
        if node.loc is not None:
            entry["loc"] = {"file": node.loc.file, "line": node.loc.line}
            if node.loc.expr is not None:
                entry["loc"]["expr"] = node.loc.expr
        if node.layer is not None:
            entry["layer"] = node.layer
        nodes.append(entry)
    return {"kind": g.kind.value, "outputs": list(g.outputs), "nodes": nodes}


def serialize_graph(g: Graph) -> str:
    return json.dumps(graph_to_dict(g), indent=2)


# -------------------------
# Annotations
# -------------------------
class AnnotationKind(str, Enum):
    SHARD = "shard"
    REPLICATE = "replicate"


@dataclass(frozen=True, slots=True)
class Annotation:
    baseline_id: str
    distributed_ids: Tuple[str, ...]
    relation: AnnotationKind
    group: ReplicaGroup
    dim: Optional[int] = None

    @property
    def distributed_id(self) -> str:
        return self.distributed_ids[0]


@dataclass(frozen=True)
class AnnotationSet:
    entries: Tuple[Annotation, ...] = ()

    def by_baseline(self) -> Dict[str, Annotation]:
        return {a.baseline_id: a for a in self.entries}

    def by_distributed(self) -> Dict[str, Annotation]:
        return {a.distributed_id: a for a in self.entries}

    def groups(self) -> List[ReplicaGroup]:
        return list(dict.fromkeys(a.group for a in self.entries))


def check_annotations(ann: AnnotationSet, g_s: Graph, g_m: Graph) -> List[ValidationError]:
    errors: List[ValidationError] = []
    for a in ann.entries:
        if a.baseline_id not in g_s:
            errors.append(AnnotationError(a.baseline_id, "baseline tensor does not exist"))
            continue
        unknown = [d for d in a.distributed_ids if d not in g_m]
        if unknown:
            errors.append(AnnotationError(a.baseline_id, f"distributed tensors {unknown} do not exist"))
            continue
        if len(a.distributed_ids) != a.group.size:
            errors.append(AnnotationError(a.baseline_id,
                                          f"{len(a.distributed_ids)} distributed ids for {a.group.size} ranks"))
        if len(set(a.distributed_ids)) != 1:
            errors.append(AnnotationError(a.baseline_id, "per-rank tensors must share one SPMD node"))
        if a.relation == AnnotationKind.SHARD:
            rank = len(g_s[a.baseline_id].shape)
            if a.dim is None or not 0 <= a.dim < rank:
                errors.append(AnnotationError(a.baseline_id, f"shard dim {a.dim} out of range for rank {rank}"))
    return errors


def parse_annotations(text: str, g_s: Graph, g_m: Graph) -> AnnotationSet:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.pos, e.msg)
    entries = []
    for i, item in enumerate(raw.get("relations", []) if isinstance(raw, dict) else []):
        where = f"relations[{i}]"
        try:
            entries.append(Annotation(
                baseline_id=item["baseline"],
                distributed_ids=tuple(item["distributed"]),
                relation=AnnotationKind(item["kind"]),
                group=ReplicaGroup(tuple(item["group"])),
                dim=item.get("dim"),
            ))
        except KeyError as e:
            raise ParseError(where, f"missing field {e}")
        except (TypeError, ValueError) as e:
            raise ParseError(where, str(e))
    ann = AnnotationSet(tuple(entries))
    errors = check_annotations(ann, g_s, g_m)
    if errors:
        raise errors[0]
    return ann


def serialize_annotations(ann: AnnotationSet) -> str:
    relations = []
    for a in ann.entries:
        entry: Dict[str, Any] = {"baseline": a.baseline_id, "distributed": list(a.distributed_ids),
                                 "kind": a.relation.value, "group": list(a.group.ranks)}
        if a.dim is not None:
            entry["dim"] = a.dim
        relations.append(entry)
    return json.dumps({"relations": relations}, indent=2)


# -------------------------
# Builder
# -------------------------
@dataclass
class GraphBuilder:
    """Incremental graph construction with inferred shapes, used by the harness and tests."""
    kind: GraphKind
    nodes: Dict[str, TensorNode] = field(default_factory=dict)
    layer: Optional[int] = None
    file: Optional[str] = None
    _line: int = 0

    def add(self, node_id: str, op: OpKind, inputs: Sequence[str] = (), shape: Optional[Sequence[int]] = None,
            dtype: Optional[DType] = None, rank: Optional[int] = None, expr: Optional[str] = None) -> str:
        if node_id in self.nodes:
            raise ValidationError(node_id, "duplicate id")
        in_shapes = [self.nodes[i].shape for i in inputs]
        inferred = infer_shape(node_id, op, in_shapes)
        if inferred is None:
            if shape is None:
                raise ValidationError(node_id, "leaf nodes need an explicit shape")
            inferred = tuple(shape)
        if dtype is None:
            dtype = op.get("dtype") or (self.nodes[inputs[0]].dtype if inputs else DType.F32)
        loc = None
        if self.file is not None:
            self._line += 1
            loc = SourceLoc(self.file, self._line, expr)
        self.nodes[node_id] = TensorNode(node_id, op, tuple(inputs), tuple(inferred), dtype, rank, loc, self.layer)
        return node_id

    def input(self, node_id: str, shape: Sequence[int], dtype: DType = DType.F32) -> str:
        return self.add(node_id, OpKind.of(OpName.INPUT), shape=shape, dtype=dtype)

    def shape(self, node_id: str) -> Shape:
        return self.nodes[node_id].shape

    def build(self, outputs: Sequence[str]) -> Graph:
        return Graph(self.kind, dict(self.nodes), tuple(outputs))
