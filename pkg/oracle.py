"""
Exact-arithmetic reference execution of a graph pair.

Values are numpy object arrays of Python ints and Fractions, so reordered
reductions never introduce rounding. The distributed graph is executed once
per rank with collectives simulated over the participating ranks.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Dict, FrozenSet, List, Optional, Tuple

import numpy as np
from loguru import logger

from ir import AnnotationKind, AnnotationSet, DType, Graph, OpName, TensorNode

# A value carries the set of lossy dtypes it passed through.
Value = Tuple[np.ndarray, FrozenSet[str]]
LOSSY = frozenset({DType.BF16, DType.F16})


class UnsupportedOp(Exception):
    def __init__(self, node_id: str, reason: str):
        super().__init__(f"{node_id}: {reason}")
        self.node_id = node_id


@dataclass(frozen=True)
class OracleResult:
    equal: bool
    witness: Optional[str] = None


def _exact(x):
    return np.vectorize(Fraction, otypes=[object])(x)


def _poly(x):
    return 1 + x + x * x / 2


ELEM_FNS: Dict[str, Callable[..., Any]] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: _exact(a) / b,
    "max": np.maximum,
    "min": np.minimum,
    "relu": lambda a: np.where(np.asarray(a > 0, dtype=bool), a, 0).astype(object),
    "neg": lambda a: -a,
    "square": lambda a: a * a,
    "poly": lambda a: _poly(_exact(a)),
    "identity": lambda a: a,
}


def _constant(node: TensorNode) -> np.ndarray:
    value = node.op.get("value", 0)
    exact = Fraction(str(value)) if isinstance(value, float) else value
    return np.full(node.shape, exact, dtype=object)


def _index(shape, dim: int, start: int, length: int):
    idx = [slice(None)] * len(shape)
    idx[dim] = slice(start, start + length)
    return tuple(idx)


def evaluate(node: TensorNode, args: List[Value]) -> Value:
    """Evaluate one non-collective node on exact inputs."""
    op = node.op
    name = op.name
    arrays = [a for a, _ in args]
    trail = frozenset().union(*[t for _, t in args]) if args else frozenset()
    if name == OpName.CONSTANT:
        return _constant(node), frozenset()
    if name == OpName.ELEM:
        fn = ELEM_FNS.get(op.get("fn"))
        if fn is None:
            raise UnsupportedOp(node.id, f"elementwise fn {op.get('fn')!r} has no exact form")
        out = fn(*arrays)
    elif name == OpName.DOT:
        out = np.matmul(arrays[0], arrays[1])
    elif name == OpName.TRANSPOSE:
        out = np.transpose(arrays[0], op.get("perm"))
    elif name == OpName.RESHAPE:
        out = arrays[0].reshape(op.get("shape"))
    elif name == OpName.SLICE:
        out = arrays[0][_index(arrays[0].shape, op.get("dim"), op.get("start"), op.get("length"))]
    elif name == OpName.MAX_REDUCE:
        out = np.maximum.reduce(arrays[0], axis=op.get("dim"), keepdims=True)
    elif name == OpName.SUM_REDUCE:
        out = np.add.reduce(arrays[0], axis=op.get("dim"), keepdims=True)
    elif name == OpName.CONCAT:
        out = np.concatenate(arrays, axis=op.get("dim"))
    elif name == OpName.CONVERT:
        out = arrays[0]
        target = op.get("dtype")
        if target in LOSSY:
            trail = trail | {target.value}
    else:
        raise UnsupportedOp(node.id, f"{name.value} is not executable here")
    return np.asarray(out, dtype=object).reshape(node.shape), trail


def run_baseline(g: Graph, inputs: Dict[str, np.ndarray]) -> Dict[str, Value]:
    values: Dict[str, Value] = {}
    for node_id in g.topo_order:
        node = g[node_id]
        if node.op.name == OpName.INPUT:
            values[node_id] = (inputs[node_id], frozenset())
        else:
            values[node_id] = evaluate(node, [values[i] for i in node.inputs])
    return values


def _group_of(ranks: Tuple[int, ...], r: int) -> Tuple[int, ...]:
    return ranks if r in ranks else (r,)


def _collective(node: TensorNode, per_rank: List[Dict[str, Value]], r: int) -> Value:
    op = node.op
    src = node.inputs[0]
    group = _group_of(tuple(op.get("group")), r)
    parts = [per_rank[q][src] for q in group]
    trail = frozenset().union(*[t for _, t in parts])
    arrays = [a for a, _ in parts]
    combine = np.maximum if op.get("combiner") == "max" else np.add
    if op.name == OpName.ALL_REDUCE:
        out = arrays[0]
        for a in arrays[1:]:
            out = combine(out, a)
        return np.asarray(out, dtype=object), trail
    dim = op.get("dim")
    size = len(op.get("group"))
    if op.name == OpName.ALL_GATHER:
        if len(group) != size:
            arrays = arrays * size
        return np.concatenate(arrays, axis=dim), trail
    total = arrays[0]
    for a in arrays[1:]:
        total = combine(total, a)
    chunk = total.shape[dim] // size
    pos = group.index(r) if len(group) == size else 0
    return total[_index(total.shape, dim, pos * chunk, chunk)], trail


def run_distributed(g: Graph, inputs: List[Dict[str, np.ndarray]]) -> List[Dict[str, Value]]:
    world = len(inputs)
    per_rank: List[Dict[str, Value]] = [{} for _ in range(world)]
    for node_id in g.topo_order:
        node = g[node_id]
        for r in range(world):
            if node.rank is not None and node.rank != r:
                continue
            if node.op.name == OpName.INPUT:
                per_rank[r][node_id] = (inputs[r][node_id], frozenset())
            elif node.op.is_collective:
                per_rank[r][node_id] = _collective(node, per_rank, r)
            else:
                missing = [i for i in node.inputs if i not in per_rank[r]]
                if missing:
                    raise UnsupportedOp(node_id, f"rank {r} has no value for {missing[0]}")
                per_rank[r][node_id] = evaluate(node, [per_rank[r][i] for i in node.inputs])
    return per_rank


def _world(ann: AnnotationSet, g_m: Graph) -> int:
    ranks = {r for group in ann.groups() for r in group.ranks}
    for node in g_m.nodes.values():
        if node.op.is_collective:
            ranks.update(node.op.get("group"))
    return max(ranks) + 1 if ranks else 1


def _shard(ann_group: Tuple[int, ...], full: np.ndarray, dim: int, r: int) -> np.ndarray:
    size = len(ann_group)
    chunk = full.shape[dim] // size
    pos = ann_group.index(r) if r in ann_group else 0
    return full[_index(full.shape, dim, pos * chunk, chunk)]


def oracle_execute(g_s: Graph, g_m: Graph, ann: AnnotationSet, seed: int = 0) -> OracleResult:
    """
    Compare both graphs on random exact integer inputs.

    Args:
        g_s (Graph): Baseline graph.
        g_m (Graph): Distributed graph.
        ann (AnnotationSet): How distributed inputs are cut from baseline inputs.
        seed (int): Seed for the input generator.

    Returns:
        OracleResult: Whether every rank reproduces every baseline output exactly.
    """
    rng = np.random.default_rng(seed)
    base_inputs = {}
    for node_id in sorted(g_s.nodes):
        node = g_s[node_id]
        if node.op.name == OpName.INPUT:
            base_inputs[node_id] = rng.integers(-3, 4, size=node.shape).astype(object)
    world = _world(ann, g_m)
    by_distributed = ann.by_distributed()
    dist_inputs: List[Dict[str, np.ndarray]] = [{} for _ in range(world)]
    for node_id in sorted(g_m.nodes):
        if g_m[node_id].op.name != OpName.INPUT:
            continue
        a = by_distributed.get(node_id)
        if a is None:
            raise UnsupportedOp(node_id, "distributed input has no annotation")
        full = base_inputs[a.baseline_id]
        for r in range(world):
            if a.relation == AnnotationKind.REPLICATE:
                dist_inputs[r][node_id] = full
            else:
                dist_inputs[r][node_id] = _shard(a.group.ranks, full, a.dim, r)

    base = run_baseline(g_s, base_inputs)
    ranks = run_distributed(g_m, dist_inputs)
    if len(g_s.outputs) != len(g_m.outputs):
        return OracleResult(False, f"output counts {len(g_s.outputs)} != {len(g_m.outputs)}")
    for k, (o_s, o_m) in enumerate(zip(g_s.outputs, g_m.outputs)):
        expected, trail = base[o_s]
        for r, values in enumerate(ranks):
            if o_m not in values:
                continue
            got, got_trail = values[o_m]
            if got_trail != trail:
                return OracleResult(False, f"output {k} rank {r}: precision {sorted(got_trail)} vs {sorted(trail)}")
            if got.shape != expected.shape:
                return OracleResult(False, f"output {k} rank {r}: shape {got.shape} vs {expected.shape}")
            diff = np.argwhere(np.asarray(got != expected, dtype=bool))
            if len(diff):
                index = tuple(int(i) for i in diff[0])
                return OracleResult(False, f"output {k} rank {r} at {index}: {got[index]} != {expected[index]}")
    logger.debug("Oracle equal on seed {}", seed)
    return OracleResult(True)
