"""
Datalog-style rewrite rules over the e-graph.

Each rule is data: an id, a family, a printable premise/head rendering and
a matcher. A matcher receives one triggering fact and yields derived facts
or equalities; it only reads the e-graph, the engine commits its output.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

from loguru import logger

from bijection import infer_bijection, normalize_layout
from egraph import Derived, EClassId, EGraph, ENode
from ir import OpName
from relations import (
    Combiner, Duplicate, Group, Identity, Layout, LayoutError, LayoutTerm, LoopRedB, LoopRedD, Partial, RelKind,
    Relation, Reshape, Sharded, Side, SliceRel, Transpose, compose_layout, fresh_axes, layout_from_primitives,
    push_axes, same_group,
)

Matcher = Callable[[EGraph, Relation], Iterable[Derived]]
WALK_DEPTH = 4


class UnknownRule(Exception):
    def __init__(self, rule_id: str):
        super().__init__(f"unknown rule {rule_id!r}")
        self.rule_id = rule_id


class Family(str, Enum):
    PARTITION = "Partition"
    LAYOUT = "Layout"
    SLICING = "Slicing"
    UNROLL = "Unroll"
    MIXED = "Mixed"


class Parallelism(str, Enum):
    TP = "tp"
    SP = "sp"
    EP = "ep"


ALL_FLAGS = frozenset(Parallelism)


# -------------------------
# Matching helpers
# -------------------------
def _on(eg: EGraph, cid: EClassId, side: Side) -> bool:
    return any(s == side for s, _ in eg.origins(cid))


def _paired_uses(eg: EGraph, x: EClassId, x2: EClassId, names: Sequence[OpName],
                 same_op: bool = True) -> Iterator[Tuple[Tuple[ENode, EClassId], Tuple[ENode, EClassId]]]:
    """Baseline users of `x` paired with distributed users of `x2` at the same operand position."""
    x, x2 = eg.find(x), eg.find(x2)
    left = [(n, z) for n, z in eg.uses(x) if n.op.name in names and _on(eg, z, Side.BASELINE)]
    right = [(n, z) for n, z in eg.uses(x2) if n.op.name in names and _on(eg, z, Side.DISTRIBUTED)]
    for n, z in left:
        for n2, z2 in right:
            if n.op.name != n2.op.name or len(n.children) != len(n2.children):
                continue
            if same_op and n.op != n2.op:
                continue
            if any(a == x and b == x2 for a, b in zip(n.children, n2.children)):
                yield (n, z), (n2, z2)


def _sharded(eg: EGraph, a: EClassId, a2: EClassId, dim: int, group: Group) -> bool:
    return bool(eg.facts.query(RelKind.SHARDED, t=eg.find(a), t2=eg.find(a2), dim=dim, group=group))


def _shard_dims(eg: EGraph, a: EClassId, a2: EClassId, group: Group) -> List[int]:
    return [f.dim for f in eg.facts.query(RelKind.SHARDED, t=eg.find(a), t2=eg.find(a2), group=group)]


def _broadcastable(eg: EGraph, a: EClassId, dim: int) -> bool:
    shape = eg.shape(a)
    return len(shape) == 0 or (len(shape) > dim and shape[dim] == 1)


def _operands_sharded(eg: EGraph, n: ENode, n2: ENode, dim: int, group: Group) -> bool:
    for a, a2 in zip(n.children, n2.children):
        if _sharded(eg, a, a2, dim, group):
            continue
        if a == a2 and _broadcastable(eg, a, dim):
            continue
        return False
    return True


def _walk(eg: EGraph, start: EClassId, side: Side) -> List[Tuple[EClassId, Tuple[LayoutTerm, ...]]]:
    """Classes reachable from `start` through layout ops of one side, with the ops taken."""
    found = [(eg.find(start), ())]
    frontier = list(found)
    for _ in range(WALK_DEPTH):
        step = []
        for cid, seq in frontier:
            for n, z in eg.uses(cid):
                if not _on(eg, z, side):
                    continue
                if n.op.name == OpName.TRANSPOSE:
                    step.append((z, seq + (Transpose(tuple(n.op.get("perm"))),)))
                elif n.op.name == OpName.RESHAPE:
                    step.append((z, seq + (Reshape(tuple(n.op.get("shape"))),)))
        found.extend(step)
        frontier = step
    return found


def _layout(eg: EGraph, t: EClassId, t2: EClassId, term: LayoutTerm, cores: int,
            group: Group) -> Optional[Layout]:
    try:
        return Layout(eg.find(t), eg.find(t2), normalize_layout(term, eg.shape(t2), eg.shape(t)), cores, group)
    except LayoutError as e:
        logger.debug("Layout term {} rejected: {}", term, e)
        return None


def _layout_view(f: Relation) -> Optional[Tuple[EClassId, EClassId, LayoutTerm, int, Group]]:
    if isinstance(f, Layout):
        return f.t, f.t2, f.term, f.cores, f.group
    if isinstance(f, Duplicate) and f.t == f.t2:
        return f.t, f.t2, Identity(), f.cores, f.group
    return None


def _inverse_perm(perm: Sequence[int]) -> Tuple[int, ...]:
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)


def _retarget_last(term: LayoutTerm, shape_in: Sequence[int], extent: int) -> Optional[LayoutTerm]:
    """Re-size the trailing axis of `term` when the term never moves or splits it."""
    axes = fresh_axes(shape_in, Side.DISTRIBUTED)
    prims = term.primitives()
    try:
        trace = push_axes(axes, prims)
    except LayoutError:
        return None
    if any(not step or step[-1] != axes[-1] for step in trace):
        return None
    out = [Reshape(p.shape[:-1] + (extent,)) if isinstance(p, Reshape) else p for p in prims]
    return layout_from_primitives(out)


def _covers(slices: Sequence[Tuple[int, int]], total: int) -> bool:
    pos = 0
    for start, length in sorted(slices):
        if start != pos:
            return False
        pos += length
    return pos == total


def _disjoint(slices: Sequence[Tuple[int, int]], new: Tuple[int, int]) -> bool:
    start, length = new
    return all(start + length <= s or s + n <= start for s, n in slices)


def _slice_of(eg: EGraph, cid: EClassId, base: EClassId, dim: int) -> Optional[Tuple[int, int]]:
    for n in eg.nodes(cid):
        if n.op.name == OpName.SLICE and n.children == (eg.find(base),) and n.op.get("dim") == dim:
            return n.op.get("start"), n.op.get("length")
    return None


def _is_add(n: ENode) -> bool:
    return n.op.name == OpName.ELEM and n.op.get("fn") == "add" and len(n.children) == 2


def _other(n: ENode, cid: EClassId) -> Optional[EClassId]:
    a, b = n.children
    if a == b:
        return None
    return b if a == cid else a


# -------------------------
# Partition family
# -------------------------
def elem_sharded(eg: EGraph, f: Sharded) -> Iterator[Derived]:
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.ELEM, OpName.CONVERT)):
        if _operands_sharded(eg, n, n2, f.dim, f.group):
            yield Sharded(z, z2, f.dim, f.cores, f.group)


def dot_partial(eg: EGraph, f: Sharded) -> Iterator[Derived]:
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.DOT,)):
        (a, b), (a2, b2) = n.children, n2.children
        ra, rb = len(eg.shape(a)), len(eg.shape(b))
        if _sharded(eg, a, a2, ra - 1, f.group) and _sharded(eg, b, b2, rb - 2, f.group):
            yield Partial(z, z2, f.cores, Combiner.ADD, f.group)


def dot_sharded(eg: EGraph, f: Sharded) -> Iterator[Derived]:
    c, g = f.cores, f.group
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.DOT,)):
        (a, b), (a2, b2) = n.children, n2.children
        ra, rb = len(eg.shape(a)), len(eg.shape(b))
        dims_a, dims_b = _shard_dims(eg, a, a2, g), _shard_dims(eg, b, b2, g)
        if b == b2 and ra - 2 in dims_a:
            yield Sharded(z, z2, ra - 2, c, g)
        if a == a2 and rb - 1 in dims_b:
            yield Sharded(z, z2, ra - 1, c, g)
        for d in dims_a:
            if d < ra - 2 and ((rb == 2 and b == b2) or (rb > 2 and d in dims_b)):
                yield Sharded(z, z2, d, c, g)


def maxreduce_partial(eg: EGraph, f: Sharded) -> Iterator[Derived]:
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.MAX_REDUCE,)):
        if n.op.get("dim") == f.dim:
            yield Partial(z, z2, f.cores, Combiner.MAX, f.group)


def sumreduce_partial(eg: EGraph, f: Sharded) -> Iterator[Derived]:
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.SUM_REDUCE,)):
        if n.op.get("dim") == f.dim:
            yield Partial(z, z2, f.cores, Combiner.ADD, f.group)


def reduce_sharded(eg: EGraph, f: Sharded) -> Iterator[Derived]:
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.MAX_REDUCE, OpName.SUM_REDUCE)):
        if n.op.get("dim") != f.dim:
            yield Sharded(z, z2, f.dim, f.cores, f.group)


def transpose_sharded(eg: EGraph, f: Sharded) -> Iterator[Derived]:
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.TRANSPOSE,)):
        perm = tuple(n.op.get("perm"))
        yield Sharded(z, z2, perm.index(f.dim), f.cores, f.group)


def reshape_sharded(eg: EGraph, f: Sharded) -> Iterator[Derived]:
    source = eg.shape(f.t)
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.RESHAPE,), same_op=False):
        s, s2 = eg.shape(z), eg.shape(z2)
        if len(s) != len(s2):
            continue
        differing = [e for e in range(len(s)) if s[e] != s2[e]]
        if len(differing) != 1:
            continue
        e = differing[0]
        if s[e] == f.cores * s2[e] and _prod(source[:f.dim]) == _prod(s[:e]):
            yield Sharded(z, z2, e, f.cores, f.group)


def concat_sharded(eg: EGraph, f: Sharded) -> Iterator[Derived]:
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.CONCAT,)):
        if n.op.get("dim") != f.dim and all(_sharded(eg, a, a2, f.dim, f.group)
                                            for a, a2 in zip(n.children, n2.children)):
            yield Sharded(z, z2, f.dim, f.cores, f.group)


def allgather_duplicate(eg: EGraph, f: Sharded) -> Iterator[Derived]:
    for n, z2 in eg.uses(f.t2, OpName.ALL_GATHER):
        if n.op.get("dim") == f.dim and same_group(n.op.get("group"), f.group, ordered=True):
            yield Duplicate(f.t, z2, f.cores, f.group)


def _prod(dims: Sequence[int]) -> int:
    out = 1
    for d in dims:
        out *= d
    return out


# -------------------------
# Layout family
# -------------------------
def dot_layout(eg: EGraph, f: Layout) -> Iterator[Derived]:
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.DOT,)):
        (a, b), (a2, b2) = n.children, n2.children
        if a != eg.find(f.t) or a2 != eg.find(f.t2) or b != b2 or len(eg.shape(b)) != 2:
            continue
        term = _retarget_last(f.term, eg.shape(a2), eg.shape(z2)[-1])
        if term is not None:
            fact = _layout(eg, z, z2, term, f.cores, f.group)
            if fact is not None:
                yield fact


def layout_transpose(eg: EGraph, f: Relation) -> Iterator[Derived]:
    view = _layout_view(f)
    if view is None:
        return
    t, t2, term, c, g = view
    for n, z in eg.uses(t, OpName.TRANSPOSE):
        if _on(eg, z, Side.BASELINE):
            fact = _layout(eg, z, t2, compose_layout(term, Transpose(tuple(n.op.get("perm")))), c, g)
            if fact is not None:
                yield fact


def layout_transpose_distributed(eg: EGraph, f: Relation) -> Iterator[Derived]:
    if not isinstance(f, Layout):
        return
    for n2, z2 in eg.uses(f.t2, OpName.TRANSPOSE):
        if _on(eg, z2, Side.DISTRIBUTED):
            undo = Transpose(_inverse_perm(n2.op.get("perm")))
            fact = _layout(eg, f.t, z2, compose_layout(undo, f.term), f.cores, f.group)
            if fact is not None:
                yield fact


def layout_reshape(eg: EGraph, f: Relation) -> Iterator[Derived]:
    if not isinstance(f, Layout):
        return
    for n2, z2 in eg.uses(f.t2, OpName.RESHAPE):
        if _on(eg, z2, Side.DISTRIBUTED):
            fact = _layout(eg, f.t, z2, compose_layout(Reshape(eg.shape(f.t2)), f.term), f.cores, f.group)
            if fact is not None:
                yield fact


def layout_reshape_baseline(eg: EGraph, f: Relation) -> Iterator[Derived]:
    view = _layout_view(f)
    if view is None:
        return
    t, t2, term, c, g = view
    for n, z in eg.uses(t, OpName.RESHAPE):
        if _on(eg, z, Side.BASELINE):
            fact = _layout(eg, z, t2, compose_layout(term, Reshape(tuple(n.op.get("shape")))), c, g)
            if fact is not None:
                yield fact


def elem_layout(eg: EGraph, f: Layout) -> Iterator[Derived]:
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.ELEM, OpName.CONVERT)):
        if eg.shape(z) != eg.shape(f.t) or eg.shape(z2) != eg.shape(f.t2):
            continue
        aligned = all(
            (a == a2 and len(eg.shape(a)) == 0)
            or bool(eg.facts.query(RelKind.LAYOUT, t=a, t2=a2, term=f.term, group=f.group))
            for a, a2 in zip(n.children, n2.children)
        )
        if aligned:
            yield Layout(z, z2, f.term, f.cores, f.group)


def _discharge_targets(eg: EGraph, x2: EClassId, op: OpName, combiner: Combiner, group: Group):
    # A scatter hands chunk k to the k-th listed rank, so its group order matters.
    ordered = op == OpName.REDUCE_SCATTER
    targets = []
    for y2, seq_d in _walk(eg, x2, Side.DISTRIBUTED):
        for n, z2 in eg.uses(y2, op):
            if n.op.get("combiner") == combiner.value and same_group(n.op.get("group"), group, ordered=ordered):
                targets.append((n, z2, seq_d))
    return targets


def _aligned(eg: EGraph, f: Partial, targets) -> Iterator[Tuple[EClassId, ENode, EClassId, LayoutTerm, bool]]:
    """Baseline candidates p reached from the partial's baseline side, with the bijection onto each target."""
    shape_b, shape_d = eg.shape(f.t), eg.shape(f.t2)
    for p, seq_b in _walk(eg, f.t, Side.BASELINE):
        for n, z2, seq_d in targets:
            result = infer_bijection(Identity(), seq_b, seq_d, shape_b, shape_d)
            if not result.is_bottom:
                yield p, n, z2, result.term, not result.ops


def allreduce_discharge(combiner: Combiner) -> Matcher:
    def match(eg: EGraph, f: Partial) -> Iterator[Derived]:
        if f.op != combiner:
            return
        targets = _discharge_targets(eg, f.t2, OpName.ALL_REDUCE, combiner, f.group)
        for p, _, z2, term, identity in _aligned(eg, f, targets):
            yield Duplicate(p, z2, f.cores, f.group) if identity else Layout(p, z2, term, f.cores, f.group)
    return match


def reducescatter_mark(eg: EGraph, f: Partial) -> Iterator[Derived]:
    if f.op == Combiner.ADD and _discharge_targets(eg, f.t2, OpName.REDUCE_SCATTER, Combiner.ADD, f.group):
        yield Partial(f.t, f.t2, f.cores, Combiner.ADD_CONCAT, f.group)


def reducescatter_discharge(eg: EGraph, f: Partial) -> Iterator[Derived]:
    if f.op != Combiner.ADD_CONCAT:
        return
    targets = _discharge_targets(eg, f.t2, OpName.REDUCE_SCATTER, Combiner.ADD, f.group)
    for p, n, z2, _, identity in _aligned(eg, f, targets):
        if identity:
            yield Sharded(p, z2, n.op.get("dim"), f.cores, f.group)


def applylayout_duplicate(eg: EGraph, f: Layout) -> Iterator[Derived]:
    if not f.term.primitives():
        yield Duplicate(f.t, f.t2, f.cores, f.group)


# -------------------------
# Slicing and unroll families
# -------------------------
def slice_align(eg: EGraph, f: Sharded) -> Iterator[Derived]:
    extent = eg.shape(f.t2)[f.dim]
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.SLICE,), same_op=False):
        if n.op.get("dim") != f.dim or n2.op.get("dim") != f.dim or n.op.get("length") != n2.op.get("length"):
            continue
        j, k, length = n.op.get("start"), n2.op.get("start"), n.op.get("length")
        ranks = [n2.rank] if n2.rank is not None else range(f.cores)
        for r in ranks:
            if j == r * extent + k:
                yield SliceRel(z, z2, r, f.t, f.dim, j, length)


def slice_offdim(eg: EGraph, f: Sharded) -> Iterator[Derived]:
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.SLICE,)):
        if n.op.get("dim") != f.dim:
            yield Sharded(z, z2, f.dim, f.cores, f.group)


def loopred_b_init(eg: EGraph, f: SliceRel) -> Iterator[Derived]:
    yield LoopRedB(Combiner.ADD, f.dim, f.t, ((f.start, f.length),), f.base)


def loopred_d_init(eg: EGraph, f: SliceRel) -> Iterator[Derived]:
    yield LoopRedD(Combiner.ADD, f.dim, f.t2, ((f.start, f.length),), f.base, f.rank)


def _add_partners(eg: EGraph, cid: EClassId) -> List[EClassId]:
    cid = eg.find(cid)
    return [o for n, _ in eg.uses(cid, OpName.ELEM) if _is_add(n) for o in [_other(n, cid)] if o is not None]


def _grow(slices, new) -> Tuple[Tuple[int, int], ...]:
    return tuple(sorted(set(slices) | {new}))


def loopred_b_step(eg: EGraph, f: Relation) -> Iterator[Derived]:
    if isinstance(f, LoopRedB):
        pairs = [(f, f.t)]
    elif isinstance(f, SliceRel):
        pairs = [(acc, acc.t) for other in _add_partners(eg, f.t)
                 for acc in eg.facts.query(RelKind.LOOP_RED_B, t=other, base=f.base)]
    else:
        return
    for acc, t in pairs:
        for n, z in eg.uses(t, OpName.ELEM):
            other = _other(n, eg.find(t)) if _is_add(n) else None
            if other is None or not _on(eg, z, Side.BASELINE):
                continue
            piece = _slice_of(eg, other, acc.base, acc.dim)
            if piece is not None and _disjoint(acc.slices, piece):
                yield LoopRedB(acc.op, acc.dim, z, _grow(acc.slices, piece), acc.base)


def loopred_d_step(eg: EGraph, f: Relation) -> Iterator[Derived]:
    if isinstance(f, LoopRedD):
        pairs = [(f, f.t2)] if f.rank is not None else []
    elif isinstance(f, SliceRel):
        pairs = [(acc, acc.t2) for other in _add_partners(eg, f.t2)
                 for acc in eg.facts.query(RelKind.LOOP_RED_D, t2=other, base=f.base, rank=f.rank)]
    else:
        return
    for acc, t2 in pairs:
        for n, z2 in eg.uses(t2, OpName.ELEM):
            other = _other(n, eg.find(t2)) if _is_add(n) else None
            if other is None or not _on(eg, z2, Side.DISTRIBUTED):
                continue
            for s in eg.facts.query(RelKind.SLICE, t2=other, base=acc.base, rank=acc.rank, dim=acc.dim):
                piece = (s.start, s.length)
                if _disjoint(acc.slices, piece):
                    yield LoopRedD(acc.op, acc.dim, z2, _grow(acc.slices, piece), acc.base, acc.rank)


def _slicing_groups(eg: EGraph, base: EClassId, dim: int) -> List[Group]:
    """Replica groups that `base` is sharded over along `dim`; its slices live on their ranks."""
    return [s.group for s in eg.facts.query(RelKind.SHARDED, t=eg.find(base), dim=dim)]


def loopred_allreduce(eg: EGraph, f: LoopRedD) -> Iterator[Derived]:
    if f.rank is None:
        return
    for n, z2 in eg.uses(f.t2, OpName.ALL_REDUCE):
        ranks = n.op.get("group")
        on_group = any(same_group(ranks, g) for g in _slicing_groups(eg, f.base, f.dim))
        if n.op.get("combiner") != f.op.value or not on_group:
            continue
        per_rank = []
        for r in range(len(ranks)):
            candidates = eg.facts.query(RelKind.LOOP_RED_D, t2=f.t2, base=f.base, dim=f.dim, op=f.op, rank=r)
            if not candidates:
                break
            per_rank.append(max(candidates, key=lambda acc: (len(acc.slices), acc.slices)).slices)
        else:
            union = tuple(sorted({s for slices in per_rank for s in slices}))
            if len(union) == sum(len(s) for s in per_rank):
                yield LoopRedD(f.op, f.dim, z2, union, f.base, None)


def loopred_duplicate(eg: EGraph, f: Relation) -> Iterator[Derived]:
    if isinstance(f, LoopRedD) and f.rank is None:
        pairs = [(b, f) for b in eg.facts.query(RelKind.LOOP_RED_B, base=f.base, dim=f.dim, op=f.op,
                                                 slices=f.slices)]
    elif isinstance(f, LoopRedB):
        pairs = [(f, d) for d in eg.facts.query(RelKind.LOOP_RED_D, base=f.base, dim=f.dim, op=f.op,
                                                 slices=f.slices, rank=None)]
    else:
        return
    for b, d in pairs:
        if _covers(b.slices, eg.shape(b.base)[b.dim]):
            groups = _slicing_groups(eg, b.base, b.dim)
            group = min(groups, key=lambda g: (len(g), g)) if groups else (0,)
            yield Duplicate(b.t, d.t2, len(group), group)


# -------------------------
# Mixed family
# -------------------------
def partial_add(eg: EGraph, f: Partial) -> Iterator[Derived]:
    if f.op != Combiner.ADD:
        return
    for (n, z), (n2, z2) in _paired_uses(eg, f.t, f.t2, (OpName.ELEM,)):
        if n.op.get("fn") not in ("add", "sub"):
            continue
        if all(eg.facts.query(RelKind.PARTIAL, t=a, t2=a2, group=f.group, op=Combiner.ADD)
               for a, a2 in zip(n.children, n2.children)):
            yield Partial(z, z2, f.cores, Combiner.ADD, f.group)


def sharded_unit(eg: EGraph, f: Sharded) -> Iterator[Derived]:
    if f.cores == 1:
        yield Duplicate(f.t, f.t2, 1, f.group)


# -------------------------
# Catalog
# -------------------------
@dataclass(frozen=True)
class Rule:
    id: str
    family: Family
    premises: Tuple[str, ...]
    head: str
    anchor: str
    triggers: FrozenSet[RelKind]
    match: Matcher = field(compare=False, repr=False)
    flags: FrozenSet[Parallelism] = ALL_FLAGS

    def render(self) -> str:
        return f"{self.head} <- " + ", ".join(self.premises)


@dataclass(frozen=True)
class RuleCatalog:
    rules: Tuple[Rule, ...]
    flags: FrozenSet[Parallelism] = ALL_FLAGS

    def __post_init__(self):
        ids = [r.id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate rule ids in catalog: {sorted(i for i in ids if ids.count(i) > 1)}")

    def __iter__(self) -> Iterator[Rule]:
        return iter(self.rules)

    def __len__(self) -> int:
        return len(self.rules)

    @property
    def ids(self) -> List[str]:
        return [r.id for r in self.rules]

    def get(self, rule_id: str) -> Rule:
        for r in self.rules:
            if r.id == rule_id:
                return r
        raise UnknownRule(rule_id)

    def select(self, ids: Iterable[str]) -> "RuleCatalog":
        wanted = list(dict.fromkeys(ids))
        for rule_id in wanted:
            self.get(rule_id)
        return RuleCatalog(tuple(r for r in self.rules if r.id in wanted), self.flags)


S, D, L, P = RelKind.SHARDED, RelKind.DUPLICATE, RelKind.LAYOUT, RelKind.PARTIAL
SL, LB, LD = RelKind.SLICE, RelKind.LOOP_RED_B, RelKind.LOOP_RED_D
TP_SP = frozenset({Parallelism.TP, Parallelism.SP})
EP = frozenset({Parallelism.EP})

RULES: Tuple[Rule, ...] = (
    Rule("P1-elem-sharded", Family.PARTITION,
         ("sharded(x, x', d, c)", "z = elem_op(x, ...)", "z' = elem_op'(x', ...)",
          "other operands sharded(·, ·, d, c) or shared with extent 1 on d"),
         "sharded(z, z', d, c)", "sharded(elem_op(x), elem_op'(x'), d, c)", frozenset({S}), elem_sharded),
    Rule("P2-dot-partial", Family.PARTITION,
         ("z = dot(x, y)", "z' = dot'(x', y')", "sharded(x, x', rank(x)-1, c)", "sharded(y, y', rank(y)-2, c)"),
         "partial(z, z', c, add)", "z=dot(x,y), z'=dot'(x',y')", frozenset({S}), dot_partial),
    Rule("P2-dot-sharded", Family.PARTITION,
         ("z = dot(x, y)", "z' = dot'(x', y')",
          "row: sharded(x, x', rank(x)-2, c), y = y'", "column: x = x', sharded(y, y', rank(y)-1, c)",
          "batch: sharded(x, x', d, c), y = y' or sharded(y, y', d, c)"),
         "sharded(z, z', d_out, c)", "z=dot(x,y), z'=dot'(x',y')", frozenset({S}), dot_sharded),
    Rule("L3-dot-layout", Family.LAYOUT,
         ("layout(x, x', ℓ, c)", "z = dot(x, w)", "z' = dot'(x', w)", "ℓ keeps the contracted axis trailing"),
         "layout(z, z', ℓ', c)", "ℓ' = bijection_inference(ℓ, x⇝w, x'⇝w')", frozenset({L}), dot_layout),
    Rule("L4-layout-transpose", Family.LAYOUT,
         ("layout(x, x', ℓ, c) or duplicate(x, x', c)", "z = transpose(x, π)"),
         "layout(z, x', ℓ ∘ transpose(π), c)", "ℓ ∘ transpose(π)", frozenset({L, D}), layout_transpose),
    Rule("L4-layout-transpose-distributed", Family.LAYOUT,
         ("layout(x, x', ℓ, c)", "z' = transpose'(x', π)"),
         "layout(x, z', transpose(π⁻¹) ∘ ℓ, c)", "ℓ ∘ transpose(π)", frozenset({L}),
         layout_transpose_distributed),
    Rule("L5-layout-reshape", Family.LAYOUT,
         ("layout(x, x', ℓ, c)", "z' = reshape'(x', s')"),
         "layout(x, z', reshape(x'.shape) ∘ ℓ, c)", "reshape(x'.shape) ∘ ℓ", frozenset({L}), layout_reshape),
    Rule("L5-layout-reshape-baseline", Family.LAYOUT,
         ("layout(x, x', ℓ, c) or duplicate(x, x', c)", "z = reshape(x, s)"),
         "layout(z, x', ℓ ∘ reshape(s), c)", "reshape(x'.shape) ∘ ℓ", frozenset({L, D}),
         layout_reshape_baseline),
    Rule("L6-allreduce-discharge", Family.LAYOUT,
         ("partial(x, x', c, add)", "x ⇝ p through transpose/reshape", "x' ⇝ y' through transpose'/reshape'",
          "z' = all-reduce'(y', c, add)", "ℓ' = bijection_inference(id, x⇝p, x'⇝y')"),
         "layout(p, z', ℓ', c)", "z'=all-reduce'(x', c, add)", frozenset({P}),
         allreduce_discharge(Combiner.ADD)),
    Rule("L6-allreduce-discharge-max", Family.LAYOUT,
         ("partial(x, x', c, max)", "x ⇝ p through transpose/reshape", "x' ⇝ y' through transpose'/reshape'",
          "z' = all-reduce'(y', c, max)", "ℓ' = bijection_inference(id, x⇝p, x'⇝y')"),
         "layout(p, z', ℓ', c)", "z'=all-reduce'(x', c, max)", frozenset({P}),
         allreduce_discharge(Combiner.MAX)),
    Rule("L7-reducescatter-mark", Family.LAYOUT,
         ("partial(x, x', c, add)", "x' ⇝ y'", "z' = reduce-scatter'(y', d, c, add)"),
         "partial(x, x', c, add-concat)", "z' = reduce-scatter'(x', d, c, add)", frozenset({P}),
         reducescatter_mark, TP_SP),
    Rule("L7-reducescatter-discharge", Family.LAYOUT,
         ("partial(x, x', c, add-concat)", "x ⇝ p", "x' ⇝ y'", "z' = reduce-scatter'(y', d, c, add)",
          "bijection_inference(id, x⇝p, x'⇝y') = id"),
         "sharded(p, z', d, c)", "z' = reduce-scatter'(x', d, c, add)", frozenset({P}),
         reducescatter_discharge, TP_SP),
    Rule("P8-allgather-duplicate", Family.PARTITION,
         ("sharded(x, x', d, c)", "z' = all-gather'(x', d, c)"),
         "duplicate(x, z', c)", "duplicate(x, x', c) ← sharded(...), all-gather'", frozenset({S}),
         allgather_duplicate, TP_SP),
    Rule("L9-applylayout-duplicate", Family.LAYOUT,
         ("layout(x, z', ℓ, c)", "ℓ reduces to the identity"),
         "duplicate(x, z', c)", "z'=apply_layout'(x', ℓ)", frozenset({L}), applylayout_duplicate),
    Rule("P10-maxreduce-partial", Family.PARTITION,
         ("sharded(x, x', d, c)", "z = max_reduce(x, d)", "z' = max_reduce'(x', d)"),
         "partial(z, z', c, max)", "z=max_reduce(x, d)", frozenset({S}), maxreduce_partial),
    Rule("P10-sumreduce-partial", Family.PARTITION,
         ("sharded(x, x', d, c)", "z = sum_reduce(x, d)", "z' = sum_reduce'(x', d)"),
         "partial(z, z', c, add)", "z=sum_reduce(x, d)", frozenset({S}), sumreduce_partial),
    Rule("P-reduce-sharded", Family.PARTITION,
         ("sharded(x, x', d, c)", "z = reduce(x, e)", "z' = reduce'(x', e)", "e ≠ d"),
         "sharded(z, z', d, c)", "sharded(elem_op(x), elem_op'(x'), d, c)", frozenset({S}), reduce_sharded),
    Rule("P-transpose-sharded", Family.PARTITION,
         ("sharded(x, x', d, c)", "z = transpose(x, π)", "z' = transpose'(x', π)"),
         "sharded(z, z', π⁻¹(d), c)", "sharded(elem_op(x), elem_op'(x'), d, c)", frozenset({S}),
         transpose_sharded),
    Rule("P-reshape-sharded", Family.PARTITION,
         ("sharded(x, x', d, c)", "z = reshape(x, s)", "z' = reshape'(x', s')",
          "s and s' differ only at e with s[e] = c·s'[e]", "prod(x.shape[:d]) = prod(s[:e])"),
         "sharded(z, z', e, c)", "sharded(elem_op(x), elem_op'(x'), d, c)", frozenset({S}), reshape_sharded),
    Rule("P-concat-sharded", Family.PARTITION,
         ("sharded(x_i, x_i', d, c) for every operand", "z = concat(x_1..x_n, e)", "e ≠ d"),
         "sharded(z, z', d, c)", "sharded(elem_op(x), elem_op'(x'), d, c)", frozenset({S}), concat_sharded),
    Rule("S11-slice-align", Family.SLICING,
         ("sharded(x, x', d, c)", "z = slice(x, d, j, l)", "z' = slice'(x', d, k, l)", "j = r·x'.shape[d] + k"),
         "slice(z, z', r, x, d, j, l)", "k = rl", frozenset({S}), slice_align),
    Rule("S11-slice-offdim", Family.SLICING,
         ("sharded(x, x', d, c)", "z = slice(x, e, j, l)", "z' = slice'(x', e, j, l)", "e ≠ d"),
         "sharded(z, z', d, c)", "k = rl", frozenset({S}), slice_offdim),
    Rule("U12-loopred-B-init", Family.UNROLL,
         ("slice(z, z', r, b, d, j, l)",),
         "loop_red_B(add, d, z, {j+l}, b)", "loop_red_B(add, d, x, ∅, b)", frozenset({SL}), loopred_b_init, EP),
    Rule("U13-loopred-D-init", Family.UNROLL,
         ("slice(z, z', r, b, d, j, l)",),
         "loop_red_D(add, d, z', {j+l}, b, r)", "loop_red_D(add, d, x', ∅, b, r)",
         frozenset({SL}), loopred_d_init, EP),
    Rule("U14-loopred-B-step", Family.UNROLL,
         ("loop_red_B(add, d, x, xs, b)", "s = slice(b, d, j, l)", "z = add(x, s)", "j+l disjoint from xs"),
         "loop_red_B(add, d, z, xs ∪ {j+l}, b)", "loop_red_B(add, d, x, ∅, b)", frozenset({LB, SL}),
         loopred_b_step, EP),
    Rule("U15-loopred-D-step", Family.UNROLL,
         ("loop_red_D(add, d, x', xs, b, r)", "slice(s, s', r, b, d, j, l)", "z' = add'(x', s')",
          "j+l disjoint from xs"),
         "loop_red_D(add, d, z', xs ∪ {j+l}, b, r)", "loop_red_D(add, d, x', ∅, b, r)", frozenset({LD, SL}),
         loopred_d_step, EP),
    Rule("U16-loopred-allreduce", Family.UNROLL,
         ("∀r. loop_red_D(add, d, x', xs_r, b, r)", "z' = all-reduce'(x', c, add)", "xs_r pairwise disjoint"),
         "loop_red_D(add, d, z', ∪ xs_r, b, all)", "∀r. loop_red_D(add, d, x', xs_r, b, r)", frozenset({LD}),
         loopred_allreduce, EP),
    Rule("U17-loopred-duplicate", Family.UNROLL,
         ("loop_red_B(add, d, z, xs, b)", "loop_red_D(add, d, z', xs, b, all)", "cat(xs, dim=d) = b"),
         "duplicate(z, z', c)", "b = cat((xs_1,…,xs_n), dim=d)", frozenset({LB, LD}), loopred_duplicate, EP),
    Rule("M-partial-add", Family.MIXED,
         ("partial(x, x', c, add)", "partial(y, y', c, add)", "z = add(x, y)", "z' = add'(x', y')"),
         "partial(z, z', c, add)", "many rules are polymorphic over operator types", frozenset({P}), partial_add),
    Rule("M-sharded-unit", Family.MIXED,
         ("sharded(x, x', d, 1)",),
         "duplicate(x, x', 1)", "duplicate(x, x', c) ← sharded(...), all-gather'", frozenset({S}), sharded_unit),
    Rule("M-elem-layout", Family.MIXED,
         ("layout(x_i, x_i', ℓ, c) for every operand", "z = elem_op(x_1..x_n)", "z' = elem_op'(x_1'..x_n')"),
         "layout(z, z', ℓ, c)", "sharded(elem_op(x), elem_op'(x'), d, c)", frozenset({L}), elem_layout),
)


def default_catalog(flags: Iterable[str] = tuple(ALL_FLAGS)) -> RuleCatalog:
    """
    Build the rule catalog for the requested parallelism flags.

    Args:
        flags (Iterable[str]): Any of "tp", "sp", "ep".

    Returns:
        RuleCatalog: Rules enabled by at least one flag, in catalog order.
    """
    enabled = frozenset(Parallelism(f) for f in flags)
    return RuleCatalog(tuple(r for r in RULES if r.flags & enabled), enabled)


def load_catalog(path: Path, flags: Iterable[str] = tuple(ALL_FLAGS)) -> RuleCatalog:
    """Catalog restricted to the rule ids listed in `path`, one per line; `#` starts a comment."""
    ids = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            ids.append(line)
    catalog = default_catalog(flags).select(ids)
    logger.info("Loaded {} rules from {}", len(catalog), path)
    return catalog


def explain_rule(rule_id: str, catalog: Optional[RuleCatalog] = None) -> str:
    rule = (catalog or RuleCatalog(RULES)).get(rule_id)
    flags = ",".join(sorted(f.value for f in rule.flags))
    return (f"{rule.id} [{rule.family.value}] ({flags})\n"
            f"  {rule.render()}\n"
            f"  anchor: \"{rule.anchor}\"")


def firing_summary(firings: Dict[str, int]) -> Dict[str, int]:
    return {rule_id: firings[rule_id] for rule_id in sorted(firings)}
