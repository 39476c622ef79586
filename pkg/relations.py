"""
Relational language of the verifier: layout terms, symbolic axes and the
seven relation kinds linking baseline and distributed e-classes.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from math import prod
from typing import Callable, ClassVar, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

Shape = Tuple[int, ...]


class LayoutError(ValueError):
    pass


class LayoutShapeMismatch(LayoutError):
    pass


class Unsupported(LayoutError):
    pass


class NonGroupingReshape(Unsupported):
    def __init__(self, index: int, message: str):
        super().__init__(f"step {index}: {message}")
        self.index = index


# -------------------------
# Layout terms
# -------------------------
class LayoutTerm:
    def primitives(self) -> Tuple["LayoutTerm", ...]:
        raise NotImplementedError

    def __str__(self) -> str:
        return render_layout(self)


@dataclass(frozen=True, slots=True)
class Identity(LayoutTerm):
    def primitives(self):
        return ()


@dataclass(frozen=True, slots=True)
class Transpose(LayoutTerm):
    perm: Tuple[int, ...]

    def primitives(self):
        return (self,)


@dataclass(frozen=True, slots=True)
class Reshape(LayoutTerm):
    shape: Shape

    def primitives(self):
        return (self,)


@dataclass(frozen=True, slots=True)
class Compose(LayoutTerm):
    """`first` is applied before `second`."""
    first: LayoutTerm
    second: LayoutTerm

    def primitives(self):
        return self.first.primitives() + self.second.primitives()


@dataclass(frozen=True, slots=True)
class Bijection(LayoutTerm):
    """Shorthand for reshape(s1), then transpose(perm), then reshape(s2)."""
    s1: Shape
    perm: Tuple[int, ...]
    s2: Shape

    def primitives(self):
        return (Reshape(self.s1), Transpose(self.perm), Reshape(self.s2))


def _render_primitive(p: LayoutTerm) -> str:
    if isinstance(p, Transpose):
        return "transpose(" + ",".join(str(i) for i in p.perm) + ")"
    return "reshape(" + ",".join(str(d) for d in p.shape) + ")"


def render_layout(term: LayoutTerm) -> str:
    return "[" + ", ".join(_render_primitive(p) for p in term.primitives()) + "]"


def layout_from_primitives(prims: Sequence[LayoutTerm]) -> LayoutTerm:
    prims = tuple(prims)
    if not prims:
        return Identity()
    if len(prims) == 1:
        return prims[0]
    if len(prims) == 3 and isinstance(prims[0], Reshape) and isinstance(prims[1], Transpose) \
            and isinstance(prims[2], Reshape):
        return Bijection(prims[0].shape, prims[1].perm, prims[2].shape)
    term = prims[0]
    for p in prims[1:]:
        term = Compose(term, p)
    return term


def _fuse(prims: Sequence[LayoutTerm]) -> List[LayoutTerm]:
    out: List[LayoutTerm] = []
    for p in prims:
        if isinstance(p, Transpose) and out and isinstance(out[-1], Transpose):
            prev = out.pop()
            if len(prev.perm) != len(p.perm):
                raise LayoutShapeMismatch(f"transpose ranks {len(prev.perm)} and {len(p.perm)} do not compose")
            p = Transpose(tuple(prev.perm[j] for j in p.perm))
        elif isinstance(p, Reshape) and out and isinstance(out[-1], Reshape):
            out.pop()
        elif isinstance(p, Transpose) and out and isinstance(out[-1], Reshape) \
                and len(out[-1].shape) != len(p.perm):
            raise LayoutShapeMismatch(f"transpose of rank {len(p.perm)} after reshape to {list(out[-1].shape)}")
        if isinstance(p, Transpose) and p.perm == tuple(range(len(p.perm))):
            continue
        out.append(p)
    return out


def compose_layout(first: LayoutTerm, second: LayoutTerm) -> LayoutTerm:
    """
    Compose two layout terms in application order and canonicalize the result.

    Adjacent transposes fuse into one permutation, adjacent reshapes keep the
    outer target and identity permutations disappear.
    """
    return layout_from_primitives(_fuse(first.primitives() + second.primitives()))


def layout_shapes(term: LayoutTerm, shape_in: Sequence[int]) -> List[Shape]:
    """Shapes after each primitive of `term`, starting from `shape_in`."""
    shape = tuple(shape_in)
    shapes = []
    for p in term.primitives():
        if isinstance(p, Transpose):
            if sorted(p.perm) != list(range(len(shape))):
                raise LayoutShapeMismatch(f"transpose{p.perm} does not fit shape {list(shape)}")
            shape = tuple(shape[i] for i in p.perm)
        else:
            if prod(p.shape) != prod(shape):
                raise LayoutShapeMismatch(f"reshape {list(shape)} -> {list(p.shape)} changes element count")
            shape = tuple(p.shape)
        shapes.append(shape)
    return shapes


def output_shape(term: LayoutTerm, shape_in: Sequence[int]) -> Shape:
    shapes = layout_shapes(term, shape_in)
    return shapes[-1] if shapes else tuple(shape_in)


def canonicalize(term: LayoutTerm, shape_in: Sequence[int]) -> LayoutTerm:
    """Fuse primitives and drop reshapes that leave the shape unchanged."""
    shape = tuple(shape_in)
    kept: List[LayoutTerm] = []
    for p, after in zip(term.primitives(), layout_shapes(term, shape_in)):
        if isinstance(p, Reshape) and after == shape:
            continue
        kept.append(p)
        shape = after
    fused = _fuse(kept)
    if fused != kept:
        return canonicalize(layout_from_primitives(fused), shape_in)
    return layout_from_primitives(fused)


def invert_layout(term: LayoutTerm, shape_in: Sequence[int]) -> LayoutTerm:
    shapes = [tuple(shape_in)] + layout_shapes(term, shape_in)
    inverse: List[LayoutTerm] = []
    for k in range(len(shapes) - 1, 0, -1):
        p = term.primitives()[k - 1]
        if isinstance(p, Transpose):
            inverse.append(Transpose(tuple(int(i) for i in np.argsort(p.perm))))
        else:
            inverse.append(Reshape(shapes[k - 1]))
    return layout_from_primitives(inverse)


def apply_layout_array(term: LayoutTerm, array: np.ndarray) -> np.ndarray:
    for p in term.primitives():
        if isinstance(p, Transpose):
            if sorted(p.perm) != list(range(array.ndim)):
                raise LayoutShapeMismatch(f"transpose{p.perm} does not fit shape {list(array.shape)}")
            array = np.transpose(array, p.perm)
        else:
            if prod(p.shape) != array.size:
                raise LayoutShapeMismatch(f"reshape {list(array.shape)} -> {list(p.shape)} changes element count")
            array = array.reshape(p.shape)
    return array


def apply_layout_to_indices(term: LayoutTerm, shape_in: Sequence[int]) -> List[int]:
    """Element-level permutation of the flattened index space denoted by `term`."""
    return apply_layout_array(term, np.arange(prod(shape_in)).reshape(tuple(shape_in))).reshape(-1).tolist()


# -------------------------
# Symbolic axes
# -------------------------
class Side(str, Enum):
    BASELINE = "baseline"
    DISTRIBUTED = "distributed"


@dataclass(frozen=True, slots=True)
class SymAxis:
    """
    A symbolic axis, or a row-major factor of one.

    A factor covers the digits of its root axis with place value `stride`
    and `extent` distinct values; a whole axis has stride 1 and extent equal
    to `root_extent`.
    """
    name: str
    side: Side
    extent: int
    stride: int = 1
    root_extent: int = 0

    @classmethod
    def fresh(cls, name: str, side: Side, extent: int) -> "SymAxis":
        return cls(name, side, extent, 1, extent)

    @property
    def whole(self) -> bool:
        return self.stride == 1 and self.extent == self.root_extent

    def factor(self, stride: int, extent: int) -> "SymAxis":
        return SymAxis(self.name, self.side, extent, stride, self.root_extent)

    def __str__(self) -> str:
        if self.whole:
            return self.name
        return f"{self.name}[{self.stride}:{self.extent}]"


@dataclass(frozen=True, slots=True)
class Merge:
    left: "AxisExp"
    right: "AxisExp"

    def __str__(self) -> str:
        return f"⊗({self.left}, {self.right})"


AxisExp = Union[SymAxis, Merge]

UNIT = SymAxis("1", Side.BASELINE, 1, 1, 1)


def atoms(exp: AxisExp) -> Tuple[SymAxis, ...]:
    if isinstance(exp, Merge):
        return atoms(exp.left) + atoms(exp.right)
    return (exp,)


def extent(exp: AxisExp) -> int:
    return prod(a.extent for a in atoms(exp))


def merge_all(parts: Sequence[SymAxis]) -> AxisExp:
    """Left-associated canonical merge; adjacent factors of one root fold back together."""
    folded: List[SymAxis] = []
    for a in parts:
        if a.extent == 1:
            continue
        prev = folded[-1] if folded else None
        if prev is not None and prev.name == a.name and prev.side == a.side \
                and prev.stride == a.stride * a.extent:
            folded[-1] = SymAxis(a.name, a.side, prev.extent * a.extent, a.stride, a.root_extent)
        else:
            folded.append(a)
    if not folded:
        return parts[0] if parts else UNIT
    exp: AxisExp = folded[0]
    for a in folded[1:]:
        exp = Merge(exp, a)
    return exp


def render_axes(axes: Sequence[AxisExp]) -> str:
    return "(" + ", ".join(str(a) for a in axes) + ")"


_LETTERS = "ijklmnopqrstuvwxyzabcdefgh"


def fresh_axes(shape: Sequence[int], side: Side) -> List[SymAxis]:
    mark = "'" if side == Side.DISTRIBUTED else ""
    names = [(_LETTERS[k] if k < len(_LETTERS) else f"a{k}") + mark for k in range(len(shape))]
    return [SymAxis.fresh(n, side, d) for n, d in zip(names, shape)]


def _segments(src: Sequence[int], tgt: Sequence[int], index: int) -> List[Tuple[int, int, int, int]]:
    segs = []
    i = j = 0
    while i < len(src) or j < len(tgt):
        if i >= len(src) or j >= len(tgt):
            raise LayoutShapeMismatch(f"step {index}: reshape {list(src)} -> {list(tgt)} changes element count")
        i0, j0 = i, j
        ps, pt = src[i], tgt[j]
        i, j = i + 1, j + 1
        while ps != pt:
            if ps < pt and i < len(src):
                ps *= src[i]
                i += 1
            elif pt < ps and j < len(tgt):
                pt *= tgt[j]
                j += 1
            else:
                raise LayoutShapeMismatch(f"step {index}: reshape {list(src)} -> {list(tgt)} changes element count")
        if i - i0 > 1 and j - j0 > 1:
            raise NonGroupingReshape(index, f"reshape {list(src)} -> {list(tgt)} regroups axes "
                                            f"{list(src[i0:i])} into {list(tgt[j0:j])}")
        segs.append((i0, i, j0, j))
    return segs


def _rechunk(parts: Sequence[SymAxis], targets: Sequence[int], index: int) -> List[AxisExp]:
    queue = deque(a for a in parts if a.extent > 1)
    out: List[AxisExp] = []
    for t in targets:
        group: List[SymAxis] = []
        need = t
        while need > 1:
            a = queue.popleft()
            if a.extent <= need:
                if need % a.extent:
                    raise NonGroupingReshape(index, f"extent {a.extent} does not divide {need}")
                group.append(a)
                need //= a.extent
            else:
                if a.extent % need:
                    raise NonGroupingReshape(index, f"extent {need} does not divide {a.extent}")
                inner = a.extent // need
                group.append(a.factor(a.stride * inner, need))
                queue.appendleft(a.factor(a.stride, inner))
                need = 1
        out.append(merge_all(group))
    return out


def _reshape_axes(axes: Sequence[AxisExp], target: Sequence[int], index: int) -> List[AxisExp]:
    live = [a for a in axes if extent(a) > 1]
    src = [extent(a) for a in live]
    tgt = [d for d in target if d > 1]
    if prod(src) != prod(tgt):
        raise LayoutShapeMismatch(f"step {index}: reshape to {list(target)} changes element count")
    chunks: List[AxisExp] = []
    for i0, i1, j0, j1 in _segments(src, tgt, index):
        parts = [p for a in live[i0:i1] for p in atoms(a)]
        chunks.extend(_rechunk(parts, tgt[j0:j1], index))
    it = iter(chunks)
    return [next(it) if d > 1 else UNIT for d in target]


def push_axes(axes: Sequence[AxisExp], prims: Sequence[LayoutTerm]) -> List[List[AxisExp]]:
    """
    Push symbolic axes through layout primitives.

    Returns:
        list: The axes after each primitive, in order.
    """
    current = list(axes)
    trace = []
    for index, p in enumerate(prims):
        if isinstance(p, Transpose):
            if sorted(p.perm) != list(range(len(current))):
                raise LayoutShapeMismatch(f"step {index}: transpose{p.perm} on rank {len(current)}")
            current = [current[i] for i in p.perm]
        elif isinstance(p, Reshape):
            current = _reshape_axes(current, p.shape, index)
        else:
            raise Unsupported(f"step {index}: {p!r} is not a layout primitive")
        trace.append(current)
    return trace


@dataclass(frozen=True)
class AxisMap:
    """Baseline axis expressions paired with distributed ones."""
    pairs: Tuple[Tuple[AxisExp, AxisExp], ...] = ()

    def __post_init__(self):
        for b, d in self.pairs:
            if extent(b) != extent(d):
                raise LayoutShapeMismatch(f"axis pair {b} <-> {d} has extents {extent(b)} != {extent(d)}")
        for k in (0, 1):
            side = [p[k] for p in self.pairs]
            if len(set(side)) != len(side):
                raise LayoutError("an axis expression appears in two pairs")

    def __len__(self) -> int:
        return len(self.pairs)

    def as_dict(self) -> Dict[AxisExp, AxisExp]:
        return dict(self.pairs)

    def __str__(self) -> str:
        return "{" + ", ".join(f"{b}↔{d}" for b, d in self.pairs) + "}"


def extract_axis_map(term: LayoutTerm, shape_b: Sequence[int], shape_d: Sequence[int]) -> AxisMap:
    """
    Derive the axis correspondence between two shapes related by `term`.

    `term` maps the distributed index space onto the baseline one.
    """
    b_axes = fresh_axes(shape_b, Side.BASELINE)
    d_axes = fresh_axes(shape_d, Side.DISTRIBUTED)
    trace = push_axes(d_axes, term.primitives())
    pushed = trace[-1] if trace else list(d_axes)
    if [extent(a) for a in pushed] != list(shape_b):
        raise LayoutShapeMismatch(f"layout {term} maps {list(shape_d)} to "
                                  f"{[extent(a) for a in pushed]}, not {list(shape_b)}")
    pairs: List[Tuple[AxisExp, AxisExp]] = []
    k = 0
    while k < len(pushed):
        parts = atoms(pushed[k])
        if all(a.whole for a in parts):
            if pushed[k] != UNIT:
                pairs.append((b_axes[k], pushed[k]))
            k += 1
            continue
        if len(parts) != 1:
            raise Unsupported(f"axis {pushed[k]} mixes a partial axis with others")
        root = parts[0]
        group = [root]
        end = k + 1
        while prod(a.extent for a in group) < root.root_extent and end < len(pushed):
            nxt = atoms(pushed[end])
            if len(nxt) != 1 or nxt[0].name != root.name:
                break
            group.append(nxt[0])
            end += 1
        rebuilt = merge_all(group)
        if not isinstance(rebuilt, SymAxis) or not rebuilt.whole:
            raise Unsupported(f"axis {root.name} is split and reordered by {term}")
        pairs.append((merge_all(b_axes[k:end]), rebuilt))
        k = end
    return AxisMap(tuple(pairs))


# -------------------------
# Relations
# -------------------------
class RelKind(str, Enum):
    SHARDED = "sharded"
    DUPLICATE = "duplicate"
    LAYOUT = "layout"
    PARTIAL = "partial"
    SLICE = "slice"
    LOOP_RED_B = "loop_red_B"
    LOOP_RED_D = "loop_red_D"


class Combiner(str, Enum):
    ADD = "add"
    MAX = "max"
    ADD_CONCAT = "add-concat"


Slices = Tuple[Tuple[int, int], ...]
Group = Tuple[int, ...]


def _render_slices(slices: Slices) -> str:
    return "{" + ",".join(f"{s}+{n}" for s, n in slices) + "}"


def _render_cores(cores: int, group: Group) -> str:
    if group == tuple(range(cores)):
        return f"c={cores}"
    return f"c={cores}@" + ",".join(str(r) for r in group)


def same_group(ranks: Sequence[int], group: Group, ordered: bool = False) -> bool:
    """Whether a collective's ranks are exactly `group`; unordered collectives ignore rank order."""
    if ordered:
        return tuple(ranks) == tuple(group)
    return sorted(ranks) == sorted(group)


class Relation:
    kind: ClassVar[RelKind]
    ID_FIELDS: ClassVar[Tuple[str, ...]]

    def classes(self) -> Tuple[int, ...]:
        return tuple(getattr(self, f) for f in self.ID_FIELDS)

    def remap(self, find: Callable[[int], int]) -> "Relation":
        return replace(self, **{f: find(getattr(self, f)) for f in self.ID_FIELDS})

    def sort_key(self) -> Tuple:
        return (self.kind.value, str(self))


class _OnGroup:
    """Facts holding across the ranks of one replica group; `group` defaults to ranks 0..cores-1."""

    def __post_init__(self):
        if not self.group:
            object.__setattr__(self, "group", tuple(range(self.cores)))
        elif len(self.group) != self.cores:
            raise ValueError(f"group {list(self.group)} does not have {self.cores} ranks")
        else:
            object.__setattr__(self, "group", tuple(self.group))


@dataclass(frozen=True, slots=True)
class Sharded(_OnGroup, Relation):
    kind: ClassVar[RelKind] = RelKind.SHARDED
    ID_FIELDS: ClassVar[Tuple[str, ...]] = ("t", "t2")
    t: int
    t2: int
    dim: int
    cores: int
    group: Group = ()

    def __str__(self):
        return f"sharded(e{self.t}, e{self.t2}, d={self.dim}, {_render_cores(self.cores, self.group)})"


@dataclass(frozen=True, slots=True)
class Duplicate(_OnGroup, Relation):
    kind: ClassVar[RelKind] = RelKind.DUPLICATE
    ID_FIELDS: ClassVar[Tuple[str, ...]] = ("t", "t2")
    t: int
    t2: int
    cores: int
    group: Group = ()

    def __str__(self):
        return f"duplicate(e{self.t}, e{self.t2}, {_render_cores(self.cores, self.group)})"


@dataclass(frozen=True, slots=True)
class Layout(_OnGroup, Relation):
    kind: ClassVar[RelKind] = RelKind.LAYOUT
    ID_FIELDS: ClassVar[Tuple[str, ...]] = ("t", "t2")
    t: int
    t2: int
    term: LayoutTerm
    cores: int
    group: Group = ()

    def __str__(self):
        return (f"layout(e{self.t}, e{self.t2}, {render_layout(self.term)}, "
                f"{_render_cores(self.cores, self.group)})")


@dataclass(frozen=True, slots=True)
class Partial(_OnGroup, Relation):
    kind: ClassVar[RelKind] = RelKind.PARTIAL
    ID_FIELDS: ClassVar[Tuple[str, ...]] = ("t", "t2")
    t: int
    t2: int
    cores: int
    op: Combiner
    group: Group = ()

    def __str__(self):
        return f"partial(e{self.t}, e{self.t2}, {_render_cores(self.cores, self.group)}, {self.op.value})"


@dataclass(frozen=True, slots=True)
class SliceRel(Relation):
    kind: ClassVar[RelKind] = RelKind.SLICE
    ID_FIELDS: ClassVar[Tuple[str, ...]] = ("t", "t2", "base")
    t: int
    t2: int
    rank: int
    base: int
    dim: int
    start: int
    length: int

    def __str__(self):
        return (f"slice(e{self.t}, e{self.t2}, r={self.rank}, e{self.base}, d={self.dim}, "
                f"x={self.start}, l={self.length})")


@dataclass(frozen=True, slots=True)
class LoopRedB(Relation):
    kind: ClassVar[RelKind] = RelKind.LOOP_RED_B
    ID_FIELDS: ClassVar[Tuple[str, ...]] = ("t", "base")
    op: Combiner
    dim: int
    t: int
    slices: Slices
    base: int

    def __str__(self):
        return f"loop_red_B({self.op.value}, d={self.dim}, e{self.t}, {_render_slices(self.slices)}, e{self.base})"


@dataclass(frozen=True, slots=True)
class LoopRedD(Relation):
    """`rank` is None once the per-rank partials have been all-reduced."""
    kind: ClassVar[RelKind] = RelKind.LOOP_RED_D
    ID_FIELDS: ClassVar[Tuple[str, ...]] = ("t2", "base")
    op: Combiner
    dim: int
    t2: int
    slices: Slices
    base: int
    rank: Optional[int]

    def __str__(self):
        where = "all" if self.rank is None else self.rank
        return (f"loop_red_D({self.op.value}, d={self.dim}, e{self.t2}, {_render_slices(self.slices)}, "
                f"e{self.base}, r={where})")


def check_relation(fact: Relation, shape_of: Callable[[int], Shape]) -> Optional[str]:
    """Return a reason when `fact` violates its shape invariant, else None."""
    if isinstance(fact, Sharded):
        s, s2 = shape_of(fact.t), shape_of(fact.t2)
        if len(s) != len(s2) or not 0 <= fact.dim < len(s) or s[fact.dim] != fact.cores * s2[fact.dim]:
            return f"{fact}: extents {list(s)} vs {list(s2)}"
    elif isinstance(fact, Duplicate):
        if shape_of(fact.t) != shape_of(fact.t2):
            return f"{fact}: shapes {list(shape_of(fact.t))} vs {list(shape_of(fact.t2))}"
    elif isinstance(fact, Layout):
        try:
            if output_shape(fact.term, shape_of(fact.t2)) != shape_of(fact.t):
                return f"{fact}: term does not reach {list(shape_of(fact.t))}"
        except LayoutError as e:
            return f"{fact}: {e}"
    elif isinstance(fact, SliceRel):
        if fact.start + fact.length > shape_of(fact.base)[fact.dim]:
            return f"{fact}: slice exceeds base extent"
    return None
