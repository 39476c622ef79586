"""
Bijection inference between two reshape/transpose paths.

Given a layout relation between the inputs of a baseline path and a
distributed path, find the reshape-transpose-reshape sequence that maps the
distributed terminal tensor onto the baseline terminal tensor, or report
that none exists.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from math import prod
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from relations import (
    AxisExp, AxisMap, LayoutError, LayoutTerm, Merge, Reshape, Side, SymAxis, Transpose, UNIT,
    apply_layout_array, atoms, canonicalize, extent, extract_axis_map, fresh_axes, invert_layout,
    layout_from_primitives, merge_all, push_axes, render_axes,
)

Shape = Tuple[int, ...]
SURROGATE_PRIMES = (2, 3, 5, 7, 11, 13)
MAX_SURROGATE_ELEMENTS = 1 << 21


@dataclass(frozen=True)
class SymLayoutExpr:
    axes: Tuple[AxisExp, ...]

    @property
    def shape(self) -> Shape:
        return tuple(extent(a) for a in self.axes)

    @property
    def rank(self) -> int:
        return len(self.axes)

    def __str__(self) -> str:
        return render_axes(self.axes)


@dataclass(frozen=True)
class BijectionResult:
    """`ops` is None for the failure value."""
    ops: Optional[Tuple[LayoutTerm, ...]]
    axis_map: AxisMap = field(default_factory=AxisMap)

    @property
    def is_bottom(self) -> bool:
        return self.ops is None

    @property
    def term(self) -> LayoutTerm:
        if self.ops is None:
            raise LayoutError("no bijection exists")
        return layout_from_primitives(self.ops)

    def __str__(self) -> str:
        return "⊥" if self.ops is None else str(self.term)


BOTTOM = BijectionResult(None)


def _flatten(seq: Iterable[LayoutTerm]) -> Tuple[LayoutTerm, ...]:
    return tuple(p for term in seq for p in term.primitives())


def gen_exp(start_axes: Sequence[AxisExp], seq: Sequence[LayoutTerm]) -> SymLayoutExpr:
    trace = push_axes(start_axes, _flatten(seq))
    return SymLayoutExpr(tuple(trace[-1] if trace else start_axes))


# -------------------------
# Substitution under an axis map
# -------------------------
def _digit_range(parts: Sequence[SymAxis], lo: int, hi: int) -> List[SymAxis]:
    """Atoms of a merged expression covering place values [lo, hi), outermost first."""
    pieces: List[SymAxis] = []
    place = 1
    for a in reversed(parts):
        top = place * a.extent
        sub_lo, sub_hi = max(lo, place), min(hi, top)
        if sub_lo < sub_hi:
            if sub_lo % place or sub_hi % sub_lo or top % sub_hi:
                raise LayoutError(f"place values [{lo}, {hi}) cut through axis {a}")
            pieces.append(a.factor(a.stride * (sub_lo // place), sub_hi // sub_lo))
        place = top
    return list(reversed(pieces))


def _substitution_table(axis_map: AxisMap) -> Dict[str, List[SymAxis]]:
    table: Dict[str, List[SymAxis]] = {}
    for b, d in axis_map.pairs:
        b_parts = [a for a in atoms(b) if a.extent > 1]
        d_parts = atoms(d)
        place = 1
        for dp in reversed(d_parts):
            table[dp.name] = _digit_range(b_parts, place, place * dp.extent) if dp.extent > 1 else []
            place *= dp.extent
    return table


def substitute(expr: SymLayoutExpr, axis_map: AxisMap) -> SymLayoutExpr:
    """Rewrite distributed-side atoms into the baseline axes they correspond to."""
    table = _substitution_table(axis_map)

    def sub_atom(a: SymAxis) -> List[SymAxis]:
        if a.side != Side.DISTRIBUTED or a.name not in table:
            return [a]
        return _digit_range(table[a.name], a.stride, a.stride * a.extent)

    axes = []
    for exp in expr.axes:
        parts = [p for a in atoms(exp) for p in sub_atom(a)]
        axes.append(merge_all(parts) if parts else UNIT)
    return SymLayoutExpr(tuple(axes))


# -------------------------
# Rank normalization and permutation
# -------------------------
def _key(a: SymAxis) -> Tuple[str, str]:
    return a.name, a.side.value


def _cuts(groups: Iterable[Iterable[SymAxis]]) -> Optional[Dict[Tuple[str, str], List[int]]]:
    cuts: Dict[Tuple[str, str], set] = {}
    for group in groups:
        for a in group:
            if a.extent > 1:
                cuts.setdefault(_key(a), set()).update((a.stride, a.stride * a.extent))
    chains = {}
    for key, points in cuts.items():
        ordered = sorted(points)
        if any(hi % lo for lo, hi in zip(ordered, ordered[1:])):
            return None
        chains[key] = ordered
    return chains


def _refine(a: SymAxis, chains: Dict[Tuple[str, str], List[int]]) -> List[SymAxis]:
    if a.extent == 1:
        return []
    inside = [c for c in chains[_key(a)] if a.stride <= c <= a.stride * a.extent]
    return [a.factor(lo, hi // lo) for lo, hi in reversed(list(zip(inside, inside[1:])))]


def normalize_rank(e_b: SymLayoutExpr, e_d: SymLayoutExpr,
                   axis_map: Optional[AxisMap] = None) -> Tuple[SymLayoutExpr, SymLayoutExpr, bool]:
    """
    Split both sides down to their common finest factorization.

    Returns:
        tuple: (normalized baseline, normalized distributed, impossible)
    """
    if axis_map is not None:
        e_d = substitute(e_d, axis_map)
    leaves_b = [a for exp in e_b.axes for a in atoms(exp)]
    leaves_d = [a for exp in e_d.axes for a in atoms(exp)]
    chains = _cuts([leaves_b, leaves_d])
    if chains is None:
        logger.debug("Incompatible factorizations: {} vs {}", e_b, e_d)
        return e_b, e_d, True
    hat_b = tuple(p for a in leaves_b for p in _refine(a, chains))
    hat_d = tuple(p for a in leaves_d for p in _refine(a, chains))
    if Counter(hat_b) != Counter(hat_d):
        logger.debug("Axis sets differ after refinement: {} vs {}", render_axes(hat_b), render_axes(hat_d))
        return SymLayoutExpr(hat_b), SymLayoutExpr(hat_d), True
    return SymLayoutExpr(hat_b), SymLayoutExpr(hat_d), False


def find_permutation(hat_b: SymLayoutExpr, hat_d: SymLayoutExpr,
                     axis_map: Optional[AxisMap] = None) -> Optional[Tuple[int, ...]]:
    if axis_map is not None:
        hat_d = substitute(hat_d, axis_map)
    if hat_b.rank != hat_d.rank:
        return None
    used = set()
    perm = []
    for i, axis in enumerate(hat_b.axes):
        matches = [j for j, other in enumerate(hat_d.axes) if other == axis and j not in used]
        if not matches:
            return None
        if len(matches) > 1:
            logger.warning("Axis {} of {} matches positions {}; taking {}", axis, hat_b, matches, matches[0])
        used.add(matches[0])
        perm.append(matches[0])
    return tuple(perm)


# -------------------------
# Surrogate verification
# -------------------------
def _surrogates(chains: Dict[Tuple[str, str], List[int]]) -> Dict[Tuple[str, str, int], int]:
    pieces = [(key, lo) for key in sorted(chains) for lo in chains[key][:-1]]
    primes = {}
    for n, piece in enumerate(pieces):
        primes[(piece[0][0], piece[0][1], piece[1])] = SURROGATE_PRIMES[n] if n < len(SURROGATE_PRIMES) else 2
    if prod(primes.values()) > MAX_SURROGATE_ELEMENTS:
        primes = {k: 2 for k in primes}
    return primes


def _surrogate_extent(exp: AxisExp, chains, primes) -> int:
    total = 1
    for a in atoms(exp):
        if a.extent == 1:
            continue
        for piece in _refine(a, chains):
            total *= primes[(piece.name, piece.side.value, piece.stride)]
    return total


def _run(array: np.ndarray, prims: Sequence[LayoutTerm], trace: Sequence[Sequence[AxisExp]], chains, primes):
    for p, axes in zip(prims, trace):
        if isinstance(p, Transpose):
            array = np.transpose(array, p.perm)
        else:
            array = array.reshape(tuple(_surrogate_extent(a, chains, primes) for a in axes))
    return array


def _verify(term: LayoutTerm, seq_b, seq_d, shape_d, b_axes, d_start, hat_b, hat_d, e_b, ops) -> bool:
    inverse = _flatten([invert_layout(term, shape_d)])
    try:
        trace_inv = push_axes(b_axes, inverse)
        trace_b = push_axes(b_axes, seq_b)
        trace_d = push_axes(d_start.axes, seq_d)
    except LayoutError as e:
        logger.debug("Surrogate trace failed: {}", e)
        return False
    groups = [b_axes, d_start.axes, hat_b.axes, hat_d.axes] + list(trace_inv) + list(trace_b) + list(trace_d)
    chains = _cuts([p for exp in g for p in atoms(exp)] for g in groups)
    if chains is None:
        return False
    primes = _surrogates(chains)
    start = tuple(_surrogate_extent(a, chains, primes) for a in b_axes)
    base = np.arange(prod(start)).reshape(start)
    expected = _run(base, seq_b, trace_b, chains, primes)
    dist = _run(base, inverse, trace_inv, chains, primes)
    dist = _run(dist, seq_d, trace_d, chains, primes)
    for p in ops:
        if isinstance(p, Transpose):
            dist = np.transpose(dist, p.perm)
        else:
            target = hat_d.axes if p.shape == hat_d.shape and p is ops[0] else e_b.axes
            dist = dist.reshape(tuple(_surrogate_extent(a, chains, primes) for a in target))
    return dist.shape == expected.shape and bool(np.array_equal(dist, expected))


# -------------------------
# Inference
# -------------------------
@lru_cache(maxsize=8192)
def _infer(term: LayoutTerm, seq_b: Tuple[LayoutTerm, ...], seq_d: Tuple[LayoutTerm, ...],
           shape_b: Shape, shape_d: Shape) -> BijectionResult:
    try:
        axis_map = extract_axis_map(term, shape_b, shape_d)
        b_axes = fresh_axes(shape_b, Side.BASELINE)
        d_start = substitute(SymLayoutExpr(tuple(fresh_axes(shape_d, Side.DISTRIBUTED))), axis_map)
        e_b = gen_exp(b_axes, seq_b)
        e_d = gen_exp(d_start.axes, seq_d)
    except LayoutError as e:
        logger.debug("Bijection inference out of scope: {}", e)
        return BOTTOM
    hat_b, hat_d, impossible = normalize_rank(e_b, e_d)
    if impossible:
        return BOTTOM
    perm = find_permutation(hat_b, hat_d)
    if perm is None:
        return BOTTOM
    ops: List[LayoutTerm] = []
    if hat_d.axes != e_d.axes or hat_d.rank != hat_b.rank:
        ops.append(Reshape(hat_d.shape))
    if perm != tuple(range(len(perm))):
        ops.append(Transpose(perm))
    if tuple(hat_d.shape[j] for j in perm) != e_b.shape:
        ops.append(Reshape(e_b.shape))
    if ops and isinstance(ops[0], Reshape) and hat_d.shape == e_d.shape and len(ops) > 1:
        ops.pop(0)
    if not _verify(term, seq_b, seq_d, shape_d, b_axes, d_start, hat_b, hat_d, e_b, ops):
        logger.warning("Inferred {} failed index verification", layout_from_primitives(ops))
        return BOTTOM
    return BijectionResult(tuple(ops), axis_map)


def infer_bijection(term: LayoutTerm, seq_b: Sequence[LayoutTerm], seq_d: Sequence[LayoutTerm],
                    shape_b: Sequence[int], shape_d: Sequence[int]) -> BijectionResult:
    """
    Infer the layout mapping the end of the distributed path onto the end of the baseline path.

    Args:
        term (LayoutTerm): Existing layout relation; maps the distributed path input onto the baseline one.
        seq_b (Sequence[LayoutTerm]): Layout ops along the baseline path.
        seq_d (Sequence[LayoutTerm]): Layout ops along the distributed path.
        shape_b (Sequence[int]): Shape of the baseline path input.
        shape_d (Sequence[int]): Shape of the distributed path input.

    Returns:
        BijectionResult: The verified op sequence, or BOTTOM.
    """
    return _infer(term, _flatten(seq_b), _flatten(seq_d), tuple(shape_b), tuple(shape_d))


def normalize_layout(term: LayoutTerm, shape_in: Sequence[int], shape_out: Sequence[int]) -> LayoutTerm:
    """Canonical reshape-transpose-reshape form of `term`, falling back to primitive fusion."""
    result = infer_bijection(term, (), (), shape_out, shape_in)
    if result.is_bottom:
        return canonicalize(term, shape_in)
    return result.term
