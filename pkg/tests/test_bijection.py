import itertools
import time

import numpy as np
import pytest

from bijection import (
    BOTTOM, SymLayoutExpr, find_permutation, gen_exp, infer_bijection, normalize_layout, normalize_rank,
)
from relations import (
    Identity, Reshape, Side, Transpose, apply_layout_array, extract_axis_map, fresh_axes, layout_from_primitives,
    merge_all,
)


def _path(array, seq):
    return apply_layout_array(layout_from_primitives(seq), array)


# ------------------------------
# Worked case
# ------------------------------
def test_head_merge_bijection():
    started = time.perf_counter()
    result = infer_bijection(Identity(), [Transpose((1, 0, 2)), Reshape((256, 4096))], [Reshape((256, 4096))],
                             (64, 4, 4096), (64, 4, 4096))
    assert time.perf_counter() - started < 1.0
    assert str(result) == "[reshape(64,4,4096), transpose(1,0,2), reshape(256,4096)]"
    assert result.ops[1] == Transpose((1, 0, 2))


def test_identity_paths_give_empty_ops():
    result = infer_bijection(Identity(), [], [], (4, 6), (4, 6))
    assert not result.is_bottom
    assert result.ops == ()
    assert str(result) == "[]"


def test_non_grouping_reshape_is_bottom():
    result = infer_bijection(Identity(), [Reshape((6, 4))], [Transpose((1, 0, 2)), Reshape((12, 2))],
                             (2, 3, 4), (2, 3, 4))
    assert result.is_bottom
    assert str(result) == "⊥"


def test_bottom_term_raises():
    with pytest.raises(ValueError):
        BOTTOM.term


# ------------------------------
# Steps
# ------------------------------
def test_gen_exp_tracks_merges():
    axes = fresh_axes((4, 6), Side.BASELINE)
    expr = gen_exp(axes, [Transpose((1, 0)), Reshape((24,))])
    assert str(expr) == "(⊗(j, i))"
    assert expr.shape == (24,)
    assert expr.rank == 1


def test_normalize_rank_splits_to_common_factors():
    axes = fresh_axes((4, 6), Side.BASELINE)
    merged = gen_exp(axes, [Reshape((24,))])
    plain = SymLayoutExpr(tuple(axes))
    hat_b, hat_d, impossible = normalize_rank(merged, plain)
    assert not impossible
    assert hat_b == hat_d
    assert hat_b.shape == (4, 6)


def test_normalize_rank_detects_foreign_axes():
    b = SymLayoutExpr(tuple(fresh_axes((4, 6), Side.BASELINE)))
    d = SymLayoutExpr(tuple(fresh_axes((4, 6), Side.DISTRIBUTED)))
    assert normalize_rank(b, d)[2]
    m = extract_axis_map(Identity(), (4, 6), (4, 6))
    assert not normalize_rank(b, d, m)[2]


def test_normalize_rank_refines_a_merged_axis_against_separate_axes():
    i, j, k = fresh_axes((2, 3, 4), Side.BASELINE)
    merged = SymLayoutExpr((merge_all([i, k]), j))
    separate = SymLayoutExpr(tuple(fresh_axes((2, 3, 4), Side.DISTRIBUTED)))
    assert str(merged) == "(⊗(i, k), j)"
    assert str(separate) == "(i', j', k')"

    # Unrelated distributed axes cannot be matched at all.
    assert normalize_rank(merged, separate)[2]

    m = extract_axis_map(Identity(), (2, 3, 4), (2, 3, 4))
    hat_b, hat_d, impossible = normalize_rank(merged, separate, m)
    assert not impossible
    assert str(hat_b) == "(i, k, j)"
    assert sorted(str(a) for a in hat_d.axes) == ["i", "j", "k"]
    assert find_permutation(hat_b, hat_d) == (0, 2, 1)


def test_find_permutation():
    i, j, k = fresh_axes((2, 3, 4), Side.BASELINE)
    assert find_permutation(SymLayoutExpr((i, j, k)), SymLayoutExpr((j, i, k))) == (1, 0, 2)
    assert find_permutation(SymLayoutExpr((i, j, k)), SymLayoutExpr((i, j, k))) == (0, 1, 2)
    assert find_permutation(SymLayoutExpr((i, j, k)), SymLayoutExpr((i, j))) is None


def test_permutation_through_axis_map():
    b = fresh_axes((4, 6), Side.BASELINE)
    d = fresh_axes((6, 4), Side.DISTRIBUTED)
    m = extract_axis_map(Transpose((1, 0)), (4, 6), (6, 4))
    assert find_permutation(SymLayoutExpr(tuple(b)), SymLayoutExpr(tuple(d)), m) == (1, 0)


# ------------------------------
# Soundness against index enumeration
# ------------------------------
PATHS = [
    [],
    [Transpose((1, 0, 2))],
    [Reshape((6, 4))],
    [Transpose((0, 2, 1)), Reshape((2, 12))],
    [Reshape((2, 3, 2, 2)), Transpose((0, 2, 1, 3))],
    [Transpose((2, 0, 1)), Reshape((24,))],
]


@pytest.mark.parametrize("seq_b, seq_d", list(itertools.product(PATHS, PATHS)))
def test_inferred_bijections_are_sound(seq_b, seq_d):
    base = np.arange(24).reshape(2, 3, 4)
    result = infer_bijection(Identity(), seq_b, seq_d, (2, 3, 4), (2, 3, 4))
    assert not result.is_bottom
    mapped = apply_layout_array(result.term, _path(base, seq_d))
    assert np.array_equal(mapped, _path(base, seq_b))


def test_bijection_under_existing_layout():
    base = np.arange(24).reshape(2, 3, 4)
    dist = np.transpose(base, (1, 0, 2))
    term = Transpose((1, 0, 2))
    result = infer_bijection(term, [Reshape((6, 4))], [Reshape((3, 8))], (2, 3, 4), (3, 2, 4))
    assert not result.is_bottom
    mapped = apply_layout_array(result.term, dist.reshape(3, 8))
    assert np.array_equal(mapped, base.reshape(6, 4))


def test_normalize_layout_to_canonical_form():
    term = layout_from_primitives([Transpose((1, 0)), Reshape((24,)), Reshape((6, 4))])
    canon = normalize_layout(term, (4, 6), (6, 4))
    assert canon == Transpose((1, 0))
