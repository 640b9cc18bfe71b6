"""Blocked CSR construction, filtering, and the local product kernel.

Reference results come from two independent oracles defined below:
dense expansion (numpy matmul on to_dense output) and a plain Python
loop that applies the admissibility rule pair by pair.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmul.blockcsr import (
    BlockAccumulator,
    BlockCsrMatrix,
    BlockIndexError,
    BlockLayout,
    BlockShapeError,
    DuplicateBlockError,
    FilterConfig,
    LayoutMismatchError,
    add_accumulate,
    allclose_matrices,
    block_pair_admissible,
    frobenius_distance,
    frobenius_norm,
    local_multiply_accumulate,
    matrix_checksum,
    post_filter,
    scale,
    scale_add_identity,
    serial_spgemm_oracle,
)
from tests.conftest import random_block_matrix


def dense_oracle_product(a: BlockCsrMatrix, b: BlockCsrMatrix) -> np.ndarray:
    """Unfiltered reference: expand to dense and multiply with numpy."""
    return a.to_dense() @ b.to_dense()


def loop_oracle_product(
    a: BlockCsrMatrix, b: BlockCsrMatrix, cfg: FilterConfig
) -> np.ndarray:
    """Filtered reference: pairwise Python loop honoring admissibility."""
    la, lb = a.layout, b.layout
    out = np.zeros((la.total_rows, lb.total_cols))
    ro = la.row_offsets
    co = lb.col_offsets
    a_blocks = {(r, c): (blk, float(np.linalg.norm(blk))) for r, c, blk in a.iter_blocks()}
    b_blocks = {(r, c): (blk, float(np.linalg.norm(blk))) for r, c, blk in b.iter_blocks()}
    for (i, k), (ba, na) in a_blocks.items():
        for (k2, j), (bb, nb) in b_blocks.items():
            if k2 != k:
                continue
            if not block_pair_admissible(na, nb, cfg):
                continue
            out[ro[i] : ro[i + 1], co[j] : co[j + 1]] += ba @ bb
    return out


def relative_frobenius_error(got: np.ndarray, want: np.ndarray) -> float:
    ref = np.linalg.norm(want)
    if ref == 0.0:
        return float(np.linalg.norm(got))
    return float(np.linalg.norm(got - want) / ref)


# --------------------------------------------------------------------------
# layout and construction


class TestBlockLayout:
    def test_totals_are_size_sums(self):
        layout = BlockLayout((2, 3, 1), (4, 2))
        assert layout.total_rows == 6
        assert layout.total_cols == 6
        assert layout.n_block_rows == 3
        assert layout.n_block_cols == 2

    def test_offsets(self):
        layout = BlockLayout((2, 3), (1, 4))
        assert layout.row_offsets.tolist() == [0, 2, 5]
        assert layout.col_offsets.tolist() == [0, 1, 5]

    def test_rejects_zero_size(self):
        with pytest.raises(ValueError):
            BlockLayout((2, 0), (2,))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            BlockLayout((), (2,))

    def test_large_uniform_layout(self):
        # 6912 block rows of 23 elements: the largest shape the engine targets.
        layout = BlockLayout.uniform(6912, 6912, 23)
        assert layout.total_rows == 158_976
        m = BlockCsrMatrix.empty(layout)
        assert m.occupancy() == 0.0


class TestBuild:
    def test_empty_entries(self):
        layout = BlockLayout.uniform(3, 3, 2)
        m = BlockCsrMatrix.from_entries(layout, [])
        assert m.occupancy() == 0.0
        assert m.row_ptr.tolist() == [0, 0, 0, 0]

    def test_identity_block_norm(self):
        layout = BlockLayout.uniform(1, 1, 2)
        m = BlockCsrMatrix.from_entries(layout, [(0, 0, np.eye(2))])
        assert m.block_norms.tolist() == pytest.approx([np.sqrt(2.0)])

    def test_canonical_ordering(self):
        layout = BlockLayout.uniform(2, 3, 1)
        entries = [(1, 2, [[1.0]]), (0, 1, [[2.0]]), (1, 0, [[3.0]])]
        m = BlockCsrMatrix.from_entries(layout, [(r, c, np.array(v)) for r, c, v in entries])
        assert m.col_idx.tolist() == [1, 0, 2]
        assert m.row_ptr.tolist() == [0, 1, 3]

    def test_shape_mismatch(self):
        layout = BlockLayout((2, 3), (2, 3))
        with pytest.raises(BlockShapeError):
            BlockCsrMatrix.from_entries(layout, [(0, 1, np.zeros((2, 2)))])

    def test_duplicate_block(self):
        layout = BlockLayout.uniform(2, 2, 1)
        with pytest.raises(DuplicateBlockError):
            BlockCsrMatrix.from_entries(
                layout, [(0, 0, np.ones((1, 1))), (0, 0, np.ones((1, 1)))]
            )

    def test_out_of_range(self):
        layout = BlockLayout.uniform(2, 2, 1)
        with pytest.raises(BlockIndexError):
            BlockCsrMatrix.from_entries(layout, [(2, 0, np.ones((1, 1)))])

    def test_dense_round_trip(self):
        rng = np.random.default_rng(3)
        layout = BlockLayout((2, 3), (1, 4))
        dense = rng.standard_normal((5, 5))
        m = BlockCsrMatrix.from_dense(dense, layout)
        np.testing.assert_array_equal(m.to_dense(), dense)

    def test_norms_match_recomputed(self):
        rng = np.random.default_rng(4)
        m = random_block_matrix(rng, BlockLayout.uniform(5, 5, 3), occupancy=0.6)
        for i, blk in enumerate(m.blocks):
            want = np.linalg.norm(blk)
            assert abs(m.block_norms[i] - want) <= 1e-14 * max(want, 1.0)


class TestOccupancy:
    def test_dense(self):
        layout = BlockLayout.uniform(2, 2, 3)
        m = BlockCsrMatrix.from_dense(np.ones((6, 6)), layout)
        assert m.occupancy() == 1.0

    def test_empty(self):
        assert BlockCsrMatrix.empty(BlockLayout.uniform(2, 2, 3)).occupancy() == 0.0

    def test_single_block_quarter(self):
        # one 6x6 block out of a 12x12 area: 36/144
        layout = BlockLayout.uniform(2, 2, 6)
        m = BlockCsrMatrix.from_entries(layout, [(0, 1, np.ones((6, 6)))])
        assert m.occupancy() == 0.25


# --------------------------------------------------------------------------
# filtering


class TestAdmissibility:
    def test_positive_product_zero_threshold(self):
        assert block_pair_admissible(1.0, 1.0, FilterConfig(0.0)) is True

    def test_zero_product(self):
        assert block_pair_admissible(0.0, 5.0, FilterConfig(1e-12)) is False

    def test_filtering_disabled(self):
        cfg = FilterConfig(1e-10, on_the_fly=False)
        assert block_pair_admissible(1e-5, 1e-6, cfg) is True

    def test_threshold_strictness(self):
        cfg = FilterConfig(1.0)
        assert block_pair_admissible(1.0, 1.0, cfg) is False
        assert block_pair_admissible(1.0, 1.0 + 1e-9, cfg) is True

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            FilterConfig(-1.0)


class TestPostFilter:
    def test_threshold_zero_drops_exact_zero(self):
        layout = BlockLayout.uniform(2, 2, 2)
        m = BlockCsrMatrix.from_entries(
            layout, [(0, 0, np.zeros((2, 2))), (1, 1, np.ones((2, 2)))]
        )
        f = post_filter(m, FilterConfig(0.0))
        assert f.n_blocks == 1
        assert f.col_idx.tolist() == [1]

    def test_all_below_threshold(self):
        layout = BlockLayout.uniform(2, 2, 2)
        m = BlockCsrMatrix.from_entries(layout, [(0, 0, 1e-9 * np.ones((2, 2)))])
        f = post_filter(m, FilterConfig(1e-3))
        assert f.n_blocks == 0
        assert f.occupancy() == 0.0

    def test_mixed_norms_one_survivor(self):
        layout = BlockLayout.uniform(2, 2, 1)
        m = BlockCsrMatrix.from_entries(
            layout,
            [(0, 0, np.array([[1e-3]])), (1, 1, np.array([[1e-9]]))],
        )
        f = post_filter(m, FilterConfig(1e-6))
        assert f.n_blocks == 1
        assert f.block_at(0, 0) is not None

    def test_disabled(self):
        layout = BlockLayout.uniform(1, 1, 1)
        m = BlockCsrMatrix.from_entries(layout, [(0, 0, np.zeros((1, 1)))])
        cfg = FilterConfig(0.0, post_filter=False)
        assert post_filter(m, cfg).n_blocks == 1

    def test_occupancy_never_grows(self):
        rng = np.random.default_rng(5)
        m = random_block_matrix(
            rng, BlockLayout.uniform(6, 6, 2), occupancy=0.7, magnitude_spread=8.0
        )
        for thr in (0.0, 1e-6, 1e-3, 1.0):
            assert post_filter(m, FilterConfig(thr)).occupancy() <= m.occupancy()


# --------------------------------------------------------------------------
# local multiply


class TestLocalMultiplyAccumulate:
    def test_identity_contribution(self):
        layout = BlockLayout.uniform(3, 3, 2)
        eye = BlockCsrMatrix.from_dense(np.eye(6), layout)
        rng = np.random.default_rng(6)
        c = random_block_matrix(rng, layout, occupancy=0.5)
        out = local_multiply_accumulate(c, eye, eye, FilterConfig(0.0))
        want = c.to_dense() + np.eye(6)
        assert relative_frobenius_error(out.to_dense(), want) <= 1e-15

    def test_everything_filtered_leaves_c_alone(self):
        rng = np.random.default_rng(7)
        layout = BlockLayout.uniform(3, 3, 2)
        a = random_block_matrix(rng, layout, occupancy=0.8)
        b = random_block_matrix(rng, layout, occupancy=0.8)
        c = random_block_matrix(rng, layout, occupancy=0.3)
        out = local_multiply_accumulate(c, a, b, FilterConfig(1e30))
        assert frobenius_distance(out, c) == 0.0

    def test_random_blocks_match_dense_oracle(self):
        rng = np.random.default_rng(8)
        layout = BlockLayout.uniform(4, 4, 3)
        a = random_block_matrix(rng, layout, occupancy=0.7)
        b = random_block_matrix(rng, layout, occupancy=0.7)
        c = BlockCsrMatrix.empty(layout)
        out = local_multiply_accumulate(c, a, b, FilterConfig(0.0))
        want = dense_oracle_product(a, b)
        assert relative_frobenius_error(out.to_dense(), want) <= 1e-12

    def test_ragged_layouts(self):
        rng = np.random.default_rng(9)
        la = BlockLayout((2, 4, 1), (3, 2, 5))
        lb = BlockLayout((3, 2, 5), (1, 6))
        a = random_block_matrix(rng, la, occupancy=0.8)
        b = random_block_matrix(rng, lb, occupancy=0.8)
        c = BlockCsrMatrix.empty(BlockLayout((2, 4, 1), (1, 6)))
        out = local_multiply_accumulate(c, a, b, FilterConfig(0.0))
        want = dense_oracle_product(a, b)
        assert relative_frobenius_error(out.to_dense(), want) <= 1e-12

    def test_layout_mismatch(self):
        a = BlockCsrMatrix.empty(BlockLayout.uniform(2, 3, 2))
        b = BlockCsrMatrix.empty(BlockLayout.uniform(2, 2, 2))
        c = BlockCsrMatrix.empty(BlockLayout.uniform(2, 2, 2))
        with pytest.raises(LayoutMismatchError):
            local_multiply_accumulate(c, a, b, FilterConfig(0.0))

    def test_linearity_in_c(self):
        rng = np.random.default_rng(10)
        layout = BlockLayout.uniform(4, 4, 2)
        a = random_block_matrix(rng, layout, occupancy=0.6)
        b = random_block_matrix(rng, layout, occupancy=0.6)
        pattern = [(r, c) for r in range(4) for c in range(4)]
        c1 = BlockCsrMatrix.from_entries(
            layout, [(r, c, rng.standard_normal((2, 2))) for r, c in pattern]
        )
        c2 = BlockCsrMatrix.from_entries(
            layout, [(r, c, rng.standard_normal((2, 2))) for r, c in pattern]
        )
        cfg = FilterConfig(0.0)
        lhs = add_accumulate(local_multiply_accumulate(c1, a, b, cfg), c2)
        rhs = local_multiply_accumulate(add_accumulate(c1, c2), a, b, cfg)
        assert relative_frobenius_error(lhs.to_dense(), rhs.to_dense()) <= 1e-12

    def test_bitwise_deterministic(self):
        rng = np.random.default_rng(11)
        layout = BlockLayout.uniform(5, 5, 3)
        a = random_block_matrix(rng, layout, occupancy=0.6, magnitude_spread=4.0)
        b = random_block_matrix(rng, layout, occupancy=0.6, magnitude_spread=4.0)
        c = BlockCsrMatrix.empty(layout)
        cfg = FilterConfig(1e-4)
        one = local_multiply_accumulate(c, a, b, cfg)
        two = local_multiply_accumulate(c, a, b, cfg)
        assert matrix_checksum(one) == matrix_checksum(two)

    def test_filtered_product_matches_loop_oracle(self):
        rng = np.random.default_rng(12)
        layout = BlockLayout.uniform(5, 5, 2)
        a = random_block_matrix(rng, layout, occupancy=0.7, magnitude_spread=8.0)
        b = random_block_matrix(rng, layout, occupancy=0.7, magnitude_spread=8.0)
        for thr in (0.0, 1e-10, 1e-6, 1e-2):
            cfg = FilterConfig(thr, post_filter=False)
            got = local_multiply_accumulate(BlockCsrMatrix.empty(layout), a, b, cfg)
            want = loop_oracle_product(a, b, cfg)
            assert relative_frobenius_error(got.to_dense(), want) <= 1e-12


class TestSerialOracle:
    def test_identity_times_m(self):
        rng = np.random.default_rng(13)
        layout = BlockLayout.uniform(4, 4, 2)
        m = random_block_matrix(rng, layout, occupancy=0.5)
        eye = BlockCsrMatrix.from_dense(np.eye(8), layout)
        out = serial_spgemm_oracle(eye, m, FilterConfig(0.0))
        assert allclose_matrices(out, m, rtol=1e-15)

    def test_three_block_instance_vs_dense(self):
        rng = np.random.default_rng(14)
        layout = BlockLayout.uniform(3, 3, 3)
        a = random_block_matrix(rng, layout, occupancy=0.9)
        b = random_block_matrix(rng, layout, occupancy=0.9)
        out = serial_spgemm_oracle(a, b, FilterConfig(0.0))
        want = dense_oracle_product(a, b)
        assert relative_frobenius_error(out.to_dense(), want) <= 1e-12

    def test_filtering_difference_is_dropped_contributions(self):
        rng = np.random.default_rng(15)
        layout = BlockLayout.uniform(4, 4, 2)
        a = random_block_matrix(rng, layout, occupancy=0.8, magnitude_spread=9.0)
        b = random_block_matrix(rng, layout, occupancy=0.8, magnitude_spread=9.0)
        thr = 1e-6
        on = serial_spgemm_oracle(a, b, FilterConfig(thr, post_filter=False))
        off = serial_spgemm_oracle(a, b, FilterConfig(0.0, post_filter=False))
        dropped = loop_oracle_product(a, b, FilterConfig(0.0)) - loop_oracle_product(
            a, b, FilterConfig(thr)
        )
        got_diff = off.to_dense() - on.to_dense()
        assert np.linalg.norm(got_diff - dropped) <= 1e-12 * max(np.linalg.norm(dropped), 1.0)
        # every dropped pair really was sub-threshold
        a_norms = {(r, c): np.linalg.norm(blk) for r, c, blk in a.iter_blocks()}
        b_norms = {(r, c): np.linalg.norm(blk) for r, c, blk in b.iter_blocks()}
        for (i, k), na in a_norms.items():
            for (k2, j), nb in b_norms.items():
                if k2 == k and na * nb <= thr:
                    assert not block_pair_admissible(na, nb, FilterConfig(thr))

    def test_result_is_post_filtered(self):
        layout = BlockLayout.uniform(2, 2, 1)
        a = BlockCsrMatrix.from_entries(layout, [(0, 0, np.array([[1e-8]]))])
        b = BlockCsrMatrix.from_entries(layout, [(0, 0, np.array([[1e-8]]))])
        out = serial_spgemm_oracle(a, b, FilterConfig(1e-10))
        # product norm 1e-16 <= 1e-10: the post filter removes it
        assert out.n_blocks == 0


class TestAddAccumulate:
    def test_add_empty(self):
        rng = np.random.default_rng(16)
        layout = BlockLayout.uniform(3, 3, 2)
        c = random_block_matrix(rng, layout, occupancy=0.5)
        out = add_accumulate(c, BlockCsrMatrix.empty(layout))
        assert frobenius_distance(out, c) == 0.0

    def test_disjoint_union(self):
        layout = BlockLayout.uniform(2, 2, 1)
        c = BlockCsrMatrix.from_entries(layout, [(0, 0, np.array([[1.0]]))])
        p = BlockCsrMatrix.from_entries(layout, [(1, 1, np.array([[2.0]]))])
        out = add_accumulate(c, p)
        assert out.n_blocks == 2
        np.testing.assert_array_equal(out.to_dense(), np.diag([1.0, 2.0]))

    def test_overlap_matches_dense_sum(self):
        rng = np.random.default_rng(17)
        layout = BlockLayout.uniform(3, 3, 2)
        c = random_block_matrix(rng, layout, occupancy=0.7)
        p = random_block_matrix(rng, layout, occupancy=0.7)
        out = add_accumulate(c, p)
        np.testing.assert_allclose(out.to_dense(), c.to_dense() + p.to_dense(), atol=0)

    def test_layout_mismatch(self):
        c = BlockCsrMatrix.empty(BlockLayout.uniform(2, 2, 2))
        p = BlockCsrMatrix.empty(BlockLayout.uniform(2, 2, 3))
        with pytest.raises(LayoutMismatchError):
            add_accumulate(c, p)


# --------------------------------------------------------------------------
# helpers used by the sign iteration


class TestScaleHelpers:
    def test_scale(self):
        layout = BlockLayout.uniform(2, 2, 2)
        m = BlockCsrMatrix.from_dense(np.ones((4, 4)), layout)
        s = scale(m, -0.5)
        np.testing.assert_array_equal(s.to_dense(), -0.5 * np.ones((4, 4)))
        assert s.block_norms[0] == pytest.approx(0.5 * m.block_norms[0])

    def test_scale_add_identity(self):
        rng = np.random.default_rng(18)
        layout = BlockLayout((2, 3), (2, 3))
        m = random_block_matrix(rng, layout, occupancy=0.5)
        out = scale_add_identity(m, -1.0, 3.0)
        want = -m.to_dense() + 3.0 * np.eye(5)
        np.testing.assert_allclose(out.to_dense(), want, atol=0)

    def test_scale_add_identity_needs_symmetric_layout(self):
        m = BlockCsrMatrix.empty(BlockLayout((2, 3), (3, 2)))
        with pytest.raises(LayoutMismatchError):
            scale_add_identity(m, 1.0, 1.0)

    def test_frobenius_norm_matches_dense(self):
        rng = np.random.default_rng(19)
        m = random_block_matrix(rng, BlockLayout.uniform(4, 4, 3), occupancy=0.6)
        assert frobenius_norm(m) == pytest.approx(np.linalg.norm(m.to_dense()), rel=1e-13)


# --------------------------------------------------------------------------
# property tests


@st.composite
def layout_and_occupancy(draw):
    nbr = draw(st.integers(min_value=1, max_value=5))
    nbc = draw(st.integers(min_value=1, max_value=5))
    rows = tuple(draw(st.integers(min_value=1, max_value=4)) for _ in range(nbr))
    cols = tuple(draw(st.integers(min_value=1, max_value=4)) for _ in range(nbc))
    occ = draw(st.floats(min_value=0.0, max_value=1.0))
    seed = draw(st.integers(min_value=0, max_value=2**31))
    return BlockLayout(rows, cols), occ, seed


@settings(max_examples=40, deadline=None)
@given(layout_and_occupancy())
def test_property_threshold_zero_matches_dense(params):
    layout, occ, seed = params
    rng = np.random.default_rng(seed)
    lb = BlockLayout(layout.col_block_sizes, layout.row_block_sizes)
    a = random_block_matrix(rng, layout, occupancy=occ)
    b = random_block_matrix(rng, lb, occupancy=occ)
    out = serial_spgemm_oracle(a, b, FilterConfig(0.0))
    want = dense_oracle_product(a, b)
    assert relative_frobenius_error(out.to_dense(), want) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(layout_and_occupancy(), st.floats(min_value=0.0, max_value=1e-2))
def test_property_post_filter_monotone_and_idempotent(params, thr):
    layout, occ, seed = params
    rng = np.random.default_rng(seed)
    m = random_block_matrix(rng, layout, occupancy=occ, magnitude_spread=6.0)
    cfg = FilterConfig(thr)
    f = post_filter(m, cfg)
    assert f.occupancy() <= m.occupancy()
    assert frobenius_distance(post_filter(f, cfg), f) == 0.0
    assert all(n > thr for n in f.block_norms)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31))
def test_property_accumulator_matches_sum_of_products(seed):
    rng = np.random.default_rng(seed)
    layout = BlockLayout.uniform(3, 3, 2)
    mats = [random_block_matrix(rng, layout, occupancy=0.6) for _ in range(4)]
    acc = BlockAccumulator(layout)
    want = np.zeros((6, 6))
    for a, b in zip(mats[::2], mats[1::2]):
        acc.multiply_accumulate(a, b, FilterConfig(0.0))
        want += dense_oracle_product(a, b)
    got = acc.freeze().to_dense()
    assert relative_frobenius_error(got, want) <= 1e-12
