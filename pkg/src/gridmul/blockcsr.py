"""Blocked compressed-sparse-row matrices with per-block dense payloads.

The storage unit is a dense float64 block addressed by (block row, block col).
Block sizes come from a :class:`BlockLayout`; payloads are row-major numpy
arrays. Every stored block carries its Frobenius norm, which drives the
norm-product filtering used throughout the multiplication engines.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "BlockCsrError",
    "BlockShapeError",
    "DuplicateBlockError",
    "BlockIndexError",
    "LayoutMismatchError",
    "BlockLayout",
    "FilterConfig",
    "BlockCsrMatrix",
    "BlockAccumulator",
    "block_pair_admissible",
    "local_multiply_accumulate",
    "post_filter",
    "serial_spgemm_oracle",
    "add_accumulate",
    "scale",
    "scale_add_identity",
    "frobenius_norm",
    "frobenius_distance",
    "allclose_matrices",
    "matrix_checksum",
]


class BlockCsrError(ValueError):
    """Base class for blocked-matrix contract violations."""


class BlockShapeError(BlockCsrError):
    """A payload's shape disagrees with the layout."""


class DuplicateBlockError(BlockCsrError):
    """The same (row, col) block was supplied twice."""


class BlockIndexError(BlockCsrError):
    """A block coordinate falls outside the layout."""


class LayoutMismatchError(BlockCsrError):
    """Two operands do not share the layout the operation requires."""


# --------------------------------------------------------------------------
# layout


@dataclass(frozen=True)
class BlockLayout:
    """Row and column block sizes of a blocked matrix.

    Attributes:
        row_block_sizes: size of each block row, all >= 1.
        col_block_sizes: size of each block column, all >= 1.
    """

    row_block_sizes: tuple[int, ...]
    col_block_sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        rows = tuple(int(s) for s in self.row_block_sizes)
        cols = tuple(int(s) for s in self.col_block_sizes)
        if not rows or not cols:
            raise BlockCsrError("layout needs at least one block row and column")
        if min(rows) < 1 or min(cols) < 1:
            raise BlockCsrError("block sizes must be >= 1")
        object.__setattr__(self, "row_block_sizes", rows)
        object.__setattr__(self, "col_block_sizes", cols)

    @staticmethod
    def uniform(n_block_rows: int, n_block_cols: int, block_size: int) -> "BlockLayout":
        return BlockLayout((block_size,) * n_block_rows, (block_size,) * n_block_cols)

    @property
    def n_block_rows(self) -> int:
        return len(self.row_block_sizes)

    @property
    def n_block_cols(self) -> int:
        return len(self.col_block_sizes)

    @property
    def total_rows(self) -> int:
        return sum(self.row_block_sizes)

    @property
    def total_cols(self) -> int:
        return sum(self.col_block_sizes)

    @property
    def row_offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.row_block_sizes)))

    @property
    def col_offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.col_block_sizes)))

    def block_shape(self, r: int, c: int) -> tuple[int, int]:
        return self.row_block_sizes[r], self.col_block_sizes[c]

    def is_square_symmetric(self) -> bool:
        """Same block sizes on rows and columns (diagonal blocks square)."""
        return self.row_block_sizes == self.col_block_sizes

    def transposed(self) -> "BlockLayout":
        return BlockLayout(self.col_block_sizes, self.row_block_sizes)


# --------------------------------------------------------------------------
# filtering


@dataclass(frozen=True)
class FilterConfig:
    """Norm-based filtering applied during and after multiplication.

    Attributes:
        threshold: norm threshold; 0.0 keeps everything with nonzero norm.
        on_the_fly: skip block products with norm_a * norm_b <= threshold.
        post_filter: drop result blocks with Frobenius norm <= threshold.
    """

    threshold: float = 0.0
    on_the_fly: bool = True
    post_filter: bool = True

    def __post_init__(self) -> None:
        if self.threshold < 0.0:
            raise ValueError("filter threshold must be >= 0")


def block_pair_admissible(norm_a: float, norm_b: float, cfg: FilterConfig) -> bool:
    """True when the product of two blocks survives on-the-fly filtering."""
    if not cfg.on_the_fly:
        return True
    return norm_a * norm_b > cfg.threshold


# --------------------------------------------------------------------------
# matrix


def _block_norms(blocks: Sequence[np.ndarray]) -> np.ndarray:
    out = np.empty(len(blocks), dtype=np.float64)
    for i, b in enumerate(blocks):
        out[i] = np.sqrt(np.einsum("ij,ij->", b, b))
    return out


class BlockCsrMatrix:
    """Immutable blocked CSR matrix.

    Attributes:
        layout: the block sizes.
        row_ptr: int64 array of length n_block_rows + 1.
        col_idx: int64 array of stored block columns, row-major order,
            ascending within each block row.
        blocks: per-block dense float64 payloads, same order as col_idx.
        block_norms: Frobenius norm of each stored block.

    Values are immutable once built; the accumulate operations return new
    matrices. Payload arrays are shared, never copied, so callers must not
    write into them.
    """

    __slots__ = ("layout", "row_ptr", "col_idx", "blocks", "block_norms", "_stack")

    def __init__(
        self,
        layout: BlockLayout,
        row_ptr: np.ndarray,
        col_idx: np.ndarray,
        blocks: list[np.ndarray],
        block_norms: np.ndarray | None = None,
        _stack: np.ndarray | None = None,
    ) -> None:
        self.layout = layout
        self.row_ptr = np.asarray(row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(col_idx, dtype=np.int64)
        self.blocks = blocks
        self.block_norms = (
            _block_norms(blocks) if block_norms is None else np.asarray(block_norms, dtype=np.float64)
        )
        self._stack = _stack

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_entries(
        cls, layout: BlockLayout, entries: Iterable[tuple[int, int, np.ndarray]]
    ) -> "BlockCsrMatrix":
        """Build from (block_row, block_col, payload) triples.

        Raises BlockIndexError, BlockShapeError or DuplicateBlockError when an
        entry is out of range, misshapen, or repeated.
        """
        nbr, nbc = layout.n_block_rows, layout.n_block_cols
        triples: list[tuple[int, int, np.ndarray]] = []
        seen: set[tuple[int, int]] = set()
        for r, c, payload in entries:
            r, c = int(r), int(c)
            if not (0 <= r < nbr and 0 <= c < nbc):
                raise BlockIndexError(f"block ({r}, {c}) outside {nbr}x{nbc} layout")
            shape = layout.block_shape(r, c)
            arr = np.ascontiguousarray(payload, dtype=np.float64)
            if arr.shape != shape:
                raise BlockShapeError(f"block ({r}, {c}) has shape {arr.shape}, layout wants {shape}")
            if (r, c) in seen:
                raise DuplicateBlockError(f"block ({r}, {c}) supplied twice")
            seen.add((r, c))
            triples.append((r, c, arr))
        triples.sort(key=lambda t: (t[0], t[1]))
        counts = np.zeros(nbr, dtype=np.int64)
        col_idx = np.empty(len(triples), dtype=np.int64)
        blocks: list[np.ndarray] = []
        for pos, (r, c, arr) in enumerate(triples):
            counts[r] += 1
            col_idx[pos] = c
            blocks.append(arr)
        row_ptr = np.concatenate(([0], np.cumsum(counts)))
        return cls._with_stack(layout, row_ptr, col_idx, blocks)

    @classmethod
    def _with_stack(
        cls,
        layout: BlockLayout,
        row_ptr: np.ndarray,
        col_idx: np.ndarray,
        blocks: list[np.ndarray],
        block_norms: np.ndarray | None = None,
    ) -> "BlockCsrMatrix":
        # Uniform layouts keep payloads in one (n, r, c) array so the multiply
        # kernel can gather without a Python loop; blocks become views into it.
        stack = None
        shapes = {b.shape for b in blocks}
        if len(shapes) == 1 and blocks:
            stack = np.stack(blocks)
            blocks = list(stack)
        return cls(layout, row_ptr, col_idx, blocks, block_norms, _stack=stack)

    @classmethod
    def empty(cls, layout: BlockLayout) -> "BlockCsrMatrix":
        return cls(
            layout,
            np.zeros(layout.n_block_rows + 1, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            [],
            np.empty(0, dtype=np.float64),
        )

    @classmethod
    def from_dense(
        cls, dense: np.ndarray, layout: BlockLayout, keep_zero_blocks: bool = True
    ) -> "BlockCsrMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        if dense.shape != (layout.total_rows, layout.total_cols):
            raise BlockShapeError(
                f"dense shape {dense.shape} does not match layout "
                f"({layout.total_rows}, {layout.total_cols})"
            )
        ro, co = layout.row_offsets, layout.col_offsets
        entries = []
        for r in range(layout.n_block_rows):
            for c in range(layout.n_block_cols):
                blk = dense[ro[r] : ro[r + 1], co[c] : co[c + 1]]
                if keep_zero_blocks or np.any(blk != 0.0):
                    entries.append((r, c, blk.copy()))
        return cls.from_entries(layout, entries)

    # -- basic queries -----------------------------------------------------

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def block_rows_of_stored(self) -> np.ndarray:
        """Block-row index of each stored block, aligned with col_idx."""
        return np.repeat(
            np.arange(self.layout.n_block_rows, dtype=np.int64), np.diff(self.row_ptr)
        )

    def stored_elements(self) -> int:
        return int(sum(b.size for b in self.blocks))

    def occupancy(self) -> float:
        """Stored elements over total elements, in [0, 1]."""
        total = self.layout.total_rows * self.layout.total_cols
        return self.stored_elements() / total

    def block_at(self, r: int, c: int) -> np.ndarray | None:
        lo, hi = self.row_ptr[r], self.row_ptr[r + 1]
        pos = np.searchsorted(self.col_idx[lo:hi], c)
        if pos < hi - lo and self.col_idx[lo + pos] == c:
            return self.blocks[lo + pos]
        return None

    def iter_blocks(self) -> Iterator[tuple[int, int, np.ndarray]]:
        rows = self.block_rows_of_stored()
        for i in range(self.n_blocks):
            yield int(rows[i]), int(self.col_idx[i]), self.blocks[i]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.layout.total_rows, self.layout.total_cols))
        ro, co = self.layout.row_offsets, self.layout.col_offsets
        for r, c, blk in self.iter_blocks():
            out[ro[r] : ro[r + 1], co[c] : co[c + 1]] = blk
        return out

    def gather(self, idx: np.ndarray) -> np.ndarray:
        """Stack the blocks at the given positions; shapes must agree."""
        if self._stack is not None:
            return self._stack[idx]
        return np.stack([self.blocks[i] for i in idx])


# --------------------------------------------------------------------------
# pair enumeration and the product kernel


def _enumerate_pairs(
    a: BlockCsrMatrix, b: BlockCsrMatrix, cfg: FilterConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """All admissible (A block, B block) product pairs, sorted by target.

    Returns (ai, bi, ci, cj, kk): stored-block positions into a and b, the
    target block coordinates, and the contraction index. Sorted by
    (ci, cj, kk) so contributions to one target block run ascending in k.
    """
    n_k = a.layout.n_block_cols
    rows_a = a.block_rows_of_stored()
    order_a = np.argsort(a.col_idx, kind="stable")
    ka = a.col_idx[order_a]
    cnt_b = np.diff(b.row_ptr)

    partners = cnt_b[ka]
    total = int(partners.sum())
    if total == 0:
        z = np.empty(0, dtype=np.int64)
        return z, z, z, z, z
    ai = np.repeat(order_a, partners)
    run_starts = np.concatenate(([0], np.cumsum(partners)[:-1]))
    local = np.arange(total, dtype=np.int64) - np.repeat(run_starts, partners)
    bi = np.repeat(b.row_ptr[ka], partners) + local
    kk = np.repeat(ka, partners)

    if cfg.on_the_fly:
        keep = a.block_norms[ai] * b.block_norms[bi] > cfg.threshold
        ai, bi, kk = ai[keep], bi[keep], kk[keep]
        if ai.size == 0:
            z = np.empty(0, dtype=np.int64)
            return z, z, z, z, z

    ci = rows_a[ai]
    cj = b.col_idx[bi]
    sortkey = np.lexsort((kk, cj, ci))
    return ai[sortkey], bi[sortkey], ci[sortkey], cj[sortkey], kk[sortkey]


class BlockAccumulator:
    """Mutable staging area for block sums; freeze() yields a matrix.

    Contributions are kept as deferred batches of (rows, cols, payload stack)
    and merged once, in freeze(). The merge is a stable sort on the target
    coordinate, so repeated contributions to one block are summed in arrival
    order: bitwise identical to adding them one at a time. Accumulation is
    confined to the owner; the frozen matrices it consumes and produces stay
    immutable.
    """

    def __init__(self, layout: BlockLayout, seed: BlockCsrMatrix | None = None) -> None:
        self.layout = layout
        self._batches: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        if seed is not None:
            if seed.layout != layout:
                raise LayoutMismatchError("seed matrix layout differs from accumulator layout")
            self._append_matrix(seed)

    def _append_batch(self, rows: np.ndarray, cols: np.ndarray, payloads: np.ndarray) -> None:
        # payloads: (n, h, w) float64; one shape per batch. Blocks aimed at
        # the same target always share a shape, so splitting mixed-shape
        # input into per-shape batches never reorders within a target.
        if rows.size:
            self._batches.append((rows, cols, payloads))

    def _append_matrix(self, m: BlockCsrMatrix) -> None:
        if m._stack is not None:
            self._append_batch(m.block_rows_of_stored(), m.col_idx.copy(), m._stack.copy())
            return
        rows = m.block_rows_of_stored()
        by_shape: dict[tuple[int, int], list[int]] = {}
        for i, blk in enumerate(m.blocks):
            by_shape.setdefault(blk.shape, []).append(i)
        for idx in by_shape.values():
            sel = np.asarray(idx, dtype=np.int64)
            self._append_batch(rows[sel], m.col_idx[sel], np.stack([m.blocks[i] for i in idx]))

    def add_block(self, r: int, c: int, payload: np.ndarray) -> None:
        arr = np.asarray(payload, dtype=np.float64)
        self._append_batch(
            np.asarray([r], dtype=np.int64), np.asarray([c], dtype=np.int64), arr[None, :, :]
        )

    def add_matrix(self, m: BlockCsrMatrix) -> None:
        if m.layout != self.layout:
            raise LayoutMismatchError("accumulated matrix layout differs")
        self._append_matrix(m)

    def multiply_accumulate(
        self, a: BlockCsrMatrix, b: BlockCsrMatrix, cfg: FilterConfig
    ) -> int:
        """Add a*b under cfg; returns the number of block products performed.

        Contributions to each target block are summed in ascending
        contraction order, so results are bitwise reproducible for identical
        operands and config.
        """
        if a.layout.col_block_sizes != b.layout.row_block_sizes:
            raise LayoutMismatchError("contraction dimensions differ between operands")
        if (
            a.layout.row_block_sizes != self.layout.row_block_sizes
            or b.layout.col_block_sizes != self.layout.col_block_sizes
        ):
            raise LayoutMismatchError("product layout differs from accumulator layout")

        ai, bi, ci, cj, kk = _enumerate_pairs(a, b, cfg)
        n_pairs = int(ai.size)
        if n_pairs == 0:
            return 0

        row_sizes = np.asarray(a.layout.row_block_sizes, dtype=np.int64)
        mid_sizes = np.asarray(a.layout.col_block_sizes, dtype=np.int64)
        col_sizes = np.asarray(b.layout.col_block_sizes, dtype=np.int64)
        ra = row_sizes[ci]
        rm = mid_sizes[kk]
        rc = col_sizes[cj]

        # Outer grouping by target shape keeps each target's pairs contiguous
        # and ordered; inner grouping by contraction size batches the matmuls.
        shape_key = ra * (int(col_sizes.max()) + 1) + rc
        for key in np.unique(shape_key):
            sel = shape_key == key
            ai_s, bi_s, ci_s, cj_s = ai[sel], bi[sel], ci[sel], cj[sel]
            n_sel = int(ai_s.size)
            sra = int(ra[sel][0])
            src = int(rc[sel][0])
            prod = np.empty((n_sel, sra, src))
            rm_s = rm[sel]
            for m in np.unique(rm_s):
                pos = np.flatnonzero(rm_s == m)
                prod[pos] = np.matmul(a.gather(ai_s[pos]), b.gather(bi_s[pos]))
            boundary = np.empty(n_sel, dtype=bool)
            boundary[0] = True
            boundary[1:] = (ci_s[1:] != ci_s[:-1]) | (cj_s[1:] != cj_s[:-1])
            starts = np.flatnonzero(boundary)
            sums = np.add.reduceat(prod, starts, axis=0)
            self._append_batch(ci_s[starts], cj_s[starts], sums)
        return n_pairs

    @staticmethod
    def _merge(keys: np.ndarray, payloads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Sum payloads sharing a key, arrival order within each key."""
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        payloads = payloads[order]
        boundary = np.empty(keys.size, dtype=bool)
        boundary[0] = True
        boundary[1:] = keys[1:] != keys[:-1]
        starts = np.flatnonzero(boundary)
        return keys[starts], np.add.reduceat(payloads, starts, axis=0)

    def freeze(self) -> BlockCsrMatrix:
        nbr, nbc = self.layout.n_block_rows, self.layout.n_block_cols
        merged: list[tuple[np.ndarray, np.ndarray]] = []
        by_shape: dict[tuple[int, ...], list[tuple[np.ndarray, np.ndarray, np.ndarray]]] = {}
        for rows, cols, payloads in self._batches:
            by_shape.setdefault(payloads.shape[1:], []).append((rows, cols, payloads))
        for group in by_shape.values():
            keys = np.concatenate([r * nbc + c for r, c, _ in group])
            payloads = np.concatenate([p for _, _, p in group])
            merged.append(self._merge(keys, payloads))

        if not merged:
            return BlockCsrMatrix.empty(self.layout)
        if len(merged) == 1:
            keys, stack = merged[0]  # _merge leaves keys ascending
            norms = np.sqrt(np.einsum("nij,nij->n", stack, stack))
            counts = np.bincount(keys // nbc, minlength=nbr)
            row_ptr = np.concatenate(([0], np.cumsum(counts)))
            return BlockCsrMatrix(
                self.layout, row_ptr, keys % nbc, list(stack), norms, _stack=stack
            )

        # Mixed block shapes: distinct shapes never collide on a target, so
        # the per-shape merges partition the result.
        all_keys = np.concatenate([k for k, _ in merged])
        flat: list[np.ndarray] = []
        for _, sums in merged:
            flat.extend(sums)
        order = np.argsort(all_keys)
        keys = all_keys[order]
        blocks = [flat[i] for i in order]
        counts = np.bincount(keys // nbc, minlength=nbr)
        row_ptr = np.concatenate(([0], np.cumsum(counts)))
        return BlockCsrMatrix._with_stack(self.layout, row_ptr, keys % nbc, blocks)


# --------------------------------------------------------------------------
# public operations


def local_multiply_accumulate(
    c: BlockCsrMatrix, a: BlockCsrMatrix, b: BlockCsrMatrix, cfg: FilterConfig
) -> BlockCsrMatrix:
    """Return c + a*b with on-the-fly filtering; new blocks appear on demand."""
    acc = BlockAccumulator(c.layout, seed=c)
    acc.multiply_accumulate(a, b, cfg)
    return acc.freeze()


def post_filter(m: BlockCsrMatrix, cfg: FilterConfig) -> BlockCsrMatrix:
    """Drop stored blocks whose Frobenius norm is <= threshold."""
    if not cfg.post_filter:
        return m
    keep = m.block_norms > cfg.threshold
    if bool(keep.all()):
        return m
    rows = m.block_rows_of_stored()[keep]
    counts = np.bincount(rows, minlength=m.layout.n_block_rows).astype(np.int64)
    row_ptr = np.concatenate(([0], np.cumsum(counts)))
    kept_idx = np.flatnonzero(keep)
    blocks = [m.blocks[i] for i in kept_idx]
    return BlockCsrMatrix._with_stack(
        m.layout, row_ptr, m.col_idx[keep], blocks, m.block_norms[keep]
    )


def serial_spgemm_oracle(
    a: BlockCsrMatrix, b: BlockCsrMatrix, cfg: FilterConfig
) -> BlockCsrMatrix:
    """Single-process reference product with identical filtering semantics.

    Ground truth for every distributed run: same admissibility rule, same
    ascending contraction order, post-filter applied to the final result.
    """
    c_layout = BlockLayout(a.layout.row_block_sizes, b.layout.col_block_sizes)
    acc = BlockAccumulator(c_layout)
    n = acc.multiply_accumulate(a, b, cfg)
    logger.debug("serial oracle performed %d block products", n)
    return post_filter(acc.freeze(), cfg)


def add_accumulate(c: BlockCsrMatrix, partial: BlockCsrMatrix) -> BlockCsrMatrix:
    """Blockwise sum over the union pattern of c and partial."""
    if partial.layout != c.layout:
        raise LayoutMismatchError("cannot add matrices with different layouts")
    acc = BlockAccumulator(c.layout, seed=c)
    acc.add_matrix(partial)
    return acc.freeze()


def scale(m: BlockCsrMatrix, alpha: float) -> BlockCsrMatrix:
    blocks = [blk * alpha for blk in m.blocks]
    return BlockCsrMatrix._with_stack(
        m.layout, m.row_ptr, m.col_idx.copy(), blocks, m.block_norms * abs(alpha)
    )


def scale_add_identity(m: BlockCsrMatrix, alpha: float, beta: float) -> BlockCsrMatrix:
    """Return alpha*m + beta*I; the layout must be block-symmetric."""
    if not m.layout.is_square_symmetric():
        raise LayoutMismatchError("identity injection needs a block-symmetric layout")
    acc = BlockAccumulator(m.layout, seed=scale(m, alpha))
    for d, size in enumerate(m.layout.row_block_sizes):
        acc.add_block(d, d, beta * np.eye(size))
    return acc.freeze()


def frobenius_norm(m: BlockCsrMatrix) -> float:
    return float(np.sqrt(np.sum(m.block_norms**2)))


def frobenius_distance(a: BlockCsrMatrix, b: BlockCsrMatrix) -> float:
    """Frobenius norm of a - b over the union pattern."""
    if a.layout != b.layout:
        raise LayoutMismatchError("cannot compare matrices with different layouts")
    blocks_a = {(r, c): blk for r, c, blk in a.iter_blocks()}
    total = 0.0
    for r, c, blk in b.iter_blocks():
        other = blocks_a.pop((r, c), None)
        if other is None:
            total += float(np.einsum("ij,ij->", blk, blk))
        else:
            d = other - blk
            total += float(np.einsum("ij,ij->", d, d))
    for blk in blocks_a.values():
        total += float(np.einsum("ij,ij->", blk, blk))
    return float(np.sqrt(total))


def allclose_matrices(a: BlockCsrMatrix, b: BlockCsrMatrix, rtol: float = 1e-12) -> bool:
    ref = max(frobenius_norm(a), frobenius_norm(b))
    dist = frobenius_distance(a, b)
    if ref == 0.0:
        return dist == 0.0
    return dist <= rtol * ref


def matrix_checksum(m: BlockCsrMatrix) -> str:
    """Order-independent content digest used in run reports."""
    h = hashlib.sha256()
    h.update(np.asarray([m.layout.n_block_rows, m.layout.n_block_cols], dtype=np.int64).tobytes())
    rows = m.block_rows_of_stored()
    for i in np.lexsort((m.col_idx, rows)):
        h.update(np.asarray([rows[i], m.col_idx[i]], dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(m.blocks[i]).tobytes())
    return h.hexdigest()[:16]
