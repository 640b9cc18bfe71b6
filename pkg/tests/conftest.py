"""Shared fixtures: seeded matrices and brute-force schedule checkers."""

from __future__ import annotations

import numpy as np

from gridmul.blockcsr import BlockCsrMatrix, BlockLayout
from gridmul.gridplan import Topology, build_schedule


def random_block_matrix(
    rng: np.random.Generator,
    layout: BlockLayout,
    occupancy: float = 0.5,
    magnitude_spread: float = 0.0,
) -> BlockCsrMatrix:
    """Random matrix with roughly the requested fraction of blocks stored.

    magnitude_spread > 0 scales each block by 10**uniform(-spread, 0) so that
    block norms span several decades, which is what filter tests need.
    """
    entries = []
    for r in range(layout.n_block_rows):
        for c in range(layout.n_block_cols):
            if rng.random() >= occupancy:
                continue
            blk = rng.standard_normal(layout.block_shape(r, c))
            if magnitude_spread > 0.0:
                blk = blk * 10.0 ** rng.uniform(-magnitude_spread, 0.0)
            entries.append((r, c, blk))
    return BlockCsrMatrix.from_entries(layout, entries)


def random_symmetric_matrix(
    rng: np.random.Generator,
    layout: BlockLayout,
    occupancy: float = 0.5,
) -> BlockCsrMatrix:
    """Symmetric random matrix: blocks mirrored across the diagonal."""
    assert layout.is_square_symmetric()
    entries = []
    for r in range(layout.n_block_rows):
        for c in range(r, layout.n_block_cols):
            if r != c and rng.random() >= occupancy:
                continue
            blk = rng.standard_normal(layout.block_shape(r, c))
            if r == c:
                blk = (blk + blk.T) / 2.0
                entries.append((r, c, blk))
            else:
                entries.append((r, c, blk))
                entries.append((c, r, blk.T.copy()))
    return BlockCsrMatrix.from_entries(layout, entries)


# --------------------------------------------------------------------------
# brute-force schedule verification (also backs the acceptance suite)


def coverage_violations(t: Topology) -> list[str]:
    """Check that each C panel receives every contraction chunk exactly once.

    Collects, per home rank, the chunks contributed by all replication-group
    members across all steps; a correct schedule yields exactly [0, V).
    """
    schedule = build_schedule(t)
    contributions: dict[tuple[int, int], list[int]] = {r: [] for r in t.all_ranks()}
    for (i, j), rs in schedule.ranks.items():
        for cp in rs.computes:
            m3, n3 = cp.target
            home = (m3 * t.side3d + i % t.side3d, n3 * t.side3d + j % t.side3d)
            contributions[home].append(cp.chunk)
    bad = []
    for home, chunks in contributions.items():
        if sorted(chunks) != list(range(t.v)):
            bad.append(f"home {home}: chunks {sorted(chunks)}")
    return bad


def fetch_source_violations(t: Topology) -> list[str]:
    """Check that every fetch targets a rank that actually owns the chunk."""
    schedule = build_schedule(t)
    bad = []
    for (i, j), rs in schedule.ranks.items():
        for fp in rs.fetch_a:
            if fp is None:
                continue
            m, k = fp.src
            if t.owner_grid_col(fp.chunk) != k:
                bad.append(f"A fetch at rank ({i},{j}): col {k} does not own chunk {fp.chunk}")
            if m % t.side3d != i % t.side3d:
                bad.append(f"A fetch at rank ({i},{j}): row {m} outside layer tile")
        for fp in rs.fetch_b:
            if fp is None:
                continue
            k, n = fp.src
            if t.owner_grid_row(fp.chunk) != k:
                bad.append(f"B fetch at rank ({i},{j}): row {k} does not own chunk {fp.chunk}")
            if n % t.side3d != j % t.side3d:
                bad.append(f"B fetch at rank ({i},{j}): col {n} outside layer tile")
    return bad


def slot_read_violations(t: Topology) -> list[str]:
    """Check that no fetch overwrites a buffer slot before its last read.

    A fetch issued at step s lands by the waitall preceding step s's
    compute, so the compute of step s observes exactly the fetches of steps
    <= s. The slot each compute reads must still hold the fetch it expects.
    """
    schedule = build_schedule(t)
    bad = []
    for rank, rs in schedule.ranks.items():
        visible_a: dict[int, tuple[int, int]] = {}
        visible_b: dict[int, tuple[int, int]] = {}
        for s in range(t.v):
            w = s // t.l
            if rs.fetch_a[s] is not None:
                visible_a[rs.fetch_a[s].slot] = (w, rs.fetch_a[s].layer)
            if rs.fetch_b[s] is not None:
                visible_b[rs.fetch_b[s].slot] = (w, rs.fetch_b[s].layer)
            cp = rs.computes[s]
            m3, n3 = cp.target
            if visible_a.get(cp.a_slot) != (w, m3):
                bad.append(f"rank {rank} step {s}: A slot {cp.a_slot} holds {visible_a.get(cp.a_slot)}, wanted {(w, m3)}")
            if visible_b.get(cp.b_slot) != (w, n3):
                bad.append(f"rank {rank} step {s}: B slot {cp.b_slot} holds {visible_b.get(cp.b_slot)}, wanted {(w, n3)}")
    return bad


def symmetric_with_spectrum(rng: np.random.Generator, layout: BlockLayout,
                            eigenvalues: np.ndarray) -> BlockCsrMatrix:
    """Dense symmetric matrix with a prescribed spectrum (random eigenbasis)."""
    n = layout.total_rows
    assert eigenvalues.shape == (n,)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    dense = (q * eigenvalues) @ q.T
    dense = (dense + dense.T) / 2.0
    return BlockCsrMatrix.from_dense(dense, layout)


def dense_sign_oracle(dense: np.ndarray) -> np.ndarray:
    """sign(X) for symmetric X via the eigendecomposition."""
    w, q = np.linalg.eigh((dense + dense.T) / 2.0)
    return (q * np.sign(w)) @ q.T
