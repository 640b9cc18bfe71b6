"""Shared plumbing for the distributed multiplication engines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockcsr import BlockLayout, LayoutMismatchError
from .gridplan import (
    Distribution,
    DistributedMatrix,
    DistributionMismatchError,
    Topology,
    make_distribution,
    partition,
)
from .transport import Cluster, CommStats

__all__ = [
    "MultiplyResult",
    "aligned_distributions",
    "check_product_operands",
    "product_distribution",
    "product_layout",
    "distribute",
]


@dataclass
class MultiplyResult:
    """Outcome of one distributed product."""

    c: DistributedMatrix
    algorithm: str
    stats: CommStats  # merged over ranks
    per_rank_stats: list[CommStats]
    buffers: int  # panel buffers held per rank, windows included
    epoch: int
    realloc_events: int  # cumulative window growth events on the cluster
    fallback_reason: str | None = None

    @property
    def topology(self) -> Topology:
        return self.c.topology


def check_product_operands(cluster: Cluster, a: DistributedMatrix, b: DistributedMatrix) -> None:
    """Both operands must live on the cluster's grid and agree on the
    contraction: same middle permutation, same middle block sizes."""
    t = cluster.topology
    if a.topology != t or b.topology != t:
        raise DistributionMismatchError("operands are not distributed over this grid")
    if a.layout.col_block_sizes != b.layout.row_block_sizes:
        raise LayoutMismatchError("contraction dimensions differ between operands")
    if not np.array_equal(a.distribution.col_perm, b.distribution.row_perm):
        raise DistributionMismatchError(
            "operands disagree on the contraction permutation; "
            "distribute them with a shared middle permutation"
        )


def product_layout(a: DistributedMatrix, b: DistributedMatrix) -> BlockLayout:
    return BlockLayout(a.layout.row_block_sizes, b.layout.col_block_sizes)


def product_distribution(a: DistributedMatrix, b: DistributedMatrix) -> Distribution:
    return Distribution(a.topology, a.distribution.row_perm, b.distribution.col_perm)


def distribute(m, topology: Topology, seed: int) -> DistributedMatrix:
    """Partition with a fresh seeded distribution."""
    return partition(m, make_distribution(m.layout, topology, seed), topology)


def aligned_distributions(
    layout_a: BlockLayout, layout_b: BlockLayout, topology: Topology, seed: int
) -> tuple[Distribution, Distribution]:
    """Seeded distributions for a product's two operands.

    The middle permutation is shared so check_product_operands accepts the
    pair. Identical symmetric layouts get one distribution for both, which
    keeps chained products (X times X times ...) contractible.
    """
    if layout_a.col_block_sizes != layout_b.row_block_sizes:
        raise LayoutMismatchError("contraction dimensions differ between operands")
    if layout_a == layout_b and layout_a.is_square_symmetric():
        d = make_distribution(layout_a, topology, seed)
        return d, d
    rng = np.random.default_rng(seed)
    p_rows = rng.permutation(layout_a.n_block_rows)
    p_mid = rng.permutation(layout_a.n_block_cols)
    p_cols = rng.permutation(layout_b.n_block_cols)
    return (
        Distribution(topology, p_rows, p_mid),
        Distribution(topology, p_mid.copy(), p_cols),
    )
