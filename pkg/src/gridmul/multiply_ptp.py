"""Point-to-point block-sparse product on a flat 2D grid.

Every tick each rank sends its own A and B panels to the single rank that
contracts them next, and receives the panels it needs, so panels travel
owner to consumer directly instead of hopping around a ring. An explicit
pre-shift delivers the tick-0 panels before the pipeline starts; it is the
only transfer traced at a negative tick.

Per rank the engine holds exactly four panel buffers: its two resident
panels (which double as send sources) and the two in-flight receive panels.
C never moves; it accumulates in place.
"""

from __future__ import annotations

from .blockcsr import BlockAccumulator, BlockCsrMatrix, BlockLayout, FilterConfig, post_filter
from .engine import MultiplyResult, check_product_operands, product_distribution, product_layout
from .gridplan import (
    DistributedMatrix,
    build_ptp_schedule,
    permuted_layout,
    split_panel_by_col_chunk,
    split_panel_by_row_chunk,
)
from .transport import Cluster, CommStats, RankContext, parcel_of_chunks

__all__ = ["PTP_BUFFERS", "cannon_multiply"]

PTP_BUFFERS = 4


def cannon_multiply(
    cluster: Cluster,
    a: DistributedMatrix,
    b: DistributedMatrix,
    cfg: FilterConfig | None = None,
) -> MultiplyResult:
    """Multiply two distributed matrices with the point-to-point schedule."""
    cfg = cfg or FilterConfig()
    t = cluster.topology
    if t.l != 1:
        raise ValueError("the point-to-point engine runs on flat grids only (L = 1)")
    check_product_operands(cluster, a, b)
    schedule = build_ptp_schedule(t)

    perm_rows = permuted_layout(a.layout, a.distribution).row_block_sizes
    perm_cols = permuted_layout(b.layout, b.distribution).col_block_sizes
    panel_layout = BlockLayout(perm_rows, perm_cols)

    epoch = cluster.begin_epoch()
    cluster.reset_stats()

    def body(ctx: RankContext) -> BlockCsrMatrix:
        i, j = ctx.coords
        plan = schedule[(i, j)]
        my_a = parcel_of_chunks(split_panel_by_col_chunk(a.panel(i, j), t))
        my_b = parcel_of_chunks(split_panel_by_row_chunk(b.panel(i, j), t))
        acc = BlockAccumulator(panel_layout)

        def transfers(step: int, tick: int) -> list:
            """Send own panels toward step's consumers, receive step's panels."""
            sa, sb = plan.send_a_dst[step], plan.send_b_dst[step]
            ra, rb = plan.recv_a_src[step], plan.recv_b_src[step]
            reqs = [
                ctx.isend(t.rank_id(*sa), ("A", step, i, j), my_a, "A", tick=tick),
                ctx.isend(t.rank_id(*sb), ("B", step, i, j), my_b, "B", tick=tick),
                ctx.irecv(t.rank_id(*ra), ("A", step, *ra), "A", tick=tick),
                ctx.irecv(t.rank_id(*rb), ("B", step, *rb), "B", tick=tick),
            ]
            return reqs

        pre = transfers(0, tick=-1)
        ctx.waitall(pre)
        cur_a, cur_b = pre[2].data, pre[3].data

        for s in range(t.v):
            pending = transfers(s + 1, tick=s) if s + 1 < t.v else []
            u = plan.chunks[s]
            a_sub = cur_a.get(u)
            b_sub = cur_b.get(u)
            if a_sub is not None and b_sub is not None:
                acc.multiply_accumulate(a_sub, b_sub, cfg)
            if pending:
                ctx.waitall(pending)
                cur_a, cur_b = pending[2].data, pending[3].data

        return post_filter(acc.freeze(), cfg)

    panels = cluster.run(body)
    per_rank = list(cluster.stats)
    c = DistributedMatrix(t, product_distribution(a, b), product_layout(a, b), panels)
    return MultiplyResult(
        c=c,
        algorithm="ptp",
        stats=CommStats.merged(per_rank),
        per_rank_stats=per_rank,
        buffers=PTP_BUFFERS,
        epoch=epoch,
        realloc_events=cluster.total_realloc_events(),
    )
