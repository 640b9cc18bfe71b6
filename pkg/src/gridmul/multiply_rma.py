"""One-sided block-sparse product, optionally replicated over grid layers.

Ranks publish their A and B panels as read-only windows, then walk the
fetch/compute schedule: every iteration first completes the reads issued on
the previous one, then issues the reads the next step needs, then contracts
the step that just became safe. Completion is local; a rank never waits for
the panel owner to make progress.

With replication (L > 1) each rank accumulates L partial C panels, one per
layer target. After the last window the L - 1 foreign partials are sent to
their home ranks and reduced there in ascending source-layer order, so the
reduction is deterministic.

Window capacities live on the cluster and persist across products. A
preflight agreement sizes them to the global maximum panel before each
product; growth is counted, shrinking never happens.
"""

from __future__ import annotations

from .blockcsr import (
    BlockAccumulator,
    BlockCsrMatrix,
    BlockLayout,
    FilterConfig,
    post_filter,
)
from .engine import MultiplyResult, check_product_operands, product_distribution, product_layout
from .gridplan import (
    DistributedMatrix,
    MultiplySchedule,
    Topology,
    build_schedule,
    permuted_layout,
    split_panel_by_col_chunk,
    split_panel_by_row_chunk,
)
from .transport import (
    Cluster,
    CommStats,
    RankContext,
    parcel_of_chunks,
    parcel_of_matrix,
)

__all__ = ["rma_buffer_count", "rma_multiply"]


def rma_buffer_count(schedule: MultiplySchedule) -> int:
    """Panel buffers each rank holds: two published windows, the rotating
    fetch slots, the foreign partials, and one reduce staging slot."""
    t = schedule.topology
    extra = (t.l - 1) + (1 if t.l > 1 else 0)
    return 2 + schedule.nbuffers_a + schedule.nbuffers_b + extra


def _reduce_step(t: Topology, i3d: int, j3d: int) -> int:
    # the unique last-window step whose layer target is (i3d, j3d)
    for s in range(t.v - t.l, t.v):
        if (s % t.l_r, (s // t.l_r) % t.l_c) == (i3d, j3d):
            return s
    raise AssertionError("unreachable: every layer pair occurs once per window")


def rma_multiply(
    cluster: Cluster,
    a: DistributedMatrix,
    b: DistributedMatrix,
    cfg: FilterConfig | None = None,
    fallback_reason: str | None = None,
) -> MultiplyResult:
    """Multiply two distributed matrices with the one-sided schedule."""
    cfg = cfg or FilterConfig()
    t = cluster.topology
    check_product_operands(cluster, a, b)
    schedule = build_schedule(t)

    perm_rows = permuted_layout(a.layout, a.distribution).row_block_sizes
    perm_cols = permuted_layout(b.layout, b.distribution).col_block_sizes
    panel_layout = BlockLayout(perm_rows, perm_cols)

    epoch = cluster.begin_epoch()
    cluster.reset_stats()

    def body(ctx: RankContext) -> BlockCsrMatrix:
        i, j = ctx.coords
        rs = schedule.ranks[(i, j)]
        i3d, j3d, _layer = rs.coords3d

        a_parcel = parcel_of_chunks(split_panel_by_col_chunk(a.panel(i, j), t))
        b_parcel = parcel_of_chunks(split_panel_by_row_chunk(b.panel(i, j), t))
        ctx.preflight_resize_check("A", a_parcel.payload_bytes)
        ctx.preflight_resize_check("B", b_parcel.payload_bytes)
        ctx.publish_window("A", a_parcel)
        ctx.publish_window("B", b_parcel)
        ctx.barrier()  # every window visible before the first read

        slots_a: list[dict | None] = [None] * schedule.nbuffers_a
        slots_b: list[dict | None] = [None] * schedule.nbuffers_b
        accs: dict[tuple[int, int], BlockAccumulator] = {}
        pending: list[tuple] = []

        for it in range(t.v + 1):
            if pending:
                ctx.waitall([req for req, _, _ in pending])
                for req, kind, fp in pending:
                    (slots_a if kind == "A" else slots_b)[fp.slot] = req.data
                pending = []
            if it < t.v:
                fa, fb = rs.fetch_a[it], rs.fetch_b[it]
                if fa:
                    pending.append((ctx.rget(t.rank_id(*fa.src), "A", "A", tick=it), "A", fa))
                if fb:
                    pending.append((ctx.rget(t.rank_id(*fb.src), "B", "B", tick=it), "B", fb))
            if it > 0:
                cp = rs.computes[it - 1]
                a_sub = slots_a[cp.a_slot].get(cp.chunk)
                b_sub = slots_b[cp.b_slot].get(cp.chunk)
                if a_sub is not None and b_sub is not None:
                    acc = accs.get(cp.target)
                    if acc is None:
                        accs[cp.target] = acc = BlockAccumulator(panel_layout)
                    acc.multiply_accumulate(a_sub, b_sub, cfg)

        own = accs.get((i3d, j3d))
        if own is None:
            own = BlockAccumulator(panel_layout)

        if t.l > 1:
            send_reqs = []
            for cs in rs.c_sends:
                src_acc = accs.get(cs.target)
                partial = src_acc.freeze() if src_acc else BlockCsrMatrix.empty(panel_layout)
                send_reqs.append(
                    ctx.isend(
                        t.rank_id(*cs.dst),
                        ("C", cs.target, i, j),
                        parcel_of_matrix(partial),
                        "C",
                        tick=cs.after_step,
                    )
                )
            own_step = _reduce_step(t, i3d, j3d)
            for peer, _peer_layer in rs.c_recv_sources:  # ascending source layer
                req = ctx.irecv(t.rank_id(*peer), ("C", (i3d, j3d), *peer), "C", tick=own_step)
                ctx.waitall([req])
                own.add_matrix(req.data)
            if send_reqs:
                ctx.waitall(send_reqs)

        return post_filter(own.freeze(), cfg)

    panels = cluster.run(body)
    per_rank = list(cluster.stats)
    c = DistributedMatrix(t, product_distribution(a, b), product_layout(a, b), panels)
    return MultiplyResult(
        c=c,
        algorithm="rma",
        stats=CommStats.merged(per_rank),
        per_rank_stats=per_rank,
        buffers=rma_buffer_count(schedule),
        epoch=epoch,
        realloc_events=cluster.total_realloc_events(),
        fallback_reason=fallback_reason,
    )
