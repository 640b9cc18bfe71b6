"""Process-grid topologies, data distribution, and multiplication schedules.

The multiplication loop runs over a virtual contraction dimension
V = lcm(P_R, P_C). Block rows and columns are assigned to grid rows and
columns through a random permutation followed by a chunk map: permuted
index g belongs to chunk g mod V, and chunk u lives on grid row
u // (V/P_R) (respectively grid column u // (V/P_C)). On square grids this
degenerates to plain round-robin.

With a replication factor L > 1, the grid additionally splits into
side3d-sized layer tiles. The L ranks sharing a tile position form a
replication group: each member contracts V/L chunks per C panel and the
partial results are reduced onto the panel's home rank. Windows of L
consecutive steps share one chunk per rank, which is what allows A and B
panels to be reused across the window instead of re-fetched every step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blockcsr import BlockCsrMatrix, BlockLayout, LayoutMismatchError

logger = logging.getLogger(__name__)

__all__ = [
    "TopologyError",
    "DistributionMismatchError",
    "Topology",
    "validate_l",
    "try_validate_l",
    "valid_l_values",
    "Distribution",
    "make_distribution",
    "permuted_layout",
    "DistributedMatrix",
    "partition",
    "split_panel_by_col_chunk",
    "split_panel_by_row_chunk",
    "rank_coords_3d",
    "chunk_index",
    "a_source_rank",
    "b_source_rank",
    "FetchPlan",
    "ComputePlan",
    "CSendPlan",
    "RankSchedule",
    "MultiplySchedule",
    "build_schedule",
    "PtpRankSchedule",
    "build_ptp_schedule",
    "dump_schedule_csv",
]


class TopologyError(ValueError):
    """A replication factor violates the topology rules.

    The ``rule`` attribute names the violated rule.
    """

    def __init__(self, message: str, rule: str) -> None:
        super().__init__(message)
        self.rule = rule


class DistributionMismatchError(ValueError):
    """Operands of a distributed product do not share the required maps."""


# --------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class Topology:
    """A P_R x P_C process grid with replication factor L.

    Attributes:
        p_rows, p_cols: grid dimensions.
        v: virtual contraction dimension, lcm(p_rows, p_cols).
        l: replication factor (1 = plain 2D).
        l_r, l_c: how many layers split the row and column dimensions.
        side3d: edge length of one layer tile.
        n_ticks: reuse windows per multiplication, v // l.
        decomposition_3d: the (rows, cols, layers) shape of the 3D view.
    """

    p_rows: int
    p_cols: int
    v: int
    l: int
    l_r: int
    l_c: int
    side3d: int
    n_ticks: int
    decomposition_3d: tuple[int, int, int]

    @property
    def n_ranks(self) -> int:
        return self.p_rows * self.p_cols

    def rank_id(self, i: int, j: int) -> int:
        return i * self.p_cols + j

    def rank_coords(self, rank: int) -> tuple[int, int]:
        return rank // self.p_cols, rank % self.p_cols

    def all_ranks(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.p_rows) for j in range(self.p_cols)]

    # chunk ownership: chunk u of the virtual dimension
    def owner_grid_row(self, u: int) -> int:
        return u // (self.v // self.p_rows)

    def owner_grid_col(self, u: int) -> int:
        return u // (self.v // self.p_cols)

    def row_chunks_of(self, grid_row: int) -> range:
        w = self.v // self.p_rows
        return range(grid_row * w, (grid_row + 1) * w)

    def col_chunks_of(self, grid_col: int) -> range:
        w = self.v // self.p_cols
        return range(grid_col * w, (grid_col + 1) * w)


def validate_l(p_rows: int, p_cols: int, l: int) -> Topology:
    """Check the replication rules and derive the 3D decomposition.

    L = 1 is always valid. For non-square grids the larger dimension must be
    a multiple of the smaller, at most its square, and L must equal their
    ratio. For square grids L must be a perfect square whose root divides
    the grid dimension. In both regimes V must be a multiple of L so that
    the step loop splits into whole reuse windows.
    """
    if p_rows < 1 or p_cols < 1 or l < 1:
        raise TopologyError("grid dimensions and L must be positive", rule="nonpositive")
    v = math.lcm(p_rows, p_cols)
    if l == 1:
        side3d = max(p_rows, p_cols)
        return Topology(p_rows, p_cols, v, 1, 1, 1, side3d, v, (p_rows, p_cols, 1))

    if p_rows != p_cols:
        mx, mn = max(p_rows, p_cols), min(p_rows, p_cols)
        if mx % mn != 0:
            raise TopologyError(
                f"{mx} is not a multiple of {mn}", rule="non_multiple"
            )
        if mx > mn * mn:
            raise TopologyError(
                f"max dimension {mx} exceeds min squared {mn * mn}",
                rule="max_exceeds_min_squared",
            )
        if l != mx // mn:
            raise TopologyError(
                f"L must equal max/min = {mx // mn}, got {l}", rule="l_not_max_over_min"
            )
        l_r = l if p_rows > p_cols else 1
        l_c = l if p_cols > p_rows else 1
        decomposition = (mn, mx // l, l)
    else:
        root = math.isqrt(l)
        if root * root != l:
            raise TopologyError(f"L={l} is not a perfect square", rule="l_not_perfect_square")
        if p_rows % root != 0:
            raise TopologyError(
                f"sqrt(L)={root} does not divide grid dimension {p_rows}",
                rule="sqrt_l_not_dividing",
            )
        l_r = l_c = root
        decomposition = (p_rows // root, p_cols // root, l)

    if v % l != 0:
        raise TopologyError(
            f"V={v} is not a multiple of L={l}", rule="v_not_multiple_of_l"
        )
    side3d = max(p_rows, p_cols) // max(l_r, l_c)
    return Topology(p_rows, p_cols, v, l, l_r, l_c, side3d, v // l, decomposition)


def try_validate_l(p_rows: int, p_cols: int, l: int) -> tuple[Topology, str | None]:
    """validate_l with silent fallback to L=1; returns the rejection reason."""
    try:
        return validate_l(p_rows, p_cols, l), None
    except TopologyError as err:
        reason = f"L={l} invalid for {p_rows}x{p_cols} ({err.rule}); fell back to L=1"
        logger.warning(reason)
        return validate_l(p_rows, p_cols, 1), reason


def valid_l_values(p_rows: int, p_cols: int, candidates: list[int] | None = None) -> list[int]:
    if candidates is None:
        candidates = list(range(1, p_rows * p_cols + 1))
    out = []
    for l in candidates:
        try:
            validate_l(p_rows, p_cols, l)
            out.append(l)
        except TopologyError:
            pass
    return out


# --------------------------------------------------------------------------
# 3D coordinates and source-rank arithmetic


def rank_coords_3d(t: Topology, i: int, j: int) -> tuple[int, int, int, int]:
    """(i3d, j3d, layer, side3d) of grid rank (i, j)."""
    i3d = i // t.side3d
    j3d = j // t.side3d
    layer = j3d * t.l_r + i3d
    return i3d, j3d, layer, t.side3d


def chunk_index(t: Topology, i: int, j: int, layer: int, window: int) -> int:
    """Contraction chunk processed by rank (i,j) during a reuse window.

    Constant across the L steps of the window; window steps differ only in
    which layer pair they target. For L=1 this is the classical generalized
    Cannon sequence (i + j + step on square grids).
    """
    alpha = i % t.side3d
    beta = j % t.side3d
    return (
        alpha * (t.v // t.p_rows) + beta * (t.v // t.p_cols) + layer + window * t.l
    ) % t.v


def a_source_rank(t: Topology, i: int, j: int, layer: int, step: int) -> tuple[int, int]:
    """Grid rank holding the A panel needed by (i,j) at the given step.

    The step's window fixes the chunk; the step's position inside the window
    picks the row layer whose A panel is (re)filled at this step.
    """
    window = step // t.l
    m3 = step % t.l_r
    u = chunk_index(t, i, j, layer, window)
    m = m3 * t.side3d + i % t.side3d
    return m, t.owner_grid_col(u)


def b_source_rank(t: Topology, i: int, j: int, layer: int, step: int) -> tuple[int, int]:
    """Grid rank holding the B panel needed by (i,j) at the given step."""
    window = step // t.l
    n3 = (step // t.l_r) % t.l_c
    u = chunk_index(t, i, j, layer, window)
    n = n3 * t.side3d + j % t.side3d
    return t.owner_grid_row(u), n


# --------------------------------------------------------------------------
# distribution


@dataclass(frozen=True)
class Distribution:
    """Permutation plus chunk-based ownership for one matrix shape.

    row_perm[p] is the original block row placed at permuted position p
    (likewise col_perm). Ownership is a pure function of the permuted
    position: chunk = position mod V, owner = chunk // (V / grid dim).
    """

    topology: Topology
    row_perm: np.ndarray
    col_perm: np.ndarray
    row_position: np.ndarray = field(init=False, repr=False)
    col_position: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        for name, perm in (("row_perm", self.row_perm), ("col_perm", self.col_perm)):
            arr = np.asarray(perm, dtype=np.int64)
            if sorted(arr.tolist()) != list(range(arr.size)):
                raise ValueError(f"{name} is not a permutation")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "row_position", np.argsort(self.row_perm))
        object.__setattr__(self, "col_position", np.argsort(self.col_perm))

    def row_owner_of_position(self, pos: np.ndarray | int):
        return (np.asarray(pos) % self.topology.v) // (self.topology.v // self.topology.p_rows)

    def col_owner_of_position(self, pos: np.ndarray | int):
        return (np.asarray(pos) % self.topology.v) // (self.topology.v // self.topology.p_cols)


def make_distribution(layout: BlockLayout, topology: Topology, seed: int) -> Distribution:
    """Seeded random permutations. Symmetric layouts share one permutation
    across rows and columns so that chained products (X times X) contract
    consistently."""
    rng = np.random.default_rng(seed)
    row_perm = rng.permutation(layout.n_block_rows)
    if layout.is_square_symmetric():
        col_perm = row_perm.copy()
    else:
        col_perm = rng.permutation(layout.n_block_cols)
    return Distribution(topology, row_perm, col_perm)


def permuted_layout(layout: BlockLayout, d: Distribution) -> BlockLayout:
    rows = tuple(layout.row_block_sizes[r] for r in d.row_perm)
    cols = tuple(layout.col_block_sizes[c] for c in d.col_perm)
    return BlockLayout(rows, cols)


@dataclass
class DistributedMatrix:
    """A matrix split into per-rank panels.

    Panels are BlockCsrMatrix values in permuted global coordinates, so a
    block keeps one address across every rank that ever sees it. panels is
    indexed by rank id.
    """

    topology: Topology
    distribution: Distribution
    layout: BlockLayout
    panels: list[BlockCsrMatrix]

    def panel(self, i: int, j: int) -> BlockCsrMatrix:
        return self.panels[self.topology.rank_id(i, j)]

    def reassemble(self) -> BlockCsrMatrix:
        entries = []
        d = self.distribution
        for panel in self.panels:
            for p_row, p_col, blk in panel.iter_blocks():
                entries.append((int(d.row_perm[p_row]), int(d.col_perm[p_col]), blk))
        return BlockCsrMatrix.from_entries(self.layout, entries)

    def occupancy(self) -> float:
        stored = sum(p.stored_elements() for p in self.panels)
        return stored / (self.layout.total_rows * self.layout.total_cols)

    def panel_payload_bytes(self) -> list[int]:
        return [8 * p.stored_elements() for p in self.panels]


def partition(m: BlockCsrMatrix, d: Distribution, t: Topology) -> DistributedMatrix:
    """Split into per-rank panels; reassemble() inverts this bit-exactly."""
    if t is not d.topology:
        if t != d.topology:
            raise LayoutMismatchError("distribution was built for a different topology")
    if d.row_perm.size != m.layout.n_block_rows or d.col_perm.size != m.layout.n_block_cols:
        raise LayoutMismatchError("distribution permutations do not match the layout")
    perm_layout = permuted_layout(m.layout, d)
    per_rank: list[list[tuple[int, int, np.ndarray]]] = [[] for _ in range(t.n_ranks)]
    for r, c, blk in m.iter_blocks():
        p_row = int(d.row_position[r])
        p_col = int(d.col_position[c])
        i = int(d.row_owner_of_position(p_row))
        j = int(d.col_owner_of_position(p_col))
        per_rank[t.rank_id(i, j)].append((p_row, p_col, blk))
    panels = [BlockCsrMatrix.from_entries(perm_layout, entries) for entries in per_rank]
    return DistributedMatrix(t, d, m.layout, panels)


def split_panel_by_col_chunk(panel: BlockCsrMatrix, t: Topology) -> dict[int, BlockCsrMatrix]:
    """Sub-panels of an A panel keyed by contraction chunk (column mod V)."""
    groups: dict[int, list[tuple[int, int, np.ndarray]]] = {}
    for r, c, blk in panel.iter_blocks():
        groups.setdefault(c % t.v, []).append((r, c, blk))
    return {u: BlockCsrMatrix.from_entries(panel.layout, e) for u, e in groups.items()}


def split_panel_by_row_chunk(panel: BlockCsrMatrix, t: Topology) -> dict[int, BlockCsrMatrix]:
    """Sub-panels of a B panel keyed by contraction chunk (row mod V)."""
    groups: dict[int, list[tuple[int, int, np.ndarray]]] = {}
    for r, c, blk in panel.iter_blocks():
        groups.setdefault(r % t.v, []).append((r, c, blk))
    return {u: BlockCsrMatrix.from_entries(panel.layout, e) for u, e in groups.items()}


# --------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class FetchPlan:
    layer: int
    src: tuple[int, int]
    slot: int
    chunk: int


@dataclass(frozen=True)
class ComputePlan:
    step: int
    chunk: int
    a_slot: int
    b_slot: int
    target: tuple[int, int]  # (row layer, col layer) of the partial C panel


@dataclass(frozen=True)
class CSendPlan:
    after_step: int
    target: tuple[int, int]  # layer pair
    dst: tuple[int, int]  # home rank of that partial


@dataclass(frozen=True)
class RankSchedule:
    rank: tuple[int, int]
    coords3d: tuple[int, int, int]
    fetch_a: tuple[FetchPlan | None, ...]  # one entry per step
    fetch_b: tuple[FetchPlan | None, ...]
    computes: tuple[ComputePlan, ...]  # step s computed after step s's fetches land
    c_sends: tuple[CSendPlan, ...]
    c_recv_sources: tuple[tuple[tuple[int, int], int], ...]  # (rank, layer), ascending layer

    @property
    def nbuffers_a(self) -> int:
        slots = {f.slot for f in self.fetch_a if f is not None}
        return max(slots) + 1 if slots else 0


@dataclass(frozen=True)
class MultiplySchedule:
    topology: Topology
    nbuffers_a: int
    nbuffers_b: int
    ranks: dict[tuple[int, int], RankSchedule]


def _nbuffers_a(t: Topology) -> int:
    if t.l > 1 and t.p_rows == t.p_cols:
        return max(2, t.l_r)
    return 2


def build_schedule(t: Topology) -> MultiplySchedule:
    """Per-rank fetch/compute/reduce plan for the one-sided algorithm.

    Fetch flags refresh at every window boundary (step mod L == 0), each
    window issues l_r A fetches and l_c B fetches, slots rotate modulo the
    buffer counts, and the last window's computes are followed by partial-C
    sends to the other group members' home ranks.
    """
    nbuff_a = _nbuffers_a(t)
    nbuff_b = 2
    ranks: dict[tuple[int, int], RankSchedule] = {}
    for i, j in t.all_ranks():
        i3d, j3d, layer, side = rank_coords_3d(t, i, j)
        comm_a = [False] * t.l_r
        comm_b = [False] * t.l_c
        counter_a = counter_b = 0
        slot_a: dict[tuple[int, int], int] = {}
        slot_b: dict[tuple[int, int], int] = {}
        fetch_a: list[FetchPlan | None] = []
        fetch_b: list[FetchPlan | None] = []
        computes: list[ComputePlan] = []
        for s in range(t.v):
            if s % t.l == 0:
                comm_a = [True] * t.l_r
                comm_b = [True] * t.l_c
            w = s // t.l
            u = chunk_index(t, i, j, layer, w)
            m3 = s % t.l_r
            n3 = (s // t.l_r) % t.l_c

            fa = None
            if comm_a[m3]:
                comm_a[m3] = False
                slot = counter_a % nbuff_a
                counter_a += 1
                slot_a[(w, m3)] = slot
                fa = FetchPlan(m3, a_source_rank(t, i, j, layer, s), slot, u)
            fetch_a.append(fa)

            fb = None
            if comm_b[n3]:
                comm_b[n3] = False
                slot = counter_b % nbuff_b
                counter_b += 1
                slot_b[(w, n3)] = slot
                fb = FetchPlan(n3, b_source_rank(t, i, j, layer, s), slot, u)
            fetch_b.append(fb)

            computes.append(
                ComputePlan(s, u, slot_a[(w, m3)], slot_b[(w, n3)], (m3, n3))
            )

        c_sends: list[CSendPlan] = []
        if t.l > 1:
            for s in range(t.v - t.l, t.v):
                m3, n3 = s % t.l_r, (s // t.l_r) % t.l_c
                if (m3, n3) == (i3d, j3d):
                    continue
                home = (m3 * side + i % side, n3 * side + j % side)
                c_sends.append(CSendPlan(s, (m3, n3), home))

        recv_sources: list[tuple[tuple[int, int], int]] = []
        if t.l > 1:
            for pi in range(t.l_r):
                for pj in range(t.l_c):
                    if (pi, pj) == (i3d, j3d):
                        continue
                    peer = (pi * side + i % side, pj * side + j % side)
                    peer_layer = pj * t.l_r + pi
                    recv_sources.append((peer, peer_layer))
            recv_sources.sort(key=lambda x: x[1])

        ranks[(i, j)] = RankSchedule(
            (i, j),
            (i3d, j3d, layer),
            tuple(fetch_a),
            tuple(fetch_b),
            tuple(computes),
            tuple(c_sends),
            tuple(recv_sources),
        )
    return MultiplySchedule(t, nbuff_a, nbuff_b, ranks)


@dataclass(frozen=True)
class PtpRankSchedule:
    rank: tuple[int, int]
    recv_a_src: tuple[tuple[int, int], ...]  # per tick: who owns the A panel I use
    recv_b_src: tuple[tuple[int, int], ...]
    send_a_dst: tuple[tuple[int, int], ...]  # per tick: who uses my A panel
    send_b_dst: tuple[tuple[int, int], ...]
    chunks: tuple[int, ...]


def build_ptp_schedule(t: Topology) -> dict[tuple[int, int], PtpRankSchedule]:
    """Tick-by-tick shift plan for the point-to-point algorithm (always 2D).

    Transfers go owner to consumer along the L=1 source formulas; every rank
    sends its panel to exactly one consumer per tick per matrix.
    """
    flat = validate_l(t.p_rows, t.p_cols, 1)
    recv_a = {r: [] for r in flat.all_ranks()}
    recv_b = {r: [] for r in flat.all_ranks()}
    send_a = {r: [] for r in flat.all_ranks()}
    send_b = {r: [] for r in flat.all_ranks()}
    chunks = {r: [] for r in flat.all_ranks()}
    for step in range(flat.v):
        senders_a: dict[tuple[int, int], tuple[int, int]] = {}
        senders_b: dict[tuple[int, int], tuple[int, int]] = {}
        for i, j in flat.all_ranks():
            src_a = a_source_rank(flat, i, j, 0, step)
            src_b = b_source_rank(flat, i, j, 0, step)
            recv_a[(i, j)].append(src_a)
            recv_b[(i, j)].append(src_b)
            chunks[(i, j)].append(chunk_index(flat, i, j, 0, step))
            if src_a in senders_a:
                raise AssertionError(f"A panel {src_a} has two consumers at step {step}")
            if src_b in senders_b:
                raise AssertionError(f"B panel {src_b} has two consumers at step {step}")
            senders_a[src_a] = (i, j)
            senders_b[src_b] = (i, j)
        for r in flat.all_ranks():
            send_a[r].append(senders_a[r])
            send_b[r].append(senders_b[r])
    return {
        r: PtpRankSchedule(
            r,
            tuple(recv_a[r]),
            tuple(recv_b[r]),
            tuple(send_a[r]),
            tuple(send_b[r]),
            tuple(chunks[r]),
        )
        for r in flat.all_ranks()
    }


def dump_schedule_csv(schedule: MultiplySchedule, path: str | Path) -> None:
    """One row per (step, rank): fetch decisions, sources, and fetch slots.

    Columns: tick,rank_i,rank_j,fetchA,srcA_i,srcA_j,fetchB,srcB_i,srcB_j,bufA,bufB
    (src coordinates and slots are -1 on steps without the fetch).
    """
    lines = ["tick,rank_i,rank_j,fetchA,srcA_i,srcA_j,fetchB,srcB_i,srcB_j,bufA,bufB"]
    for s in range(schedule.topology.v):
        for (i, j), rs in sorted(schedule.ranks.items()):
            fa, fb = rs.fetch_a[s], rs.fetch_b[s]
            row = [
                s,
                i,
                j,
                1 if fa else 0,
                fa.src[0] if fa else -1,
                fa.src[1] if fa else -1,
                1 if fb else 0,
                fb.src[0] if fb else -1,
                fb.src[1] if fb else -1,
                fa.slot if fa else -1,
                fb.slot if fb else -1,
            ]
            lines.append(",".join(str(x) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")
