"""In-process multi-rank runtime with point-to-point and one-sided transfer.

Each logical rank runs on its own thread. Point-to-point messages go through
per-rank mailboxes: isend deposits immediately, irecv matches by tag, and
waitall synchronizes both endpoints (a send completes only when the receiver
has consumed the message). One-sided transfers read published read-only
windows; completion is purely local to the requester, the owner never
participates.

Byte accounting is exact and split into payload (8 bytes per stored matrix
element) and metadata (header plus per-block coordinates). Payload bytes are
counted once per transfer, at the receiver for point-to-point and at the
requester for one-sided reads; self-transfers count like any other.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from .blockcsr import BlockCsrMatrix
from .gridplan import Topology

logger = logging.getLogger(__name__)

__all__ = [
    "TransportError",
    "TransportTimeout",
    "WindowEpochError",
    "RankFailure",
    "CommStats",
    "Parcel",
    "parcel_of_chunks",
    "parcel_of_matrix",
    "Cluster",
    "RankContext",
    "spawn_ranks",
    "write_trace_csv",
]

_POLL = 0.02
_LARGE_GRID_STACK = 512 * 1024  # thread stacks when spawning very wide grids


class TransportError(RuntimeError):
    """Communication runtime failure."""


class TransportTimeout(TransportError):
    """A wait outlived the timeout; almost always a schedule bug."""


class WindowEpochError(TransportError):
    """A one-sided read targeted a window from another multiplication."""


class RankFailure(TransportError):
    """One or more rank bodies raised; carries the lowest failed rank."""

    def __init__(self, failures: list[tuple[int, BaseException]]) -> None:
        failures = sorted(failures, key=lambda f: f[0])
        self.rank = failures[0][0]
        self.cause = failures[0][1]
        super().__init__(
            f"rank {self.rank} failed: {self.cause!r}"
            + (f" (+{len(failures) - 1} more ranks)" if len(failures) > 1 else "")
        )


class _Aborted(TransportError):
    """Secondary failure: a wait gave up because some other rank died."""


# --------------------------------------------------------------------------
# counters and payload wrappers


@dataclass
class CommStats:
    """Per-rank transfer counters, split by panel kind."""

    bytes_a: int = 0
    bytes_b: int = 0
    bytes_c: int = 0
    metadata_a: int = 0
    metadata_b: int = 0
    metadata_c: int = 0
    msgs_a: int = 0
    msgs_b: int = 0
    msgs_c: int = 0
    waitall_events: int = 0

    def record(self, kind: str, payload: int, metadata: int) -> None:
        k = kind.lower()
        setattr(self, f"bytes_{k}", getattr(self, f"bytes_{k}") + payload)
        setattr(self, f"metadata_{k}", getattr(self, f"metadata_{k}") + metadata)
        setattr(self, f"msgs_{k}", getattr(self, f"msgs_{k}") + 1)

    @property
    def payload_total(self) -> int:
        return self.bytes_a + self.bytes_b + self.bytes_c

    def as_dict(self) -> dict[str, int]:
        return {
            "bytes_a": self.bytes_a,
            "bytes_b": self.bytes_b,
            "bytes_c": self.bytes_c,
            "metadata_a": self.metadata_a,
            "metadata_b": self.metadata_b,
            "metadata_c": self.metadata_c,
            "msgs_a": self.msgs_a,
            "msgs_b": self.msgs_b,
            "msgs_c": self.msgs_c,
            "waitall_events": self.waitall_events,
        }

    @staticmethod
    def merged(stats: Iterable["CommStats"]) -> "CommStats":
        out = CommStats()
        for s in stats:
            for name in out.as_dict():
                setattr(out, name, getattr(out, name) + getattr(s, name))
        return out


def _matrix_bytes(m: BlockCsrMatrix) -> tuple[int, int]:
    # payload: stored elements; metadata: 3-word header + (row, col) per block
    return 8 * m.stored_elements(), 24 + 8 * m.n_blocks


@dataclass(frozen=True)
class Parcel:
    """A transfer unit: the data object plus its accounted sizes."""

    data: Any
    payload_bytes: int
    metadata_bytes: int


def parcel_of_chunks(chunks: dict[int, BlockCsrMatrix]) -> Parcel:
    """Panel shipped as sub-panels keyed by contraction chunk."""
    payload = meta = 0
    for sub in chunks.values():
        p, m = _matrix_bytes(sub)
        payload += p
        meta += m
    return Parcel(chunks, payload, 24 + meta)


def parcel_of_matrix(m: BlockCsrMatrix) -> Parcel:
    payload, meta = _matrix_bytes(m)
    return Parcel(m, payload, meta)


# --------------------------------------------------------------------------
# internal plumbing


class _Message:
    __slots__ = ("parcel", "src", "kind", "tick", "consumed")

    def __init__(self, parcel: Parcel, src: int, kind: str, tick: int) -> None:
        self.parcel = parcel
        self.src = src
        self.kind = kind
        self.tick = tick
        self.consumed = threading.Event()


class _Mailbox:
    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._slots: dict[Any, _Message] = {}

    def deposit(self, key: Any, msg: _Message) -> None:
        with self._cond:
            if key in self._slots:
                raise TransportError(f"duplicate message tag {key!r}")
            self._slots[key] = msg
            self._cond.notify_all()

    def take(self, key: Any, deadline: float, abort: threading.Event) -> _Message:
        with self._cond:
            while key not in self._slots:
                if abort.is_set():
                    raise _Aborted("another rank failed")
                if time.monotonic() > deadline:
                    raise TransportTimeout(
                        f"no message for tag {key!r}; the schedule never sent it"
                    )
                self._cond.wait(_POLL)
            return self._slots.pop(key)


class _Barrier:
    """Abort-aware reusable barrier."""

    def __init__(self, n: int) -> None:
        self._n = n
        self._cond = threading.Condition()
        self._count = 0
        self._generation = 0

    def wait(self, deadline: float, abort: threading.Event) -> None:
        with self._cond:
            gen = self._generation
            self._count += 1
            if self._count == self._n:
                self._count = 0
                self._generation += 1
                self._cond.notify_all()
                return
            while self._generation == gen:
                if abort.is_set():
                    raise _Aborted("another rank failed")
                if time.monotonic() > deadline:
                    raise TransportTimeout("barrier timed out")
                self._cond.wait(_POLL)


class _Window:
    __slots__ = ("parcel", "epoch", "serve_count")

    def __init__(self, parcel: Parcel, epoch: int) -> None:
        self.parcel = parcel
        self.epoch = epoch
        self.serve_count = 0


# --------------------------------------------------------------------------
# requests


class _SendRequest:
    __slots__ = ("msg",)

    def __init__(self, msg: _Message) -> None:
        self.msg = msg


class _RecvRequest:
    __slots__ = ("src", "key", "kind", "tick", "data")

    def __init__(self, src: int, key: Any, kind: str, tick: int) -> None:
        self.src = src
        self.key = key
        self.kind = kind
        self.tick = tick
        self.data: Any = None


class _RgetRequest:
    __slots__ = ("owner", "window_key", "kind", "tick", "epoch", "data")

    def __init__(self, owner: int, window_key: str, kind: str, tick: int, epoch: int) -> None:
        self.owner = owner
        self.window_key = window_key
        self.kind = kind
        self.tick = tick
        self.epoch = epoch
        self.data: Any = None


# --------------------------------------------------------------------------
# cluster


class Cluster:
    """A reusable set of logical ranks over one topology.

    Window capacities and reallocation counts persist across multiplications
    run on the same cluster, so repeated products (the sign iteration) only
    regrow windows when a panel outgrows every earlier one.
    """

    def __init__(self, topology: Topology, timeout: float = 30.0, trace: bool = False) -> None:
        self.topology = topology
        self.timeout = timeout
        self.trace_enabled = trace
        n = topology.n_ranks
        self._mailboxes = [_Mailbox() for _ in range(n)]
        self._barrier = _Barrier(n)
        self._abort = threading.Event()
        self._failures: list[tuple[int, BaseException]] = []
        self._failure_lock = threading.Lock()
        self._window_lock = threading.Lock()
        self._windows: dict[tuple[int, str], _Window] = {}
        self.window_capacity: dict[tuple[int, str], int] = {}
        self.realloc_events: dict[tuple[int, str], int] = {}
        self._reduce_values: list[int] = [0] * n
        self.epoch = 0
        self.stats: list[CommStats] = [CommStats() for _ in range(n)]
        self.trace_rows: list[list[tuple]] = [[] for _ in range(n)]
        self._ledger: dict[str, int] = {"A": 0, "B": 0, "C": 0}
        self._ledger_lock = threading.Lock()

    # -- lifecycle --------------------------------------------------------

    def begin_epoch(self) -> int:
        self.epoch += 1
        return self.epoch

    def reset_stats(self) -> None:
        """Zero the per-rank counters; traces keep accumulating across epochs."""
        n = self.topology.n_ranks
        self.stats = [CommStats() for _ in range(n)]
        self._ledger = {"A": 0, "B": 0, "C": 0}

    def clear_trace(self) -> None:
        self.trace_rows = [[] for _ in range(self.topology.n_ranks)]

    def run(self, body: Callable[["RankContext"], Any]) -> list[Any]:
        """Run one rank body per grid position; returns per-rank results.

        Any rank's exception aborts the others' pending waits; the collected
        failure is re-raised as RankFailure naming the lowest failed rank.
        """
        n = self.topology.n_ranks
        self._abort.clear()
        self._failures.clear()
        results: list[Any] = [None] * n

        def wrapper(rank: int) -> None:
            ctx = RankContext(self, rank)
            try:
                results[rank] = body(ctx)
            except _Aborted:
                pass  # collateral damage, the culprit is recorded elsewhere
            except BaseException as exc:  # noqa: BLE001 - report any rank failure
                with self._failure_lock:
                    self._failures.append((rank, exc))
                self._abort.set()

        old_stack = None
        if n > 256:
            old_stack = threading.stack_size(_LARGE_GRID_STACK)
        try:
            threads = [threading.Thread(target=wrapper, args=(r,), name=f"rank-{r}") for r in range(n)]
        finally:
            if old_stack is not None:
                threading.stack_size(old_stack)
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        if self._failures:
            raise RankFailure(self._failures)
        return results

    # -- global accounting --------------------------------------------------

    def merged_stats(self) -> CommStats:
        return CommStats.merged(self.stats)

    def ledger_totals(self) -> dict[str, int]:
        """Sender-side payload totals, audited against per-rank stats."""
        with self._ledger_lock:
            totals = dict(self._ledger)
        with self._window_lock:
            for (owner, key), w in self._windows.items():
                kind = "A" if key.startswith("A") else "B"
                totals[kind] += w.serve_count * w.parcel.payload_bytes
        return totals

    def total_realloc_events(self) -> int:
        return sum(self.realloc_events.values())

    def all_trace_rows(self) -> list[tuple]:
        rows = [row for per_rank in self.trace_rows for row in per_rank]
        rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
        return rows

    def _ledger_add(self, kind: str, payload: int) -> None:
        with self._ledger_lock:
            self._ledger[kind] += payload


def spawn_ranks(topology: Topology, body: Callable[["RankContext"], Any]) -> list[Any]:
    """One-shot convenience: fresh cluster, run, return per-rank results."""
    return Cluster(topology).run(body)


# --------------------------------------------------------------------------
# per-rank handle


class RankContext:
    """The transport API visible to one logical rank."""

    def __init__(self, cluster: Cluster, rank: int) -> None:
        self.cluster = cluster
        self.rank = rank
        self.coords = cluster.topology.rank_coords(rank)
        self.topology = cluster.topology
        self.stats = cluster.stats[rank]
        self._trace = cluster.trace_rows[rank]

    # -- helpers ------------------------------------------------------------

    def _deadline(self) -> float:
        return time.monotonic() + self.cluster.timeout

    def _record(self, kind: str, parcel: Parcel, tick: int, src: int, dst: int) -> None:
        self.stats.record(kind, parcel.payload_bytes, parcel.metadata_bytes)
        if self.cluster.trace_enabled:
            self._trace.append(
                (self.cluster.epoch, tick, self.rank, kind, parcel.payload_bytes, src, dst)
            )

    # -- point-to-point -------------------------------------------------------

    def isend(self, dst: int, tag: Any, parcel: Parcel, kind: str, tick: int = 0) -> _SendRequest:
        msg = _Message(parcel, self.rank, kind, tick)
        self.cluster._mailboxes[dst].deposit((self.cluster.epoch, tag), msg)
        self.cluster._ledger_add(kind, parcel.payload_bytes)
        return _SendRequest(msg)

    def irecv(self, src: int, tag: Any, kind: str, tick: int = 0) -> _RecvRequest:
        return _RecvRequest(src, (self.cluster.epoch, tag), kind, tick)

    def waitall(self, requests: Iterable[Any]) -> None:
        """Complete a batch of requests.

        Receives and one-sided reads finish first (a receive releases its
        sender), then sends are waited on. Sends deposit eagerly at isend, so
        a batch mixing both directions of an exchange cannot deadlock.
        """
        deadline = self._deadline()
        abort = self.cluster._abort
        self.stats.waitall_events += 1
        sends: list[_SendRequest] = []
        for req in requests:
            if isinstance(req, _RecvRequest):
                msg = self.cluster._mailboxes[self.rank].take(req.key, deadline, abort)
                if msg.src != req.src:
                    raise TransportError(
                        f"tag {req.key!r}: expected sender {req.src}, got {msg.src}"
                    )
                req.data = msg.parcel.data
                self._record(req.kind, msg.parcel, req.tick, msg.src, self.rank)
                msg.consumed.set()
            elif isinstance(req, _SendRequest):
                sends.append(req)
            elif isinstance(req, _RgetRequest):
                self._complete_rget(req)
            else:
                raise TypeError(f"not a transport request: {req!r}")
        for req in sends:
            while not req.msg.consumed.wait(_POLL):
                if abort.is_set():
                    raise _Aborted("another rank failed")
                if time.monotonic() > deadline:
                    raise TransportTimeout(
                        "send never consumed; the schedule has no matching receive"
                    )

    # -- one-sided ------------------------------------------------------------

    def publish_window(self, key: str, parcel: Parcel) -> None:
        cap = self.cluster.window_capacity.get((self.rank, key), 0)
        if parcel.payload_bytes > cap:
            raise TransportError(
                f"window {key} on rank {self.rank}: payload {parcel.payload_bytes} "
                f"exceeds reserved capacity {cap}; preflight missing"
            )
        with self.cluster._window_lock:
            self.cluster._windows[(self.rank, key)] = _Window(parcel, self.cluster.epoch)

    def rget(self, owner: int, key: str, kind: str, tick: int = 0) -> _RgetRequest:
        """Initiate a one-sided read; completes locally at waitall."""
        return _RgetRequest(owner, key, kind, tick, self.cluster.epoch)

    def _complete_rget(self, req: _RgetRequest) -> None:
        with self.cluster._window_lock:
            w = self.cluster._windows.get((req.owner, req.window_key))
            if w is None:
                raise WindowEpochError(
                    f"rank {req.owner} has no published window {req.window_key!r}"
                )
            if w.epoch != req.epoch:
                raise WindowEpochError(
                    f"window {req.window_key!r} on rank {req.owner} is from epoch "
                    f"{w.epoch}, read requested epoch {req.epoch}"
                )
            w.serve_count += 1
            parcel = w.parcel
        req.data = parcel.data
        self._record(req.kind, parcel, req.tick, req.owner, self.rank)

    def preflight_resize_check(self, key: str, required_bytes: int) -> int:
        """Agree on the largest window payload; grow capacity only if needed.

        Returns the global maximum. Reallocation (a capacity increase) is
        counted per rank and window; shrinking never happens.
        """
        global_max = self.allreduce_max(required_bytes)
        cap_key = (self.rank, key)
        cap = self.cluster.window_capacity.get(cap_key, 0)
        if global_max > cap:
            self.cluster.window_capacity[cap_key] = global_max
            self.cluster.realloc_events[cap_key] = (
                self.cluster.realloc_events.get(cap_key, 0) + 1
            )
            logger.debug("rank %d window %s grown %d -> %d bytes", self.rank, key, cap, global_max)
        return global_max

    # -- collectives ------------------------------------------------------------

    def barrier(self) -> None:
        self.cluster._barrier.wait(self._deadline(), self.cluster._abort)

    def allreduce_max(self, value: int) -> int:
        self.cluster._reduce_values[self.rank] = value
        self.barrier()
        result = max(self.cluster._reduce_values)
        self.barrier()
        return result


def write_trace_csv(cluster: Cluster, path: str | Path) -> None:
    """Merged per-rank transfer log: epoch,tick,rank,kind,bytes,src_rank,dst_rank."""
    lines = ["epoch,tick,rank,kind,bytes,src_rank,dst_rank"]
    for row in cluster.all_trace_rows():
        lines.append(",".join(str(x) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")
