"""Newton-Schulz matrix sign iteration over the distributed engines.

Each iteration forms X_{n+1} = (1/2) X_n (3I - X_n^2) with exactly two
distributed products: Y = X^2, then X * (3I - Y). Both products are
post-filtered by the engine; the cheap scale and identity-shift steps happen
panel-locally on the driver thread. Convergence is declared on the relative
Frobenius increment, which needs no gathering beyond panel norms.

Inputs must be symmetric in layout and distribution (shared row/column
permutation); that is what lets X flow into both operand slots of each
product unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blockcsr import (
    BlockCsrMatrix,
    FilterConfig,
    frobenius_distance,
    scale,
)
from .engine import MultiplyResult
from .gridplan import DistributedMatrix
from .multiply_ptp import cannon_multiply
from .multiply_rma import rma_multiply
from .transport import Cluster

__all__ = [
    "DivergenceError",
    "SignRunConfig",
    "SignIterationRow",
    "SignReport",
    "sign_iterate",
    "spectral_scale",
    "write_sign_report_csv",
]

_GROWTH_LIMIT = 3  # consecutive delta increases before declaring divergence


class DivergenceError(RuntimeError):
    """The iteration left the convergence basin instead of contracting."""


@dataclass(frozen=True)
class SignRunConfig:
    max_iterations: int = 30
    convergence_tolerance: float = 1e-10
    filter: FilterConfig = field(default_factory=FilterConfig)
    algorithm: str = "rma"
    l: int = 1

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.convergence_tolerance <= 0:
            raise ValueError("convergence_tolerance must be positive")
        if self.algorithm not in ("ptp", "rma"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}; use 'ptp' or 'rma'")
        if self.algorithm == "ptp" and self.l != 1:
            raise ValueError("the point-to-point engine does not replicate; L must be 1")


@dataclass(frozen=True)
class SignIterationRow:
    iteration: int
    delta_norm: float
    occupancy: float
    bytes_a: int
    bytes_b: int
    bytes_c: int
    multiplications: int


@dataclass
class SignReport:
    rows: list[SignIterationRow]
    converged: bool
    iterations: int
    total_multiplications: int
    final_delta: float


def _panel_norm_sq(dm: DistributedMatrix) -> float:
    return float(sum(float(np.sum(p.block_norms**2)) for p in dm.panels))


def _relative_increment(new: DistributedMatrix, old: DistributedMatrix) -> float:
    dist_sq = sum(frobenius_distance(pn, po) ** 2 for pn, po in zip(new.panels, old.panels))
    norm_sq = _panel_norm_sq(old)
    if norm_sq == 0.0:
        return float(np.sqrt(dist_sq))
    return float(np.sqrt(dist_sq / norm_sq))


def _scale_panels(dm: DistributedMatrix, alpha: float) -> DistributedMatrix:
    return DistributedMatrix(
        dm.topology, dm.distribution, dm.layout, [scale(p, alpha) for p in dm.panels]
    )


def _owned_diagonal_positions(dm: DistributedMatrix, rank_i: int, rank_j: int) -> np.ndarray:
    t = dm.topology
    pos = np.arange(dm.layout.n_block_rows)
    chunk = pos % t.v
    mine = (chunk // (t.v // t.p_rows) == rank_i) & (chunk // (t.v // t.p_cols) == rank_j)
    return pos[mine]


def _scale_add_identity_dm(dm: DistributedMatrix, alpha: float, beta: float) -> DistributedMatrix:
    """alpha * M + beta * I, each rank touching only its owned diagonal."""
    if not dm.layout.is_square_symmetric():
        raise ValueError("identity shift requires a square block-symmetric layout")
    if not np.array_equal(dm.distribution.row_perm, dm.distribution.col_perm):
        raise ValueError("identity shift requires a shared row/column permutation")
    t = dm.topology
    sizes = dm.panels[0].layout.row_block_sizes  # permuted layout, rows == cols
    panels = []
    for rank, panel in enumerate(dm.panels):
        i, j = t.rank_coords(rank)
        entries = {(r, c): alpha * blk for r, c, blk in panel.iter_blocks()}
        for p in _owned_diagonal_positions(dm, i, j):
            p = int(p)
            blk = entries.get((p, p))
            shift = beta * np.eye(sizes[p])
            entries[(p, p)] = shift if blk is None else blk + shift
        panels.append(
            BlockCsrMatrix.from_entries(
                panel.layout, [(r, c, blk) for (r, c), blk in entries.items()]
            )
        )
    return DistributedMatrix(t, dm.distribution, dm.layout, panels)


def spectral_scale(x: DistributedMatrix) -> DistributedMatrix:
    """Divide by the Frobenius norm, a spectral-radius upper bound, pulling
    the spectrum into the Newton-Schulz basin without touching its signs."""
    norm = float(np.sqrt(_panel_norm_sq(x)))
    if norm == 0.0:
        raise ValueError("cannot scale a zero matrix; its sign is undefined")
    return _scale_panels(x, 1.0 / norm)


def _run_product(cluster: Cluster, a, b, cfg: SignRunConfig) -> MultiplyResult:
    if cfg.algorithm == "ptp":
        return cannon_multiply(cluster, a, b, cfg.filter)
    return rma_multiply(cluster, a, b, cfg.filter)


def sign_iterate(
    cluster: Cluster, x0: DistributedMatrix, cfg: SignRunConfig
) -> tuple[DistributedMatrix, SignReport]:
    """Iterate X <- (1/2) X (3I - X^2) until the increment drops below
    tolerance. Three consecutive increment increases abort the run."""
    if cluster.topology.l != cfg.l:
        raise ValueError(
            f"config expects L={cfg.l} but the cluster grid carries L={cluster.topology.l}"
        )
    x = x0
    rows: list[SignIterationRow] = []
    prev_delta = None
    growth_streak = 0
    converged = False
    delta = float("inf")

    for n in range(1, cfg.max_iterations + 1):
        y = _run_product(cluster, x, x, cfg)  # X^2
        w = _scale_add_identity_dm(y.c, -1.0, 3.0)  # 3I - X^2
        z = _run_product(cluster, x, w, cfg)  # X (3I - X^2)
        x_next = _scale_panels(z.c, 0.5)

        delta = _relative_increment(x_next, x)
        rows.append(
            SignIterationRow(
                iteration=n,
                delta_norm=delta,
                occupancy=x_next.occupancy(),
                bytes_a=y.stats.bytes_a + z.stats.bytes_a,
                bytes_b=y.stats.bytes_b + z.stats.bytes_b,
                bytes_c=y.stats.bytes_c + z.stats.bytes_c,
                multiplications=2,
            )
        )
        x = x_next

        if delta <= cfg.convergence_tolerance:
            converged = True
            break
        if prev_delta is not None and delta > prev_delta:
            growth_streak += 1
            if growth_streak >= _GROWTH_LIMIT:
                raise DivergenceError(
                    f"increment grew {growth_streak} iterations in a row "
                    f"(last deltas ..., {prev_delta:.3e}, {delta:.3e}) at iteration {n}; "
                    "the spectrum is outside the convergence basin or filtering is too aggressive"
                )
        else:
            growth_streak = 0
        prev_delta = delta

    report = SignReport(
        rows=rows,
        converged=converged,
        iterations=len(rows),
        total_multiplications=2 * len(rows),
        final_delta=delta,
    )
    return x, report


def write_sign_report_csv(report: SignReport, path: str | Path) -> None:
    lines = ["iter,delta_norm,occupancy,bytes_a,bytes_b,bytes_c,multiplications"]
    for r in report.rows:
        lines.append(
            f"{r.iteration},{repr(r.delta_norm)},{repr(r.occupancy)},"
            f"{r.bytes_a},{r.bytes_b},{r.bytes_c},{r.multiplications}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
