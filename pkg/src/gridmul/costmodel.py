"""Closed-form communication, memory, and buffer models.

These mirror what the one-sided engine actually allocates and moves, so a
measured run can be checked against the model exactly: per rank, every
window of the schedule fetches l_r full A panels and l_c full B panels, and
replication adds L-1 partial C panels at the end.

On square grids l_r = l_c = sqrt(L) and the communication volume collapses
to (V/sqrt(L)) (S_A+S_B) + (L-1) S_C; the per-dimension form below is the
same number there and stays exact on non-square grids, where the panel
traffic is asymmetric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gridplan import Topology

__all__ = [
    "PanelSizes",
    "ModelReport",
    "comm_volume",
    "mem_increase",
    "buffer_count",
    "scaling_check",
    "model_report",
    "model_table_csv",
]


@dataclass(frozen=True)
class PanelSizes:
    """Average per-rank panel payload bytes. C panels are independently
    sized; products are usually denser than their operands."""

    s_a: float
    s_b: float
    s_c: float

    def __post_init__(self) -> None:
        for name in ("s_a", "s_b", "s_c"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class ModelReport:
    comm_volume_bytes: float
    comm_scaling_exponent_check: float  # |fitted slope + 1/2|, 0 when unfitted
    mem_increase_factor: float
    buffer_count: int


def comm_volume(t: Topology, s: PanelSizes) -> float:
    """Requested bytes per rank for one product.

    Each of the V/L windows fetches l_r A panels and l_c B panels; the
    reduction then moves L-1 partial C panels to their home.
    """
    windows = t.v // t.l
    return windows * (t.l_r * s.s_a + t.l_c * s.s_b) + (t.l - 1) * s.s_c


def mem_increase(t: Topology, s: PanelSizes) -> float:
    """Temporary-buffer footprint relative to the flat six-buffer baseline.

    The baseline holds six A/B panels at the average size (S_A+S_B)/2;
    replication adds L C-sized buffers, and square grids also widen the A
    slot rotation to sqrt(L).
    """
    if t.l <= 1:
        raise ValueError("memory increase is defined relative to L = 1; need L > 1")
    ab = s.s_a + s.s_b
    if ab <= 0:
        raise ValueError("memory increase is undefined for zero-sized A and B panels")
    c_term = s.s_c * t.l / (3.0 * ab)
    if t.p_rows == t.p_cols:
        return c_term + (math.isqrt(t.l) + 4) / 6.0
    return c_term + 1.0


def buffer_count(t: Topology) -> int:
    """Panel buffers per rank: 6 flat, L+6 non-square, L+sqrt(L)+4 square."""
    if t.l == 1:
        return 6
    if t.p_rows == t.p_cols:
        return t.l + math.isqrt(t.l) + 4
    return t.l + 6


def scaling_check(points: list[tuple[int, int, float]]) -> float:
    """Least-squares slope of log(bytes) against log(P*L).

    A/B-dominated volumes scale like 1/sqrt(PL), so the slope sits at -1/2;
    the C reduction term drags the magnitude below 1/2.
    """
    if len(points) < 3:
        raise ValueError("need at least 3 points to fit a scaling exponent")
    x = np.array([p * l for p, l, _ in points], dtype=np.float64)
    y = np.array([bytes_ for _, _, bytes_ in points], dtype=np.float64)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("scaling fit needs positive process counts and byte volumes")
    lx = np.log(x)
    if np.allclose(lx, lx[0]):
        raise ValueError("scaling fit needs at least two distinct P*L values")
    slope = np.polyfit(lx, np.log(y), 1)[0]
    return float(slope)


def model_report(
    t: Topology, s: PanelSizes, scaling_points: list[tuple[int, int, float]] | None = None
) -> ModelReport:
    factor = mem_increase(t, s) if t.l > 1 else 1.0
    check = abs(scaling_check(scaling_points) + 0.5) if scaling_points else 0.0
    return ModelReport(comm_volume(t, s), check, factor, buffer_count(t))


def model_table_csv(rows: list[tuple[Topology, PanelSizes]]) -> str:
    """One line per topology: P_R,P_C,L,V,comm_bytes,mem_factor,buffers."""
    lines = ["P_R,P_C,L,V,comm_bytes,mem_factor,buffers"]
    for t, s in rows:
        factor = mem_increase(t, s) if t.l > 1 else 1.0
        lines.append(
            f"{t.p_rows},{t.p_cols},{t.l},{t.v},"
            f"{repr(float(comm_volume(t, s)))},{repr(float(factor))},{buffer_count(t)}"
        )
    return "\n".join(lines) + "\n"
