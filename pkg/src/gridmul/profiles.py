"""Seeded synthetic benchmark matrices.

Desk-scale analogues of three workload shapes: a molecular-system-like
profile (block 23, around 10% block occupancy), a semiempirical-like profile
(block 6, occupancy raised to 2% so small instances stay nonempty, labeled
"SE-analogue" in reports), and a dense profile (block 32). All generated
matrices are symmetric and bit-reproducible for a given profile.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .blockcsr import BlockCsrMatrix, BlockLayout

__all__ = ["BenchmarkProfile", "PRESETS", "preset_profile", "generate_matrix"]

_PATTERNS = ("banded", "random", "dense")
_OCCUPANCY_SLACK = 0.10  # generated occupancy must sit within 10% of target


@dataclass(frozen=True)
class BenchmarkProfile:
    name: str
    block_size: int
    n_block_rows: int
    target_occupancy: float
    pattern: str
    seed: int = 0

    def __post_init__(self) -> None:
        if self.block_size < 1 or self.n_block_rows < 1:
            raise ValueError("block_size and n_block_rows must be positive")
        if self.pattern not in _PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; choose from {_PATTERNS}")
        if self.pattern == "dense" and self.target_occupancy != 1.0:
            object.__setattr__(self, "target_occupancy", 1.0)
        if not 0.0 < self.target_occupancy <= 1.0:
            raise ValueError("target_occupancy must lie in (0, 1]")

    @property
    def display_label(self) -> str:
        return {"h2o-like": "H2O-analogue", "se-like": "SE-analogue", "dense": "Dense"}.get(
            self.name, self.name
        )


PRESETS: dict[str, BenchmarkProfile] = {
    "h2o-like": BenchmarkProfile("h2o-like", block_size=23, n_block_rows=40,
                                 target_occupancy=0.10, pattern="random"),
    "se-like": BenchmarkProfile("se-like", block_size=6, n_block_rows=100,
                                target_occupancy=0.02, pattern="random"),
    "dense": BenchmarkProfile("dense", block_size=32, n_block_rows=8,
                              target_occupancy=1.0, pattern="dense"),
}


def preset_profile(name: str, n_block_rows: int | None = None, seed: int = 0) -> BenchmarkProfile:
    if name not in PRESETS:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PRESETS)}")
    p = replace(PRESETS[name], seed=seed)
    if n_block_rows is not None:
        p = replace(p, n_block_rows=n_block_rows)
    return p


def _banded_width(nbr: int, target: float) -> int:
    def occ(w: int) -> float:
        return (nbr * (2 * w + 1) - w * (w + 1)) / nbr**2

    best = min(range(nbr), key=lambda w: abs(occ(w) - target))
    if abs(occ(best) - target) > _OCCUPANCY_SLACK * target:
        raise ValueError(
            f"banded pattern cannot reach occupancy {target} at {nbr} block rows; "
            f"closest achievable is {occ(best):.4f}"
        )
    return best


def _random_positions(rng: np.random.Generator, nbr: int, target: float):
    exact = target * nbr * nbr
    m = round(exact)
    if m < 1 or abs(m - exact) > _OCCUPANCY_SLACK * exact:
        raise ValueError(
            f"occupancy {target} is infeasible at {nbr} block rows: "
            f"wants {exact:.2f} blocks, nearest whole pattern has {m}"
        )
    diag = min(nbr, m)
    if (m - diag) % 2:
        diag -= 1  # keep the off-diagonal remainder pairable
    n_pairs = (m - diag) // 2
    diag_pos = np.sort(rng.choice(nbr, size=diag, replace=False))
    ri, ci = np.triu_indices(nbr, k=1)
    pick = np.sort(rng.choice(ri.size, size=n_pairs, replace=False))
    return diag_pos, ri[pick], ci[pick]


def generate_matrix(profile: BenchmarkProfile) -> BlockCsrMatrix:
    """Symmetric seeded matrix whose occupancy lands within 10% of target."""
    rng = np.random.default_rng(profile.seed)
    nbr, bs = profile.n_block_rows, profile.block_size
    layout = BlockLayout.uniform(nbr, nbr, bs)

    def sym_block() -> np.ndarray:
        r = rng.uniform(-1.0, 1.0, (bs, bs))
        return (r + r.T) / 2.0

    entries: list[tuple[int, int, np.ndarray]] = []
    if profile.pattern == "dense":
        for r in range(nbr):
            entries.append((r, r, sym_block()))
            for c in range(r + 1, nbr):
                blk = rng.uniform(-1.0, 1.0, (bs, bs))
                entries.append((r, c, blk))
                entries.append((c, r, blk.T.copy()))
    elif profile.pattern == "banded":
        w = _banded_width(nbr, profile.target_occupancy)
        for r in range(nbr):
            entries.append((r, r, sym_block()))
            for c in range(r + 1, min(nbr, r + w + 1)):
                blk = rng.uniform(-1.0, 1.0, (bs, bs))
                entries.append((r, c, blk))
                entries.append((c, r, blk.T.copy()))
    else:
        diag_pos, ri, ci = _random_positions(rng, nbr, profile.target_occupancy)
        for p in diag_pos:
            entries.append((int(p), int(p), sym_block()))
        for r, c in zip(ri, ci):
            blk = rng.uniform(-1.0, 1.0, (bs, bs))
            entries.append((int(r), int(c), blk))
            entries.append((int(c), int(r), blk.T.copy()))

    m = BlockCsrMatrix.from_entries(layout, entries)
    achieved = m.occupancy()
    if abs(achieved - profile.target_occupancy) > _OCCUPANCY_SLACK * profile.target_occupancy:
        raise AssertionError(
            f"generator bug: occupancy {achieved} misses target {profile.target_occupancy}"
        )
    return m
