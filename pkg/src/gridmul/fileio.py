"""Text serialization of blocked matrices (BCSR1 format).

Layout of a file::

    BCSR1 <n_block_rows> <n_block_cols>
    <row block sizes, space separated>
    <col block sizes, space separated>
    <r> <c> <v0> <v1> ...        one line per stored block

Block values are written row-major with repr precision, so a write/read
round trip reproduces payloads bit for bit.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .blockcsr import BlockCsrError, BlockCsrMatrix, BlockLayout

logger = logging.getLogger(__name__)

__all__ = ["write_bcsr", "read_bcsr", "FormatError"]

_MAGIC = "BCSR1"


class FormatError(BlockCsrError):
    """The file does not follow the BCSR1 layout."""


def write_bcsr(m: BlockCsrMatrix, path: str | Path) -> None:
    path = Path(path)
    lines = [f"{_MAGIC} {m.layout.n_block_rows} {m.layout.n_block_cols}"]
    lines.append(" ".join(str(s) for s in m.layout.row_block_sizes))
    lines.append(" ".join(str(s) for s in m.layout.col_block_sizes))
    for r, c, blk in m.iter_blocks():
        values = " ".join(repr(float(v)) for v in blk.ravel())
        lines.append(f"{r} {c} {values}")
    path.write_text("\n".join(lines) + "\n")
    logger.debug("wrote %d blocks to %s", m.n_blocks, path)


def read_bcsr(path: str | Path) -> BlockCsrMatrix:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != _MAGIC:
        raise FormatError(f"{path}: bad header line {lines[0]!r}")
    try:
        nbr, nbc = int(header[1]), int(header[2])
    except ValueError as exc:
        raise FormatError(f"{path}: non-integer block counts in header") from exc
    if len(lines) < 3:
        raise FormatError(f"{path}: missing block size lines")
    try:
        row_sizes = tuple(int(s) for s in lines[1].split())
        col_sizes = tuple(int(s) for s in lines[2].split())
    except ValueError as exc:
        raise FormatError(f"{path}: non-integer block size") from exc
    if len(row_sizes) != nbr or len(col_sizes) != nbc:
        raise FormatError(
            f"{path}: header says {nbr}x{nbc} block rows/cols, size lines have "
            f"{len(row_sizes)}x{len(col_sizes)}"
        )
    layout = BlockLayout(row_sizes, col_sizes)

    entries = []
    for lineno, line in enumerate(lines[3:], start=4):
        if not line.strip():
            continue
        fields = line.split()
        try:
            r, c = int(fields[0]), int(fields[1])
            values = np.array([float(v) for v in fields[2:]])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed block line") from exc
        if not (0 <= r < nbr and 0 <= c < nbc):
            raise FormatError(f"{path}:{lineno}: block ({r}, {c}) out of range")
        shape = layout.block_shape(r, c)
        if values.size != shape[0] * shape[1]:
            raise FormatError(
                f"{path}:{lineno}: block ({r}, {c}) has {values.size} values, "
                f"expected {shape[0] * shape[1]}"
            )
        entries.append((r, c, values.reshape(shape)))
    return BlockCsrMatrix.from_entries(layout, entries)
