"""Command-line front end.

Five subcommands: generate (seeded benchmark matrices), multiply (one
distributed product, validated against the serial reference), sign
(Newton-Schulz sign iteration), model (communication/memory predictions
for a topology), and schedule-dump (the one-sided fetch/compute schedule
as CSV). Grid-touching commands share the --grid RxC, --L, --alg,
--threshold, --seed, --trace and --report flags.

Exit status is 0 only when every validation on the run passed: the
distributed result must match the serial oracle, a sign run must converge,
a requested topology must be accepted. A replication factor the grid
cannot carry is downgraded to L=1 and the reason is recorded in the report
rather than treated as a failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .blockcsr import (
    BlockCsrMatrix,
    FilterConfig,
    frobenius_distance,
    frobenius_norm,
    matrix_checksum,
    serial_spgemm_oracle,
)
from .costmodel import PanelSizes, buffer_count, comm_volume, mem_increase, model_table_csv
from .engine import MultiplyResult, aligned_distributions
from .fileio import read_bcsr, write_bcsr
from .gridplan import (
    Topology,
    TopologyError,
    build_schedule,
    dump_schedule_csv,
    partition,
    try_validate_l,
    validate_l,
)
from .multiply_ptp import cannon_multiply
from .multiply_rma import rma_multiply
from .profiles import PRESETS, generate_matrix, preset_profile
from .signdriver import (
    DivergenceError,
    SignRunConfig,
    sign_iterate,
    spectral_scale,
    write_sign_report_csv,
)
from .transport import Cluster, write_trace_csv

_RESIDUAL_LIMIT = 1e-9  # oracle agreement required for exit 0


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 4x4, got {text!r}")


def _config_digest(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _versions() -> dict[str, str]:
    return {
        "gridmul": __version__,
        "numpy": np.__version__,
        "python": sys.version.split()[0],
    }


def _matrix_summary(path: str, m: BlockCsrMatrix) -> dict:
    return {
        "path": path,
        "checksum": matrix_checksum(m),
        "shape": [m.layout.total_rows, m.layout.total_cols],
        "n_blocks": m.n_blocks,
        "occupancy": m.occupancy(),
    }


def _relative_residual(got: BlockCsrMatrix, want: BlockCsrMatrix) -> float:
    num = frobenius_distance(got, want)
    den = frobenius_norm(want)
    if den > 0.0:
        return num / den
    return 0.0 if num == 0.0 else math.inf


def _write_report(path: str | None, report: dict) -> None:
    if path:
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _topology_or_fallback(args) -> tuple[Topology, str | None]:
    p_rows, p_cols = args.grid
    t, reason = try_validate_l(p_rows, p_cols, args.L)
    return t, reason


def _mean(values: list[int]) -> float:
    return float(sum(values)) / len(values) if values else 0.0


def _model_vs_measured(t: Topology, result: MultiplyResult, a_dm, b_dm) -> tuple[dict, dict]:
    sizes = PanelSizes(
        _mean(a_dm.panel_payload_bytes()),
        _mean(b_dm.panel_payload_bytes()),
        _mean(result.c.panel_payload_bytes()),
    )
    n = t.n_ranks
    stats = result.stats
    model_total = comm_volume(t, sizes)
    model_c = (t.l - 1) * sizes.s_c
    measured = {
        "a_plus_b_bytes": (stats.bytes_a + stats.bytes_b) / n,
        "c_bytes": stats.bytes_c / n,
        "total_bytes": stats.payload_total / n,
    }
    model = {
        "comm_volume_bytes": model_total,
        "a_plus_b_bytes": model_total - model_c,
        "c_bytes": model_c,
        "mem_increase_factor": mem_increase(t, sizes) if t.l > 1 else 1.0,
        "buffer_count": buffer_count(t),
    }
    deltas = {
        "a_plus_b_bytes": measured["a_plus_b_bytes"] - model["a_plus_b_bytes"],
        "c_bytes": measured["c_bytes"] - model["c_bytes"],
        "total_bytes": measured["total_bytes"] - model_total,
    }
    return model, {"per_rank_measured": measured, "delta": deltas}


# -- subcommands -------------------------------------------------------------


def cmd_generate(args) -> int:
    profile = preset_profile(args.profile, n_block_rows=args.block_rows, seed=args.seed)
    overrides = {}
    if args.block_size is not None:
        overrides["block_size"] = args.block_size
    if args.occupancy is not None:
        overrides["target_occupancy"] = args.occupancy
    if args.pattern is not None:
        overrides["pattern"] = args.pattern
    if overrides:
        profile = replace(profile, **overrides)

    try:
        m = generate_matrix(profile)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    write_bcsr(m, args.out)

    cfg = {
        "command": "generate",
        "profile": profile.name,
        "block_size": profile.block_size,
        "n_block_rows": profile.n_block_rows,
        "target_occupancy": profile.target_occupancy,
        "pattern": profile.pattern,
        "seed": profile.seed,
    }
    report = {
        "command": "generate",
        "config": cfg,
        "config_sha256": _config_digest(cfg),
        "label": profile.display_label,
        "versions": _versions(),
        "output": _matrix_summary(args.out, m),
        "validations": {"occupancy_within_tolerance": True},
        "ok": True,
    }
    _write_report(args.report, report)
    print(f"{profile.display_label}: {m.layout.total_rows}x{m.layout.total_cols}, "
          f"occupancy {m.occupancy():.4f}, checksum {matrix_checksum(m)[:12]}")
    print(f"wrote {args.out}")
    return 0


def cmd_multiply(args) -> int:
    a = read_bcsr(args.a)
    b = read_bcsr(args.b)
    if a.layout.col_block_sizes != b.layout.row_block_sizes:
        print("error: operand contraction dimensions do not match", file=sys.stderr)
        return 1

    t, fallback = _topology_or_fallback(args)
    cfg = FilterConfig(threshold=args.threshold)
    dist_a, dist_b = aligned_distributions(a.layout, b.layout, t, args.seed)
    a_dm = partition(a, dist_a, t)
    b_dm = partition(b, dist_b, t)

    cluster = Cluster(t, trace=bool(args.trace))
    started = time.perf_counter()
    if args.alg == "ptp":
        result = cannon_multiply(cluster, a_dm, b_dm, cfg)
        result.fallback_reason = fallback
    else:
        result = rma_multiply(cluster, a_dm, b_dm, cfg, fallback_reason=fallback)
    elapsed = time.perf_counter() - started
    if args.trace:
        write_trace_csv(cluster, args.trace)

    c = result.c.reassemble()
    if args.out:
        write_bcsr(c, args.out)
    want = serial_spgemm_oracle(a, b, cfg)
    residual = _relative_residual(c, want)
    ok = residual <= args.residual_limit

    model, measured = _model_vs_measured(t, result, a_dm, b_dm)
    run_cfg = {
        "command": "multiply",
        "a": args.a,
        "b": args.b,
        "grid": f"{args.grid[0]}x{args.grid[1]}",
        "L": args.L,
        "alg": args.alg,
        "threshold": args.threshold,
        "seed": args.seed,
    }
    report = {
        "command": "multiply",
        "config": run_cfg,
        "config_sha256": _config_digest(run_cfg),
        "versions": _versions(),
        "inputs": {"a": _matrix_summary(args.a, a), "b": _matrix_summary(args.b, b)},
        "topology": {
            "grid": f"{t.p_rows}x{t.p_cols}",
            "L": t.l,
            "V": t.v,
            "requested_L": args.L,
            "fallback_reason": fallback,
        },
        "algorithm": result.algorithm,
        "result": _matrix_summary(args.out or "", c),
        "oracle_residual": residual,
        "comm_stats": result.stats.as_dict(),
        "model": model,
        "measured_vs_model": measured,
        "buffers": result.buffers,
        "realloc_events": result.realloc_events,
        "elapsed_seconds": elapsed,
        "validations": {"oracle_residual_ok": ok},
        "ok": ok,
    }
    _write_report(args.report, report)

    print(f"{result.algorithm} on {t.p_rows}x{t.p_cols} L={t.l}: "
          f"residual {residual:.3e}, payload {result.stats.payload_total} B, "
          f"buffers {result.buffers}, {elapsed:.3f}s")
    if fallback:
        print(f"note: {fallback}")
    if not ok:
        print(f"FAILED: oracle residual {residual:.3e} above {args.residual_limit:.1e}",
              file=sys.stderr)
        return 1
    print("ok")
    return 0


def cmd_sign(args) -> int:
    x = read_bcsr(args.x)
    if not x.layout.is_square_symmetric():
        print("error: the sign iteration needs a square matrix with a symmetric "
              "block layout", file=sys.stderr)
        return 1

    t, fallback = _topology_or_fallback(args)
    dist, _ = aligned_distributions(x.layout, x.layout, t, args.seed)
    x_dm = partition(x, dist, t)
    if args.scale:
        x_dm = spectral_scale(x_dm)

    run_cfg = SignRunConfig(
        max_iterations=args.max_iters,
        convergence_tolerance=args.tol,
        filter=FilterConfig(threshold=args.threshold),
        algorithm=args.alg,
        l=t.l,
    )
    cluster = Cluster(t, trace=bool(args.trace))
    started = time.perf_counter()
    diverged: str | None = None
    try:
        x_sign, report = sign_iterate(cluster, x_dm, run_cfg)
    except DivergenceError as err:
        print(f"FAILED: {err}", file=sys.stderr)
        diverged = str(err)
        x_sign, report = None, None
    elapsed = time.perf_counter() - started
    if args.trace:
        write_trace_csv(cluster, args.trace)

    cfg = {
        "command": "sign",
        "x": args.x,
        "grid": f"{args.grid[0]}x{args.grid[1]}",
        "L": args.L,
        "alg": args.alg,
        "threshold": args.threshold,
        "seed": args.seed,
        "max_iters": args.max_iters,
        "tol": args.tol,
        "scale": args.scale,
    }
    out: dict = {
        "command": "sign",
        "config": cfg,
        "config_sha256": _config_digest(cfg),
        "versions": _versions(),
        "input": _matrix_summary(args.x, x),
        "topology": {
            "grid": f"{t.p_rows}x{t.p_cols}",
            "L": t.l,
            "requested_L": args.L,
            "fallback_reason": fallback,
        },
        "elapsed_seconds": elapsed,
    }
    if diverged is not None:
        out.update({"diverged": diverged, "validations": {"converged": False}, "ok": False})
        _write_report(args.report, out)
        return 1

    xs = x_sign.reassemble()
    dense = xs.to_dense()
    n = dense.shape[0]
    involution = float(np.linalg.norm(dense @ dense - np.eye(n)) / math.sqrt(n))
    if args.out:
        write_bcsr(xs, args.out)
    if args.iterations:
        write_sign_report_csv(report, args.iterations)

    out.update({
        "result": _matrix_summary(args.out or "", xs),
        "converged": report.converged,
        "iterations": report.iterations,
        "total_multiplications": report.total_multiplications,
        "final_delta": report.final_delta,
        "involution_residual": involution,
        "bytes": {
            "a": sum(r.bytes_a for r in report.rows),
            "b": sum(r.bytes_b for r in report.rows),
            "c": sum(r.bytes_c for r in report.rows),
        },
        "rows": [
            {
                "iteration": r.iteration,
                "delta_norm": r.delta_norm,
                "occupancy": r.occupancy,
                "bytes_a": r.bytes_a,
                "bytes_b": r.bytes_b,
                "bytes_c": r.bytes_c,
                "multiplications": r.multiplications,
            }
            for r in report.rows
        ],
        "validations": {"converged": report.converged},
        "ok": report.converged,
    })
    _write_report(args.report, out)

    print(f"sign on {t.p_rows}x{t.p_cols} L={t.l}: "
          f"{'converged' if report.converged else 'NOT converged'} after "
          f"{report.iterations} iterations, delta {report.final_delta:.3e}, "
          f"involution {involution:.3e}")
    if fallback:
        print(f"note: {fallback}")
    if not report.converged:
        print(f"FAILED: no convergence within {args.max_iters} iterations", file=sys.stderr)
        return 1
    print("ok")
    return 0


def cmd_model(args) -> int:
    p_rows, p_cols = args.grid
    try:
        t = validate_l(p_rows, p_cols, args.L)
    except TopologyError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1

    if args.panel_bytes is not None:
        sizes = PanelSizes(*args.panel_bytes)
    else:
        # Unit panels: every volume is in multiples of one dense panel.
        sizes = PanelSizes(1.0, 1.0, 1.0)

    rows = [(validate_l(p_rows, p_cols, 1), sizes)]
    if t.l > 1:
        rows.append((t, sizes))
    text = model_table_csv(rows)
    if t.l > 1:
        ratio = comm_volume(rows[0][0], sizes) / comm_volume(t, sizes)
        text += f"# OS1/OS{t.l} comm ratio: {ratio!r}\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    sys.stdout.write(text)
    return 0


def cmd_schedule_dump(args) -> int:
    p_rows, p_cols = args.grid
    try:
        t = validate_l(p_rows, p_cols, args.L)
    except TopologyError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    dump_schedule_csv(build_schedule(t), args.out)
    print(f"wrote schedule for {t.p_rows}x{t.p_cols} L={t.l} (V={t.v}) to {args.out}")
    return 0


# -- parser ------------------------------------------------------------------


def _add_grid_flags(p: argparse.ArgumentParser, threshold_default: float) -> None:
    p.add_argument("--grid", type=_parse_grid, default=(1, 1), metavar="RxC",
                   help="process grid, rows x cols (default 1x1)")
    p.add_argument("--L", type=int, default=1, help="replication factor (default 1)")
    p.add_argument("--alg", choices=("ptp", "rma"), default="rma",
                   help="point-to-point shifts or one-sided gets (default rma)")
    p.add_argument("--threshold", type=float, default=threshold_default,
                   help=f"block-norm filter threshold (default {threshold_default})")
    p.add_argument("--seed", type=int, default=0, help="distribution seed (default 0)")
    p.add_argument("--trace", metavar="PATH", help="write the transfer trace CSV here")
    p.add_argument("--report", metavar="PATH", help="write the JSON run report here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridmul",
        description="Block-sparse matrix multiplication on 2D process grids",
    )
    parser.add_argument("--version", action="version", version=f"gridmul {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a seeded synthetic benchmark matrix")
    g.add_argument("--profile", choices=sorted(PRESETS), required=True)
    g.add_argument("--out", required=True, metavar="PATH")
    g.add_argument("--block-rows", type=int, default=None, help="override preset block rows")
    g.add_argument("--block-size", type=int, default=None, help="override preset block size")
    g.add_argument("--occupancy", type=float, default=None, help="override preset occupancy")
    g.add_argument("--pattern", choices=("banded", "random", "dense"), default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--report", metavar="PATH", help="write the JSON run report here")
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("multiply", help="run one distributed product")
    m.add_argument("a", metavar="A.bcsr")
    m.add_argument("b", metavar="B.bcsr")
    _add_grid_flags(m, threshold_default=0.0)
    m.add_argument("--out", metavar="PATH", help="write the product matrix here")
    m.add_argument("--residual-limit", type=float, default=_RESIDUAL_LIMIT,
                   help="max oracle residual for exit 0")
    m.set_defaults(func=cmd_multiply)

    s = sub.add_parser("sign", help="Newton-Schulz matrix sign iteration")
    s.add_argument("x", metavar="X.bcsr")
    _add_grid_flags(s, threshold_default=1e-10)
    s.add_argument("--max-iters", type=int, default=30)
    s.add_argument("--tol", type=float, default=1e-10, help="convergence tolerance")
    s.add_argument("--scale", action="store_true",
                   help="divide by the Frobenius norm before iterating")
    s.add_argument("--out", metavar="PATH", help="write the sign matrix here")
    s.add_argument("--iterations", metavar="PATH", help="write the per-iteration CSV here")
    s.set_defaults(func=cmd_sign)

    mo = sub.add_parser("model", help="communication and memory predictions")
    mo.add_argument("--grid", type=_parse_grid, required=True, metavar="RxC")
    mo.add_argument("--L", type=int, default=1)
    size = mo.add_mutually_exclusive_group()
    size.add_argument("--dense", action="store_true",
                      help="unit dense panels (volumes in panel multiples)")
    size.add_argument("--panel-bytes", type=float, nargs=3, metavar=("SA", "SB", "SC"),
                      help="panel payload bytes for A, B and C")
    mo.add_argument("--out", metavar="PATH", help="also write the table here")
    mo.set_defaults(func=cmd_model)

    d = sub.add_parser("schedule-dump", help="write the one-sided schedule CSV")
    d.add_argument("--grid", type=_parse_grid, required=True, metavar="RxC")
    d.add_argument("--L", type=int, default=1)
    d.add_argument("--out", required=True, metavar="PATH")
    d.set_defaults(func=cmd_schedule_dump)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "alg", None) == "ptp" and args.L != 1:
        parser.error("the point-to-point engine does not replicate; use --L 1 or --alg rma")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
