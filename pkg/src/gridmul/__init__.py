"""Block-sparse matrix multiplication on 2D process grids.

Matrices are blocked CSR with dense float64 payloads and per-block norms.
Two distributed engines compute the same product: a point-to-point shift
engine for flat grids and a one-sided engine that replicates panels over L
layers to cut communication. A cost model predicts the volumes, the sign
driver chains products into the Newton-Schulz iteration, and gridmul.cli
wraps everything for the shell.
"""

from .blockcsr import (
    BlockAccumulator,
    BlockCsrError,
    BlockCsrMatrix,
    BlockLayout,
    FilterConfig,
    LayoutMismatchError,
    frobenius_distance,
    frobenius_norm,
    matrix_checksum,
    post_filter,
    serial_spgemm_oracle,
)
from .costmodel import (
    ModelReport,
    PanelSizes,
    buffer_count,
    comm_volume,
    mem_increase,
    model_report,
    model_table_csv,
    scaling_check,
)
from .engine import MultiplyResult, aligned_distributions, distribute
from .fileio import FormatError, read_bcsr, write_bcsr
from .gridplan import (
    Distribution,
    DistributedMatrix,
    DistributionMismatchError,
    MultiplySchedule,
    Topology,
    TopologyError,
    build_ptp_schedule,
    build_schedule,
    dump_schedule_csv,
    make_distribution,
    partition,
    try_validate_l,
    valid_l_values,
    validate_l,
)
from .multiply_ptp import cannon_multiply
from .multiply_rma import rma_buffer_count, rma_multiply
from .profiles import PRESETS, BenchmarkProfile, generate_matrix, preset_profile
from .signdriver import (
    DivergenceError,
    SignReport,
    SignRunConfig,
    sign_iterate,
    spectral_scale,
    write_sign_report_csv,
)
from .transport import (
    Cluster,
    CommStats,
    RankFailure,
    TransportError,
    TransportTimeout,
    WindowEpochError,
    write_trace_csv,
)

__version__ = "0.1.0"

__all__ = [
    "BenchmarkProfile",
    "BlockAccumulator",
    "BlockCsrError",
    "BlockCsrMatrix",
    "BlockLayout",
    "Cluster",
    "CommStats",
    "DistributedMatrix",
    "Distribution",
    "DistributionMismatchError",
    "DivergenceError",
    "FilterConfig",
    "FormatError",
    "LayoutMismatchError",
    "ModelReport",
    "MultiplyResult",
    "MultiplySchedule",
    "PRESETS",
    "PanelSizes",
    "RankFailure",
    "SignReport",
    "SignRunConfig",
    "Topology",
    "TopologyError",
    "TransportError",
    "TransportTimeout",
    "WindowEpochError",
    "aligned_distributions",
    "buffer_count",
    "build_ptp_schedule",
    "build_schedule",
    "cannon_multiply",
    "comm_volume",
    "distribute",
    "dump_schedule_csv",
    "frobenius_distance",
    "frobenius_norm",
    "generate_matrix",
    "make_distribution",
    "matrix_checksum",
    "mem_increase",
    "model_report",
    "model_table_csv",
    "partition",
    "post_filter",
    "preset_profile",
    "read_bcsr",
    "rma_buffer_count",
    "rma_multiply",
    "scaling_check",
    "serial_spgemm_oracle",
    "sign_iterate",
    "spectral_scale",
    "try_validate_l",
    "valid_l_values",
    "validate_l",
    "write_bcsr",
    "write_sign_report_csv",
    "write_trace_csv",
]
