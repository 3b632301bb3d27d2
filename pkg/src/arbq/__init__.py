"""1-bit weight quantization with iterative scale/sign refinement.

The package quantizes weight matrices to sign planes with per-row (or
row-times-column) scales, partitions each layer into salient and
concentration zones from calibration statistics, and sweeps column blocks
through Hessian-guided error compensation. Artifacts round-trip through
compact binary containers and a CSV report schema; see :mod:`arbq.cli` for
the command-line entry points.
"""

def _apply_thread_env() -> None:
    # ARBQ_THREADS caps BLAS parallelism too; the env vars only matter if
    # they are set before numpy first loads, which is why this runs above
    # the imports.
    import os

    cap = os.environ.get("ARBQ_THREADS", "")
    if cap.isdigit() and int(cap) > 0:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_apply_thread_env()
del _apply_thread_env

from .binarize import (
    ArbTrace,
    FirstOrderQuant,
    SecondOrderQuant,
    arb_first_order,
    arb_second_order,
    binary_error,
    binary_first_order,
    binary_second_order,
)
from .calib import (
    BenchResult,
    CalibStats,
    accumulate_second_moment,
    arbx_first_order,
    arbx_second_order,
    bench_l2_paths,
    l2_error,
    speedup_model,
)
from .compensate import CompensationResult, compensated_quantize, compensation_gain
from .configfile import parse_config, read_config, render_config, write_config
from .containers import (
    read_quant,
    read_tensor,
    write_quant,
    write_tensor,
)
from .errors import (
    ArbqError,
    BadMagicError,
    ChecksumError,
    DataFormatError,
    DegenerateCalibrationError,
    NumericalError,
    SingularHessianError,
    TruncatedFileError,
    UnknownDtypeError,
    UnsupportedVersionError,
    ValidationError,
)
from .partition import (
    BitBudget,
    PartitionMaps,
    avg_bits,
    build_cgb,
    hessian_from_stats,
    inverse_diag,
    invert_spd,
    layer_bit_budget,
    llama_7b_manifest,
    memory_estimate,
    select_salient_columns,
    sensitivity,
    split_groups,
)
from .pipeline import (
    QuantConfig,
    QuantizedLayer,
    QuantReport,
    quantize_layer,
    quantize_model,
    synth_calib_batches,
)
from .planes import BitMask, SignPlane
from .rowcol import (
    RowColQuant,
    RowColQuant2,
    arbrc_first_order,
    arbrc_second_order,
    rc_error,
    rc_init,
)

__version__ = "0.1.0"

__all__ = [
    "ArbqError",
    "ArbTrace",
    "BadMagicError",
    "BenchResult",
    "BitBudget",
    "BitMask",
    "CalibStats",
    "ChecksumError",
    "CompensationResult",
    "DataFormatError",
    "DegenerateCalibrationError",
    "FirstOrderQuant",
    "NumericalError",
    "PartitionMaps",
    "QuantConfig",
    "QuantizedLayer",
    "QuantReport",
    "RowColQuant",
    "RowColQuant2",
    "SecondOrderQuant",
    "SignPlane",
    "SingularHessianError",
    "TruncatedFileError",
    "UnknownDtypeError",
    "UnsupportedVersionError",
    "ValidationError",
    "accumulate_second_moment",
    "arb_first_order",
    "arb_second_order",
    "arbrc_first_order",
    "arbrc_second_order",
    "arbx_first_order",
    "arbx_second_order",
    "avg_bits",
    "bench_l2_paths",
    "binary_error",
    "binary_first_order",
    "binary_second_order",
    "build_cgb",
    "compensated_quantize",
    "compensation_gain",
    "hessian_from_stats",
    "inverse_diag",
    "invert_spd",
    "l2_error",
    "layer_bit_budget",
    "llama_7b_manifest",
    "memory_estimate",
    "parse_config",
    "quantize_layer",
    "quantize_model",
    "rc_error",
    "rc_init",
    "read_config",
    "read_quant",
    "read_tensor",
    "render_config",
    "select_salient_columns",
    "sensitivity",
    "speedup_model",
    "split_groups",
    "synth_calib_batches",
    "write_config",
    "write_quant",
    "write_tensor",
]
