"""End-to-end layer quantization: stats, partitioning, compensation, metrics.

``quantize_layer`` wires the pieces together: accumulate calibration
statistics (with a deterministic holdout split), build the damped Hessian
proxy, rank columns by sensitivity, grid-search the salient fraction and the
per-block group splits on the original weights, then sweep the column blocks
through the error-compensated quantizer with the configured refinement
variant per zone. Salient zones carry ``order`` planes, non-salient zones
one; the method ``baseline-t0`` runs the same pipeline with zero refinement
iterations and the salient columns undivided.

Stored scale parameters are rounded to 32-bit floats when the layer artifact
is assembled, and all reported metrics are computed from that stored-precision
reconstruction, so re-evaluating a written artifact reproduces them exactly.
"""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .binarize import (
    ArbTrace,
    FirstOrderQuant,
    SecondOrderQuant,
    arb_first_order,
    arb_second_order,
    binary_error,
)
from .calib import (
    CalibStats,
    accumulate_second_moment,
    arbx_first_order,
    arbx_second_order,
    l2_error,
)
from .compensate import compensated_quantize, _sweep
from .errors import ValidationError
from .partition import (
    DEFAULT_PERCENTILE_GRID,
    DEFAULT_SALIENT_FRACTIONS,
    BitBudget,
    PartitionMaps,
    hessian_from_stats,
    invert_spd,
    layer_bit_budget,
    select_salient_columns,
    sensitivity,
    split_groups,
)
from .planes import as_weight_matrix
from .rowcol import (
    RowColQuant,
    RowColQuant2,
    _rc_error_raw,
    arbrc_first_order,
    arbrc_second_order,
)

__all__ = [
    "METHODS",
    "QuantConfig",
    "QuantReport",
    "QuantizedLayer",
    "REPORT_COLUMNS",
    "report_row",
    "split_holdout",
    "synth_calib_batches",
    "column_deviation_profile",
    "residual_shift_profile",
    "output_mse",
    "quantize_layer",
    "quantize_model",
]

log = logging.getLogger(__name__)

METHODS = ("arb", "arb-x", "arb-rc", "baseline-t0")

ZONES_CGB = ("salient_sparse", "salient_conc", "nonsalient_sparse", "nonsalient_conc")
ZONES_UNDIVIDED = ("salient", "nonsalient_sparse", "nonsalient_conc")


@dataclass(frozen=True)
class QuantConfig:
    """Pipeline settings; every field round-trips through the config file."""

    method: str = "arb-rc"
    order: int = 2
    iterations: int = 15
    block_k: int = 128
    salient_fractions: tuple[float, ...] = DEFAULT_SALIENT_FRACTIONS
    percentile_grid: tuple[float, ...] = DEFAULT_PERCENTILE_GRID
    damping_fraction: float = 0.01
    cgb: bool = True
    compensate: bool = True
    seed: int = 0
    calib_batches: int = 128
    calib_rows: int = 32
    calib_col_sigma: float = 0.0
    scale_bytes: int = 4

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.order not in (1, 2):
            raise ValidationError("order must be 1 or 2")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.block_k <= 0:
            raise ValidationError("block size must be positive")
        if len(self.salient_fractions) == 0:
            raise ValidationError("at least one salient fraction is required")
        for r in self.salient_fractions:
            if not 0.0 <= r <= 1.0:
                raise ValidationError(f"salient fraction {r} outside [0, 1]")
        for p in self.percentile_grid:
            if not 0.0 < p < 1.0:
                raise ValidationError(f"percentile {p} outside (0, 1)")
        if self.damping_fraction < 0:
            raise ValidationError("damping fraction must be >= 0")
        if self.scale_bytes not in (2, 4):
            raise ValidationError("scale bytes must be 2 or 4")
        if self.calib_batches <= 0 or self.calib_rows <= 0:
            raise ValidationError("calibration sizes must be positive")
        if self.calib_col_sigma < 0:
            raise ValidationError("calibration column sigma must be >= 0")

    @property
    def effective_iterations(self) -> int:
        return 0 if self.method == "baseline-t0" else self.iterations

    @property
    def effective_cgb(self) -> bool:
        return False if self.method == "baseline-t0" else self.cgb

    @property
    def family(self) -> str:
        """Underlying refinement family (baseline runs the plain one)."""
        return "arb" if self.method == "baseline-t0" else self.method

    def zone_names(self) -> tuple[str, ...]:
        return ZONES_CGB if self.effective_cgb else ZONES_UNDIVIDED


@dataclass(frozen=True)
class QuantizedLayer:
    """Everything needed to reconstruct one quantized layer."""

    name: str
    n: int
    m: int
    method: str
    order: int
    block_k: int
    cgb: bool
    maps: PartitionMaps
    budget: BitBudget
    blocks: tuple  # per block: tuple of (zone_name, quant)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.m)

    @property
    def zone_names(self) -> tuple[str, ...]:
        return ZONES_CGB if self.cgb else ZONES_UNDIVIDED

    def block_slices(self) -> list[slice]:
        k = min(self.block_k, self.m)
        return [slice(i, min(i + k, self.m)) for i in range(0, self.m, k)]

    def reconstruct(self) -> np.ndarray:
        rec = np.zeros((self.n, self.m))
        for cols, zones in zip(self.block_slices(), self.blocks):
            for _, quant in zones:
                rec[:, cols] += quant.reconstruct()
        return rec


@dataclass(frozen=True)
class QuantReport:
    """Per-layer metrics; every field except wall_time is deterministic."""

    name: str
    n: int
    m: int
    method: str
    order: int
    iterations: int
    block_k: int
    cgb: bool
    compensated: bool
    salient_fraction: float
    salient_count: int
    l1: float
    l2: float
    output_mse: float
    shift_pre: float
    shift_post: float
    col_dev_corr: float
    trace_initial: float
    trace_final: float
    plane_bits: int
    bitmap_bits: int
    scale_bits: int
    total_bytes: int
    avg_weight_bits: float
    wall_time: float


REPORT_COLUMNS = (
    "name", "n", "m", "method", "order", "iterations", "block_k", "cgb",
    "compensated", "salient_fraction", "salient_count", "l1", "l2",
    "output_mse", "shift_pre", "shift_post", "col_dev_corr",
    "trace_initial", "trace_final", "plane_bits", "bitmap_bits",
    "scale_bits", "total_bytes", "avg_weight_bits",
)


def report_row(report: QuantReport) -> list:
    """Report values in REPORT_COLUMNS order (wall time deliberately
    excluded so identical runs write identical reports)."""
    values = []
    for col in REPORT_COLUMNS:
        v = getattr(report, col)
        if isinstance(v, bool):
            v = int(v)
        elif isinstance(v, float):
            v = repr(v)
        values.append(v)
    return values


def split_holdout(batches: Sequence[np.ndarray]) -> tuple[list, list]:
    """Deterministic calibration/holdout split by batch index.

    With four or more batches every fourth goes to the holdout; with two or
    three the last batch does; a single batch is split by rows 3:1.
    """
    batches = list(batches)
    if not batches:
        raise ValidationError("split_holdout: no calibration batches")
    if len(batches) >= 4:
        calib = [b for i, b in enumerate(batches) if i % 4 != 3]
        hold = [b for i, b in enumerate(batches) if i % 4 == 3]
    elif len(batches) >= 2:
        calib, hold = batches[:-1], batches[-1:]
    else:
        b = np.asarray(batches[0])
        if b.shape[0] < 2:
            raise ValidationError("split_holdout: need at least two calibration rows")
        cut = b.shape[0] - max(1, b.shape[0] // 4)
        calib, hold = [b[:cut]], [b[cut:]]
    return calib, hold


def synth_calib_batches(m: int, config: QuantConfig, name: str = "layer") -> list[np.ndarray]:
    """Synthetic Gaussian calibration batches with a per-column scale profile.

    Column scales are lognormal with sigma ``calib_col_sigma`` (zero gives a
    flat profile). The stream is keyed by (seed, layer name), so quantize and
    eval regenerate identical batches for the same layer.
    """
    rng = np.random.default_rng([config.seed, zlib.crc32(name.encode())])
    scales = np.exp(config.calib_col_sigma * rng.standard_normal(m))
    return [
        rng.standard_normal((config.calib_rows, m)) * scales[None, :]
        for _ in range(config.calib_batches)
    ]


def column_deviation_profile(matrix) -> np.ndarray:
    """Per-column mean absolute value."""
    arr = as_weight_matrix(matrix, "matrix")
    return np.abs(arr).mean(axis=0)


def residual_shift_profile(w, recon) -> np.ndarray:
    """Per-row mean of the residual: the additive bias the reconstruction
    leaves behind."""
    w = as_weight_matrix(w)
    return (w - np.asarray(recon)).mean(axis=1)


def output_mse(w, recon, holdout: Sequence[np.ndarray]) -> float:
    """Mean squared output entry over holdout rows: X (W - recon)' averaged
    over all (row, output) pairs."""
    w = as_weight_matrix(w)
    resid = w - np.asarray(recon)
    total = 0.0
    rows = 0
    for batch in holdout:
        x = np.asarray(batch, dtype=np.float64)
        prod = x @ resid.T
        total += float((prod * prod).sum())
        rows += x.shape[0]
    if rows == 0:
        raise ValidationError("output_mse: empty holdout")
    return total / (rows * w.shape[0])


def _round_f32(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).astype(np.float64)


def _stored_precision(quant):
    """Round a quant's parameters to their on-disk 32-bit width (row-column
    quants are gauge-fixed first so the stored form is canonical)."""
    if isinstance(quant, FirstOrderQuant):
        return replace(quant, alpha=_round_f32(quant.alpha), mu=_round_f32(quant.mu))
    if isinstance(quant, SecondOrderQuant):
        return replace(
            quant,
            alpha1=_round_f32(quant.alpha1),
            alpha2=_round_f32(quant.alpha2),
            mu=_round_f32(quant.mu),
        )
    if isinstance(quant, RowColQuant):
        g = quant.gauge_fixed()
        return replace(g, alpha_r=_round_f32(g.alpha_r), alpha_c=_round_f32(g.alpha_c))
    if isinstance(quant, RowColQuant2):
        g = quant.gauge_fixed()
        return replace(
            g,
            alpha_r1=_round_f32(g.alpha_r1),
            alpha_c1=_round_f32(g.alpha_c1),
            alpha_r2=_round_f32(g.alpha_r2),
            alpha_c2=_round_f32(g.alpha_c2),
        )
    raise ValidationError(f"unknown quant type {type(quant).__name__}")


def _zone_t0_error(family: str, w: np.ndarray, mask: np.ndarray, order: int) -> float:
    # inputs are validated once at the layer boundary, so the raw scorers
    # are safe here
    if family == "arb-rc":
        return _rc_error_raw(w, mask, order)
    return binary_error(w, mask, order)


def _quantize_zone(family, w, mask, order, iterations, stats_block):
    if family == "arb":
        if order == 2:
            return arb_second_order(w, mask, iterations)
        return arb_first_order(w, mask, iterations)
    if family == "arb-x":
        if order == 2:
            return arbx_second_order(w, mask, stats_block, iterations)
        return arbx_first_order(w, mask, stats_block, iterations)
    if family == "arb-rc":
        if order == 2:
            return arbrc_second_order(w, mask, iterations)
        return arbrc_first_order(w, mask, iterations)
    raise ValidationError(f"unknown refinement family {family!r}")


def _zone_order(zone: str, config: QuantConfig) -> int:
    return config.order if zone.startswith("salient") else 1


def _scope_split(w_scope: np.ndarray, family: str, order: int, grid) -> tuple[np.ndarray, float]:
    """Group split over one scope's own columns. Equivalent to splitting the
    full block with out-of-scope columns masked away, since masked-out
    entries never touch the scorer; working on the narrow slice keeps the
    search linear in the scope width."""
    full = np.ones(w_scope.shape[1], dtype=bool)

    def eval_fn(g, scope_elems):
        return (
            _zone_t0_error(family, w_scope, g, order)
            + _zone_t0_error(family, w_scope, scope_elems & ~g, order)
        )

    g, _ = split_groups(w_scope, full, grid, eval_fn)
    return g, eval_fn(g, np.ones(w_scope.shape, dtype=bool))


def _build_maps(
    w: np.ndarray, config: QuantConfig, salient_cols: np.ndarray
) -> tuple[PartitionMaps, float]:
    """Per-block group splits on the original weights, assembled into one
    layer-wide bitmap, plus the total chosen zone error.

    The returned score is the sum over (block, scope) of the winning split's
    zero-iteration error with the scope's own method and order, i.e. the
    exact quantity the group search minimizes. Undivided-salient mode leaves
    salient columns out of the sparse group and charges the whole salient
    scope as one zone.
    """
    n, m = w.shape
    group = np.zeros((n, m), dtype=bool)
    total = 0.0
    k = min(config.block_k, m)
    family = config.family
    for start in range(0, m, k):
        stop = min(start + k, m)
        wb = w[:, start:stop]
        sal_b = salient_cols[start:stop]
        sal_idx = np.flatnonzero(sal_b)
        ns_idx = np.flatnonzero(~sal_b)
        if sal_idx.size:
            if config.effective_cgb:
                g, err = _scope_split(
                    wb[:, sal_idx], family, config.order, config.percentile_grid
                )
                scatter = np.zeros((n, stop - start), dtype=bool)
                scatter[:, sal_idx] = g
                group[:, start:stop] |= scatter
                total += err
            else:
                total += _zone_t0_error(
                    family, wb[:, sal_idx],
                    np.ones((n, sal_idx.size), dtype=bool), config.order,
                )
        if ns_idx.size:
            g, err = _scope_split(wb[:, ns_idx], family, 1, config.percentile_grid)
            scatter = np.zeros((n, stop - start), dtype=bool)
            scatter[:, ns_idx] = g
            group[:, start:stop] |= scatter
            total += err
    return PartitionMaps(salient_cols=salient_cols, group=group), total


def _candidate_eval(w: np.ndarray, config: QuantConfig, cache: dict):
    """Scores a candidate salient column set by the per-block zone error its
    partition would start from (the same objective the group search uses).
    Results are cached so the winning candidate's maps are not rebuilt."""

    def eval_fn(cand_cols: np.ndarray) -> float:
        key = cand_cols.tobytes()
        if key not in cache:
            cache[key] = _build_maps(w, config, cand_cols)
        return cache[key][1]

    return eval_fn


def quantize_layer(w, batches: Iterable[np.ndarray], config: QuantConfig, name: str = "layer"):
    """Quantize one layer; returns (QuantizedLayer, QuantReport)."""
    t_start = time.perf_counter()
    w = as_weight_matrix(w)
    n, m = w.shape
    calib, holdout = split_holdout(list(batches))
    stats = accumulate_second_moment(calib)
    if stats.dim != m:
        raise ValidationError(
            f"quantize_layer: calibration width {stats.dim} != layer width {m}"
        )
    hessian = hessian_from_stats(stats, config.damping_fraction)
    h_inv = invert_spd(hessian)
    inv_diag = np.diagonal(h_inv).copy()

    scores = sensitivity(w, inv_diag)
    maps_cache: dict = {}
    salient_cols, chosen_fraction = select_salient_columns(
        scores, config.salient_fractions, eval_fn=_candidate_eval(w, config, maps_cache)
    )
    maps, _ = maps_cache.get(salient_cols.tobytes()) or _build_maps(w, config, salient_cols)
    zone_masks = maps.zones_cgb() if config.effective_cgb else maps.zones_undivided_salient()
    zone_names = config.zone_names()
    family = config.family
    iterations = config.effective_iterations

    def quantize_block(block_w: np.ndarray, cols: slice):
        stats_block = stats.restricted(np.arange(cols.start, cols.stop)) \
            if family == "arb-x" else None
        recon = np.zeros_like(block_w)
        zones_out = []
        for zone in zone_names:
            mask = zone_masks[zone][:, cols]
            quant, trace = _quantize_zone(
                family, block_w, mask, _zone_order(zone, config), iterations, stats_block
            )
            recon += quant.reconstruct()
            zones_out.append((zone, quant, trace))
        return recon, zones_out

    if config.compensate:
        result = compensated_quantize(w, hessian, config.block_k, quantize_block)
        pieces = result.pieces
    else:
        pieces, _ = _sweep(w, None, min(config.block_k, m), quantize_block)

    trace_initial = 0.0
    trace_final = 0.0
    blocks_out = []
    for piece in pieces:
        zones_stored = []
        for zone, quant, trace in piece.payload:
            totals = trace.totals()
            trace_initial += float(totals[0])
            trace_final += float(totals[-1])
            zones_stored.append((zone, _stored_precision(quant)))
        blocks_out.append(tuple(zones_stored))

    salient_count = int(salient_cols.sum())
    budget = layer_bit_budget(
        n, m, config.block_k, config.method, config.order,
        config.effective_cgb, salient_count, config.scale_bytes,
    )
    layer = QuantizedLayer(
        name=name,
        n=n,
        m=m,
        method=config.method,
        order=config.order,
        block_k=config.block_k,
        cgb=config.effective_cgb,
        maps=maps,
        budget=budget,
        blocks=tuple(blocks_out),
    )

    recon = layer.reconstruct()
    resid = w - recon
    l1 = float((resid * resid).sum())
    l2 = l2_error(resid, stats)
    mse = output_mse(w, recon, holdout)

    recon0 = np.zeros_like(w)
    k = min(config.block_k, m)
    for start in range(0, m, k):
        cols = slice(start, min(start + k, m))
        for zone in zone_names:
            mask = zone_masks[zone][:, cols]
            recon0[:, cols] += _zone_t0_recon(family, w[:, cols], mask, _zone_order(zone, config))
    shift_pre = float(np.abs(residual_shift_profile(w, recon0)).mean())
    shift_post = float(np.abs(residual_shift_profile(w, recon)).mean())

    prof_w = column_deviation_profile(w)
    prof_q = column_deviation_profile(recon)
    if prof_w.std() > 0 and prof_q.std() > 0:
        corr = float(np.corrcoef(prof_w, prof_q)[0, 1])
    else:
        corr = 1.0 if np.allclose(prof_w, prof_q) else 0.0

    report = QuantReport(
        name=name,
        n=n,
        m=m,
        method=config.method,
        order=config.order,
        iterations=iterations,
        block_k=config.block_k,
        cgb=config.effective_cgb,
        compensated=config.compensate,
        salient_fraction=chosen_fraction,
        salient_count=salient_count,
        l1=l1,
        l2=l2,
        output_mse=mse,
        shift_pre=shift_pre,
        shift_post=shift_post,
        col_dev_corr=corr,
        trace_initial=trace_initial,
        trace_final=trace_final,
        plane_bits=budget.plane_bits,
        bitmap_bits=budget.bitmap_bits,
        scale_bits=budget.scale_bits,
        total_bytes=budget.total_bytes,
        avg_weight_bits=budget.avg_weight_bits,
        wall_time=time.perf_counter() - t_start,
    )
    return layer, report


def _zone_t0_recon(family, w, mask, order):
    # arb-x shares its closed-form init with arb, so the pre-refinement
    # snapshot never needs calibration stats.
    fam = "arb" if family == "arb-x" else family
    quant, _ = _quantize_zone(fam, w, mask, order, 0, None)
    return quant.reconstruct()


def quantize_model(
    named_layers: Sequence[tuple[str, np.ndarray]],
    calib_for: Callable[[str, int], Iterable[np.ndarray]],
    config: QuantConfig,
):
    """Quantize a sequence of named layers; returns a list of
    (QuantizedLayer, QuantReport). ``calib_for(name, m)`` supplies the
    calibration batches for each layer."""
    out = []
    for name, w in named_layers:
        w = as_weight_matrix(w, name)
        layer, report = quantize_layer(w, calib_for(name, w.shape[1]), config, name=name)
        log.info(
            "%s: l1=%.6g l2=%.6g mse=%.6g bits=%.3f (%.2fs)",
            name, report.l1, report.l2, report.output_mse,
            report.avg_weight_bits, report.wall_time,
        )
        out.append((layer, report))
    return out
