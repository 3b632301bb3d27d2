"""Hessian-guided partitioning of a weight matrix into quantization zones.

The layer Hessian proxy H = 2 S + lambda I (S the activation second moment,
lambda a fraction of its mean diagonal) ranks columns by how much output
error a weight perturbation costs: the per-element sensitivity is
``W_ij^2 / [H^-1]_jj^2``. The top columns by aggregated sensitivity become
the salient set C_s and get the second plane.

Within a column scope, magnitudes split further into a sparse group (above a
percentile threshold) and a concentrated group; the threshold is chosen per
block by grid search over candidate percentiles, always including the
no-split option, scored by the binarization error of the two groups.

A column-group bitmap G combines with C_s into element masks

    G_s  = broadcast(C_s)  & G      (salient rows of G)
    G_ns = broadcast(~C_s) & G      (non-salient rows of G)

and the four zones {salient, non-salient} x {sparse, concentrated} tile the
matrix disjointly. The module also carries the storage cost ledger: packed
planes, bitmaps, grouped scales, and unquantized 16-bit tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .binarize import binary_error
from .errors import SingularHessianError, ValidationError
from .planes import as_mask, as_weight_matrix

__all__ = [
    "DEFAULT_SALIENT_FRACTIONS",
    "DEFAULT_PERCENTILE_GRID",
    "PartitionMaps",
    "SensitivityScores",
    "BitBudget",
    "hessian_from_stats",
    "invert_spd",
    "inverse_diag",
    "sensitivity",
    "select_salient_columns",
    "split_groups",
    "build_cgb",
    "avg_bits",
    "layer_bit_budget",
    "memory_estimate",
    "llama_7b_manifest",
]

DEFAULT_SALIENT_FRACTIONS = (1 / 32, 1 / 16, 3 / 32, 1 / 8, 5 / 32)
DEFAULT_PERCENTILE_GRID = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


def hessian_from_stats(stats, damping_fraction: float = 0.01) -> np.ndarray:
    """H = 2 S + lambda I with lambda = damping_fraction * mean(diag S).

    A zero diagonal leaves H undamped (and typically singular); downstream
    factorization reports that case.
    """
    if damping_fraction < 0:
        raise ValidationError("hessian_from_stats: damping fraction must be >= 0")
    s = stats.s_matrix
    lam = damping_fraction * float(np.diagonal(s).mean()) if s.size else 0.0
    return 2.0 * s + lam * np.eye(s.shape[0])


def invert_spd(h: np.ndarray) -> np.ndarray:
    """Full inverse of a symmetric positive definite matrix via Cholesky."""
    h = as_weight_matrix(h, "hessian")
    if h.shape[0] != h.shape[1]:
        raise ValidationError(f"invert_spd: expected square matrix, got {h.shape}")
    try:
        factor = scipy.linalg.cho_factor(h, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularHessianError(f"Cholesky factorization failed: {exc}") from exc
    inv = scipy.linalg.cho_solve(factor, np.eye(h.shape[0]), check_finite=False)
    return (inv + inv.T) / 2.0


def inverse_diag(h: np.ndarray) -> np.ndarray:
    """Diagonal of H^-1 without materializing the full inverse.

    With H = L L', the i-th diagonal entry of the inverse is the squared
    norm of the i-th column of L^-1.
    """
    h = as_weight_matrix(h, "hessian")
    if h.shape[0] != h.shape[1]:
        raise ValidationError(f"inverse_diag: expected square matrix, got {h.shape}")
    try:
        chol = np.linalg.cholesky(h)
    except np.linalg.LinAlgError as exc:
        raise SingularHessianError(f"Cholesky factorization failed: {exc}") from exc
    linv = scipy.linalg.solve_triangular(
        chol, np.eye(h.shape[0]), lower=True, check_finite=False
    )
    return (linv * linv).sum(axis=0)


@dataclass(frozen=True)
class SensitivityScores:
    """Per-element salience and its per-column aggregate."""

    values: np.ndarray
    column_totals: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValidationError("SensitivityScores: values must be 2-D")
        if self.column_totals.shape != (self.values.shape[1],):
            raise ValidationError("SensitivityScores: column totals shape mismatch")


def sensitivity(w, inv_diag: np.ndarray) -> SensitivityScores:
    """Per-element scores W_ij^2 / inv_diag_j^2 and their column sums."""
    w = as_weight_matrix(w)
    inv_diag = np.asarray(inv_diag, dtype=np.float64)
    if inv_diag.shape != (w.shape[1],):
        raise ValidationError(
            f"sensitivity: inverse diagonal shape {inv_diag.shape} != ({w.shape[1]},)"
        )
    if not np.isfinite(inv_diag).all() or (inv_diag <= 0).any():
        raise ValidationError("sensitivity: inverse diagonal must be finite and positive")
    values = (w / inv_diag[None, :]) ** 2
    return SensitivityScores(values=values, column_totals=values.sum(axis=0))


def select_salient_columns(
    scores: SensitivityScores,
    fractions: Sequence[float] = DEFAULT_SALIENT_FRACTIONS,
    eval_fn: Callable[[np.ndarray], float] | None = None,
) -> tuple[np.ndarray, float]:
    """Choose a salient column set from candidate fractions.

    For each fraction r the top ceil(r * m) columns by aggregate score are
    proposed (rank ties resolved toward the lower column index). Candidates
    are scored by ``eval_fn`` (lower is better; first candidate wins ties);
    without an ``eval_fn`` the first fraction is taken as configured.
    Returns the chosen column mask and fraction.
    """
    if len(fractions) == 0:
        raise ValidationError("select_salient_columns: no candidate fractions")
    m = scores.column_totals.shape[0]
    for r in fractions:
        if not 0.0 <= r <= 1.0:
            raise ValidationError(f"select_salient_columns: fraction {r} outside [0, 1]")
    order = np.argsort(-scores.column_totals, kind="stable")
    best_mask = None
    best_r = None
    best_err = np.inf
    for r in fractions:
        count = int(np.ceil(r * m))
        mask = np.zeros(m, dtype=bool)
        mask[order[:count]] = True
        if eval_fn is None:
            return mask, float(r)
        err = float(eval_fn(mask))
        if err < best_err:
            best_mask, best_r, best_err = mask, float(r), err
    return best_mask, best_r


def split_groups(
    w,
    column_scope: np.ndarray,
    percentile_grid: Sequence[float] = DEFAULT_PERCENTILE_GRID,
    eval_fn: Callable[[np.ndarray, np.ndarray], float] | None = None,
) -> tuple[np.ndarray, float | None]:
    """Split the entries of a column scope into sparse/concentrated groups.

    For each candidate percentile p, the threshold is the lower-interpolation
    p-quantile of |W| over the scope and the sparse group G is ``|W| >
    threshold``. Candidates are scored by ``eval_fn(G, scope)`` (default:
    total first-order binarization error of the two groups quantized
    independently); the grid always ends with the no-split candidate, and
    earlier candidates win ties, so the chosen split never scores worse than
    not splitting. Returns (G restricted to the scope, chosen percentile or
    None for no-split).
    """
    w = as_weight_matrix(w)
    scope = as_mask(column_scope, name="column_scope")
    if scope.shape != (w.shape[1],):
        raise ValidationError(
            f"split_groups: column scope shape {scope.shape} != ({w.shape[1]},)"
        )
    for p in percentile_grid:
        if not 0.0 < p < 1.0:
            raise ValidationError(f"split_groups: percentile {p} outside (0, 1)")
    scope_elems = np.broadcast_to(scope[None, :], w.shape)
    none_g = np.zeros(w.shape, dtype=bool)
    if not scope.any():
        return none_g, None
    if eval_fn is None:
        def eval_fn(g, scope_e):
            return binary_error(w, g) + binary_error(w, scope_e & ~g)
    mags = np.abs(w[:, scope])
    thresholds = np.quantile(mags, np.asarray(percentile_grid, dtype=np.float64),
                             method="lower")

    best_g, best_p = none_g, None
    best_err = np.inf
    abs_w = np.abs(w)
    candidates: list[tuple[float | None, np.ndarray]] = []
    for p, thr in zip(percentile_grid, thresholds):
        candidates.append((float(p), scope_elems & (abs_w > float(thr))))
    candidates.append((None, none_g))
    for p, g in candidates:
        err = float(eval_fn(g, scope_elems))
        if err < best_err:
            best_g, best_p, best_err = g, p, err
    return best_g, best_p


@dataclass(frozen=True)
class PartitionMaps:
    """Salient column mask and sparse/concentrated group bitmap for a layer."""

    salient_cols: np.ndarray
    group: np.ndarray

    def __post_init__(self):
        if self.group.ndim != 2:
            raise ValidationError("PartitionMaps: group bitmap must be 2-D")
        if self.salient_cols.shape != (self.group.shape[1],):
            raise ValidationError("PartitionMaps: column mask width mismatch")

    @property
    def shape(self) -> tuple[int, int]:
        return self.group.shape

    def zone(self, salient: bool, sparse: bool) -> np.ndarray:
        cols = self.salient_cols if salient else ~self.salient_cols
        g = self.group if sparse else ~self.group
        return cols[None, :] & g

    def zones_cgb(self) -> dict[str, np.ndarray]:
        """The four disjoint covering zones."""
        return {
            "salient_sparse": self.zone(True, True),
            "salient_conc": self.zone(True, False),
            "nonsalient_sparse": self.zone(False, True),
            "nonsalient_conc": self.zone(False, False),
        }

    def zones_undivided_salient(self) -> dict[str, np.ndarray]:
        """Three zones with the salient columns kept whole."""
        cols = self.salient_cols
        return {
            "salient": np.broadcast_to(cols[None, :], self.group.shape),
            "nonsalient_sparse": self.zone(False, True),
            "nonsalient_conc": self.zone(False, False),
        }


def build_cgb(salient_cols: np.ndarray, group: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Element masks G_s, G_ns: the group bitmap gated by the column mask and
    its complement."""
    cols = as_mask(salient_cols, name="salient_cols")
    g = as_mask(group, name="group")
    if cols.shape != (g.shape[1],):
        raise ValidationError(f"build_cgb: column mask shape {cols.shape} != ({g.shape[1]},)")
    return cols[None, :] & g, (~cols)[None, :] & g


def avg_bits(n: int, m: int, salient_fraction: float) -> float:
    """Average plane bits per weight: 1 + salient fraction."""
    if n <= 0 or m <= 0:
        raise ValidationError("avg_bits: empty layer")
    if not 0.0 <= salient_fraction <= 1.0:
        raise ValidationError("avg_bits: salient fraction outside [0, 1]")
    return 1.0 + salient_fraction


@dataclass(frozen=True)
class BitBudget:
    """Storage ledger in bits (planes, bitmaps, scales, 16-bit extras)."""

    plane_bits: int
    bitmap_bits: int
    scale_bits: int
    extra_bits: int
    weight_count: int

    def __post_init__(self):
        for f in (self.plane_bits, self.bitmap_bits, self.scale_bits, self.extra_bits):
            if f < 0:
                raise ValidationError("BitBudget: negative component")

    @property
    def avg_weight_bits(self) -> float:
        return self.plane_bits / self.weight_count if self.weight_count else 0.0

    @property
    def total_bits(self) -> int:
        return self.plane_bits + self.bitmap_bits + self.scale_bits + self.extra_bits

    @property
    def total_bytes(self) -> int:
        return (self.total_bits + 7) // 8

    def __add__(self, other: "BitBudget") -> "BitBudget":
        return BitBudget(
            plane_bits=self.plane_bits + other.plane_bits,
            bitmap_bits=self.bitmap_bits + other.bitmap_bits,
            scale_bits=self.scale_bits + other.scale_bits,
            extra_bits=self.extra_bits + other.extra_bits,
            weight_count=self.weight_count + other.weight_count,
        )


def layer_bit_budget(
    n: int,
    m: int,
    block_k: int,
    method: str,
    order: int,
    cgb: bool,
    salient_count: int,
    scale_bytes: int = 4,
) -> BitBudget:
    """Storage ledger for one quantized layer.

    Planes: one bit per weight plus one per weight in a salient column for
    order 2. Bitmaps: the full group bitmap plus the column mask. Scales:
    per (row, block) per zone per plane, one shared mean per zone for
    mean-carrying methods, and per-column scales per zone plane for the
    row-column method.
    """
    if n <= 0 or m <= 0 or block_k <= 0:
        raise ValidationError("layer_bit_budget: sizes must be positive")
    if not 0 <= salient_count <= m:
        raise ValidationError("layer_bit_budget: salient count outside [0, m]")
    if order not in (1, 2):
        raise ValidationError("layer_bit_budget: order must be 1 or 2")
    if scale_bytes not in (2, 4):
        raise ValidationError("layer_bit_budget: scale width must be 2 or 4 bytes")
    block_k = min(block_k, m)
    blocks = -(-m // block_k)
    plane_bits = n * m + (n * salient_count if order == 2 else 0)
    bitmap_bits = n * m + m
    salient_groups = 2 if cgb else 1
    ns_groups = 2
    if method in ("arb", "arb-x", "baseline-t0"):
        row_vals = (0 if salient_count == 0 else salient_groups * (order + 1)) + ns_groups * 2
        col_vals = 0
    elif method == "arb-rc":
        row_vals = (0 if salient_count == 0 else salient_groups * order) + ns_groups * 1
        col_vals = (salient_count * salient_groups * order
                    + (m - salient_count) * ns_groups * 1)
    else:
        raise ValidationError(f"layer_bit_budget: unknown method {method!r}")
    scale_values = n * blocks * row_vals + col_vals
    scale_bits = scale_values * scale_bytes * 8
    return BitBudget(
        plane_bits=plane_bits,
        bitmap_bits=bitmap_bits,
        scale_bits=scale_bits,
        extra_bits=0,
        weight_count=n * m,
    )


def memory_estimate(
    manifest: dict,
    method: str,
    cgb: bool,
    block_k: int,
    salient_fraction: float,
    order: int = 2,
    scale_bytes: int = 4,
) -> BitBudget:
    """Aggregate storage ledger for a model shape manifest.

    ``manifest`` maps "layers" to quantized (n, m) shapes and "fp16" to
    tensor shapes kept at 16 bits (embeddings, head, norms). The salient
    count per layer is ceil(salient_fraction * m).
    """
    if not 0.0 <= salient_fraction <= 1.0:
        raise ValidationError("memory_estimate: salient fraction outside [0, 1]")
    total = BitBudget(0, 0, 0, 0, 0)
    for shape in manifest.get("layers", ()):
        n, m = shape
        count = int(np.ceil(salient_fraction * m))
        total = total + layer_bit_budget(
            n, m, block_k, method, order, cgb, count, scale_bytes
        )
    extra = 0
    for shape in manifest.get("fp16", ()):
        extra += 16 * int(np.prod(shape))
    return BitBudget(
        plane_bits=total.plane_bits,
        bitmap_bits=total.bitmap_bits,
        scale_bits=total.scale_bits,
        extra_bits=total.extra_bits + extra,
        weight_count=total.weight_count,
    )


def llama_7b_manifest() -> dict:
    """Shape manifest for the 32-layer 4096-wide / 11008-FFN architecture
    with untied 32000-token embeddings and head kept at 16 bits."""
    layers = []
    for _ in range(32):
        layers += [(4096, 4096)] * 4          # attention projections
        layers += [(11008, 4096)] * 2         # FFN up / gate
        layers += [(4096, 11008)]             # FFN down
    fp16 = [(32000, 4096), (32000, 4096)]     # embeddings, output head
    fp16 += [(4096,)] * (2 * 32 + 1)          # per-layer and final norms
    return {"layers": layers, "fp16": fp16}
