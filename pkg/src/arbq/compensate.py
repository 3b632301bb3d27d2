"""Block-wise error compensation during quantization.

Columns are quantized in blocks of ``block_k``. After a block is quantized,
each of its columns in turn contributes a normalized error
``e = (w - w_hat) / [H^-1]_qq`` (w taken from the working copy, which has
already absorbed corrections from columns to its left), and ``e`` times the
corresponding H^-1 row segment is subtracted from the still-real-valued
columns to the right, first inside the block and then, batched, from
everything beyond it. Quantizing a column therefore sees the accumulated
corrections of every previously processed column, which is what ties the
scheme to the output error metric instead of the raw weight error.

With a diagonal H all correction terms are exactly zero and the sweep is
bit-identical to quantizing each block of the original matrix directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ValidationError
from .partition import invert_spd
from .planes import as_weight_matrix

__all__ = [
    "BlockPiece",
    "CompensationResult",
    "compensated_quantize",
    "compensation_gain",
]

# Relative floor applied to [H^-1]_qq before dividing; keeps a pathological
# tiny diagonal from blowing up the correction.
_DIAG_FLOOR_FRACTION = 1e-12


@dataclass(frozen=True)
class BlockPiece:
    """One quantized column block: its slice, reconstruction, and whatever
    the block quantizer returned (zone quants, traces, ...)."""

    cols: slice
    reconstruction: np.ndarray
    payload: object


@dataclass(frozen=True)
class CompensationResult:
    pieces: list
    reconstruction: np.ndarray
    final_l2: float


def _sweep(
    w: np.ndarray,
    h_inv: np.ndarray | None,
    block_k: int,
    quantize_block: Callable[[np.ndarray, slice], tuple[np.ndarray, object]],
) -> tuple[list, np.ndarray]:
    n, m = w.shape
    work = w.copy()
    recon = np.zeros_like(w)
    pieces = []
    floor = (
        _DIAG_FLOOR_FRACTION * float(np.diagonal(h_inv).mean())
        if h_inv is not None
        else 0.0
    )
    for start in range(0, m, block_k):
        stop = min(start + block_k, m)
        cols = slice(start, stop)
        block = work[:, cols].copy()
        q_block, payload = quantize_block(block, cols)
        q_block = np.asarray(q_block, dtype=np.float64)
        if q_block.shape != (n, stop - start):
            raise ValidationError(
                f"block quantizer returned shape {q_block.shape}, "
                f"expected {(n, stop - start)}"
            )
        recon[:, cols] = q_block
        pieces.append(BlockPiece(cols=cols, reconstruction=q_block, payload=payload))
        if h_inv is None:
            continue
        err = np.empty((n, stop - start))
        for j in range(stop - start):
            q = start + j
            d = max(float(h_inv[q, q]), floor)
            e = (work[:, q] - q_block[:, j]) / d
            err[:, j] = e
            if j + 1 < stop - start:
                work[:, q + 1 : stop] -= e[:, None] * h_inv[q, q + 1 : stop][None, :]
        if stop < m:
            work[:, stop:] -= err @ h_inv[cols, stop:]
    return pieces, recon


def compensated_quantize(
    w,
    hessian: np.ndarray,
    block_k: int,
    quantize_block: Callable[[np.ndarray, slice], tuple[np.ndarray, object]],
) -> CompensationResult:
    """Quantize column blocks left to right with error compensation.

    ``quantize_block(block, cols)`` receives the current working values of
    one block and its column slice, and returns ``(reconstruction,
    payload)``. The final error is Tr(R S R') with S = H/2 and R the
    residual against the original matrix.
    """
    w = as_weight_matrix(w)
    hessian = as_weight_matrix(hessian, "hessian")
    if hessian.shape != (w.shape[1], w.shape[1]):
        raise ValidationError(
            f"compensated_quantize: hessian shape {hessian.shape} does not match "
            f"{w.shape[1]} columns"
        )
    if block_k <= 0:
        raise ValidationError("compensated_quantize: block size must be positive")
    block_k = min(block_k, w.shape[1])
    h_inv = invert_spd(hessian)
    pieces, recon = _sweep(w, h_inv, block_k, quantize_block)
    resid = w - recon
    final_l2 = 0.5 * float(np.einsum("ij,ij->", resid @ hessian, resid))
    return CompensationResult(pieces=pieces, reconstruction=recon, final_l2=final_l2)


def compensation_gain(
    w,
    hessian: np.ndarray,
    block_k: int,
    quantize_block: Callable[[np.ndarray, slice], tuple[np.ndarray, object]],
) -> tuple[float, float]:
    """(compensated, uncompensated) final error under the S = H/2 metric.

    The uncompensated reference quantizes each block of the original matrix
    with no propagation.
    """
    w = as_weight_matrix(w)
    comp = compensated_quantize(w, hessian, block_k, quantize_block)
    block_k = min(block_k, w.shape[1])
    _, recon = _sweep(w, None, block_k, quantize_block)
    resid = w - recon
    direct_l2 = 0.5 * float(np.einsum("ij,ij->", resid @ hessian, resid))
    return comp.final_l2, direct_l2
