"""Calibration statistics and activation-weighted binarization refinement.

The activation second-moment matrix S = sum_b X_b' X_b summarizes calibration
batches once; the output error of a residual R is then Tr(R S R') and never
touches raw activations again. Refinement under this metric updates means and
scales in closed form per row while keeping the sign planes fixed (re-signing
has no closed form under a non-diagonal metric).

``bench_l2_paths`` compares the two ways of scoring refinement steps over a
full layer: recomputing the activation product per step versus precomputing S
per column block and scoring against it. It reports counted multiply-
accumulates for both paths, optionally measured wall times, and the modelled
speedup ``1 / (k * (1 / (n T) + 1 / samples))``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .binarize import (
    EPS,
    ArbTrace,
    FirstOrderQuant,
    SecondOrderQuant,
    _binary_arrays,
)
from .errors import DegenerateCalibrationError, ValidationError
from .planes import BitMask, SignPlane, as_mask, as_weight_matrix

__all__ = [
    "CalibStats",
    "accumulate_second_moment",
    "l2_error",
    "refine_mu_x",
    "refine_alpha_x",
    "arbx_first_order",
    "arbx_second_order",
    "OpCounter",
    "BenchResult",
    "speedup_model",
    "bench_l2_paths",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibStats:
    """Symmetric PSD second-moment matrix of calibration activations."""

    s_matrix: np.ndarray
    sample_count: int

    def __post_init__(self):
        s = self.s_matrix
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValidationError(f"CalibStats: expected square matrix, got {s.shape}")
        if not np.isfinite(s).all():
            raise ValidationError("CalibStats: non-finite entries")
        if self.sample_count < 0:
            raise ValidationError("CalibStats: negative sample count")

    @property
    def dim(self) -> int:
        return self.s_matrix.shape[0]

    def restricted(self, cols: np.ndarray) -> "CalibStats":
        """Stats for a column subset (rows/cols of S sliced symmetrically)."""
        sub = self.s_matrix[np.ix_(cols, cols)]
        return CalibStats(s_matrix=sub, sample_count=self.sample_count)


def accumulate_second_moment(batches, validate: bool = True) -> CalibStats:
    """Sum X'X over calibration batches, each of shape (rows, m).

    The accumulated matrix is symmetrized once at the end to cancel rounding
    asymmetry. With ``validate`` the result is checked to be PSD up to
    -1e-8 * trace.
    """
    s = None
    count = 0
    for batch in batches:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2:
            raise ValidationError(f"calibration batch: expected 2-D, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise ValidationError("calibration batch: non-finite entries")
        if s is None:
            s = np.zeros((x.shape[1], x.shape[1]))
        elif x.shape[1] != s.shape[0]:
            raise ValidationError(
                f"calibration batch: width {x.shape[1]} != first batch width {s.shape[0]}"
            )
        s += x.T @ x
        count += x.shape[0]
    if s is None:
        raise ValidationError("accumulate_second_moment: no batches supplied")
    s = (s + s.T) / 2.0
    if validate:
        floor = -1e-8 * max(float(np.trace(s)), 1.0)
        if float(np.linalg.eigvalsh(s)[0]) < floor:
            raise ValidationError("accumulate_second_moment: matrix is not PSD")
    return CalibStats(s_matrix=s, sample_count=count)


def l2_error(resid, stats: CalibStats) -> float:
    """Output error Tr(R S R') of a residual matrix under the stats metric."""
    r = as_weight_matrix(resid, "residual")
    if r.shape[1] != stats.dim:
        raise ValidationError(f"l2_error: residual width {r.shape[1]} != stats dim {stats.dim}")
    return float(np.einsum("ij,ij->", r @ stats.s_matrix, r))


def _l2_rows(resid: np.ndarray, s: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", resid @ s, resid)


def refine_mu_x(w, alpha, signs, mask, stats: CalibStats) -> np.ndarray:
    """Stats-weighted mean update: per row, M S (masked residual)' / M S M'.

    Exact conditional minimizer of Tr(R S R') over the mean, with the
    residual taken as zero off the mask. Raises when the stats carry no
    signal at all (1'S1 = 0).
    """
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    s = stats.s_matrix
    if w.shape[1] != stats.dim:
        raise ValidationError(f"refine_mu_x: width {w.shape[1]} != stats dim {stats.dim}")
    if float(s.sum()) <= 0.0:
        raise DegenerateCalibrationError("refine_mu_x: calibration stats sum to zero")
    mf = mb.astype(np.float64)
    target = np.where(mb, w - alpha[:, None] * signs, 0.0)
    num = np.einsum("ij,ij->i", target @ s, mf)
    den = np.einsum("ij,ij->i", mf @ s, mf)
    return num / (den + EPS)


def refine_alpha_x(w, mu, signs, mask, stats: CalibStats) -> np.ndarray:
    """Stats-weighted scale update: per row, B~ S (W~ - mu M)' / B~ S B~'
    with B~ and W~ masked. Zero denominators yield zero with a warning."""
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    s = stats.s_matrix
    if w.shape[1] != stats.dim:
        raise ValidationError(f"refine_alpha_x: width {w.shape[1]} != stats dim {stats.dim}")
    bt = np.where(mb, signs, 0).astype(np.float64)
    target = np.where(mb, w - mu[:, None], 0.0)
    num = np.einsum("ij,ij->i", target @ s, bt)
    den = np.einsum("ij,ij->i", bt @ s, bt)
    dead = (den <= 0.0) & (np.abs(num) > 0.0)
    if dead.any():
        log.warning("refine_alpha_x: %d rows with zero metric denominator", int(dead.sum()))
    return num / (den + EPS)


def arbx_first_order(w, mask, stats: CalibStats, iterations: int, tol: float | None = None):
    """Single-plane refinement under the calibration metric.

    The plane is fixed at the closed-form init's signs; each iteration
    refines mean then scale in closed form. The trace records the per-row
    output error Tr(R S R') at the end of each iteration.
    """
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    if iterations < 0:
        raise ValidationError("arbx_first_order: iterations must be >= 0")
    s = stats.s_matrix
    alpha, mu, signs = _binary_arrays(w, mb)
    bf = signs.astype(np.float64)

    def resid():
        return np.where(mb, w - (alpha[:, None] * bf + mu[:, None]), 0.0)

    l2s = [_l2_rows(resid(), s)]
    alphas, mus = [alpha], [mu]
    for _ in range(iterations):
        mu = refine_mu_x(w, alpha, bf, mb, stats)
        alpha = refine_alpha_x(w, mu, bf, mb, stats)
        l2s.append(_l2_rows(resid(), s))
        alphas.append(alpha)
        mus.append(mu)
        if tol is not None and len(l2s) >= 2:
            if l2s[-2].sum() - l2s[-1].sum() < tol * (l2s[0].sum() + 1.0):
                break

    quant = FirstOrderQuant(
        alpha=alpha,
        mu=mu,
        plane=SignPlane.from_signs(signs),
        mask=BitMask.from_bools(mb),
    )
    trace = ArbTrace(l1=np.array(l2s), alpha=np.array(alphas), mu=np.array(mus))
    return quant, trace


def arbx_second_order(w, mask, stats: CalibStats, iterations: int, tol: float | None = None):
    """Two-plane refinement under the calibration metric.

    Planes are fixed at the residual-binarization init; each iteration
    refines the combined mean against both planes, then each scale in
    sequence against the other's contribution.
    """
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    if iterations < 0:
        raise ValidationError("arbx_second_order: iterations must be >= 0")
    s = stats.s_matrix
    if w.shape[1] != stats.dim:
        raise ValidationError(f"arbx_second_order: width {w.shape[1]} != stats dim {stats.dim}")
    if float(s.sum()) <= 0.0:
        raise DegenerateCalibrationError("arbx_second_order: calibration stats sum to zero")
    a1, mu1, s1 = _binary_arrays(w, mb)
    r = np.where(mb, w - (a1[:, None] * s1 + mu1[:, None]), 0.0)
    a2, mu2, s2 = _binary_arrays(r, mb)
    mu = mu1 + mu2
    b1 = np.where(mb, s1, 0).astype(np.float64)
    b2 = np.where(mb, s2, 0).astype(np.float64)
    mf = mb.astype(np.float64)
    den_mu = np.einsum("ij,ij->i", mf @ s, mf)
    den_a1 = np.einsum("ij,ij->i", b1 @ s, b1)
    den_a2 = np.einsum("ij,ij->i", b2 @ s, b2)

    def resid():
        rec = a1[:, None] * s1 + a2[:, None] * s2 + mu[:, None]
        return np.where(mb, w - rec, 0.0)

    l2s = [_l2_rows(resid(), s)]
    a1s, a2s, mus = [a1], [a2], [mu]
    for _ in range(iterations):
        target = np.where(mb, w - a1[:, None] * s1 - a2[:, None] * s2, 0.0)
        mu = np.einsum("ij,ij->i", target @ s, mf) / (den_mu + EPS)
        t1 = np.where(mb, w - mu[:, None] - a2[:, None] * s2, 0.0)
        a1 = np.einsum("ij,ij->i", t1 @ s, b1) / (den_a1 + EPS)
        t2 = np.where(mb, w - mu[:, None] - a1[:, None] * s1, 0.0)
        a2 = np.einsum("ij,ij->i", t2 @ s, b2) / (den_a2 + EPS)
        l2s.append(_l2_rows(resid(), s))
        a1s.append(a1)
        a2s.append(a2)
        mus.append(mu)
        if tol is not None and len(l2s) >= 2:
            if l2s[-2].sum() - l2s[-1].sum() < tol * (l2s[0].sum() + 1.0):
                break

    quant = SecondOrderQuant(
        alpha1=a1,
        alpha2=a2,
        mu=mu,
        plane1=SignPlane.from_signs(s1),
        plane2=SignPlane.from_signs(s2),
        mask=BitMask.from_bools(mb),
    )
    trace = ArbTrace(l1=np.array(l2s), alpha=np.array(a1s), mu=np.array(mus), alpha2=np.array(a2s))
    return quant, trace


@dataclass(frozen=True)
class OpCounter:
    """Counted multiply-accumulates plus optional measured wall time."""

    multiply_accumulate_count: int
    wall_time: float = 0.0


@dataclass(frozen=True)
class BenchResult:
    direct: OpCounter
    reformulated: OpCounter
    counted_eta: float
    measured_eta: float | None
    modelled_eta: float


def speedup_model(n: int, iterations: int, samples: int, block_k: int) -> float:
    """Modelled step-scoring speedup: 1 / (k * (1/(n T) + 1/samples))."""
    return 1.0 / (block_k * (1.0 / (n * iterations) + 1.0 / samples))


def _block_slices(m: int, k: int):
    return [slice(i, min(i + k, m)) for i in range(0, m, k)]


def bench_l2_paths(
    n: int,
    m: int,
    samples: int,
    iterations: int,
    block_k: int,
    seed: int = 0,
    measure: bool = True,
) -> BenchResult:
    """Count (and optionally time) step scoring via raw activations vs stats.

    Both paths score one refinement step per column block per iteration. The
    direct path multiplies the block residual against the raw activation
    slice each time; the reformulated path accumulates the block's
    second-moment matrix once and scores against it. Counted MACs cover the
    matrix products only. Timed arithmetic runs in single precision; the
    counts are dtype-independent.
    """
    if min(n, m, samples, iterations, block_k) <= 0:
        raise ValidationError("bench_l2_paths: all sizes must be positive")
    blocks = _block_slices(m, block_k)
    direct_macs = sum(iterations * n * (b.stop - b.start) * samples for b in blocks)
    reform_macs = sum(
        (b.stop - b.start) ** 2 * samples + iterations * n * (b.stop - b.start) ** 2
        for b in blocks
    )
    counted_eta = direct_macs / reform_macs

    direct_time = 0.0
    reform_time = 0.0
    measured_eta = None
    if measure:
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((samples, m)).astype(np.float32)
        resid = rng.standard_normal((n, m)).astype(np.float32) * np.float32(0.05)

        t0 = time.perf_counter()
        for b in blocks:
            xb = np.ascontiguousarray(x[:, b])
            rb = np.ascontiguousarray(resid[:, b])
            for _ in range(iterations):
                prod = xb @ rb.T
                float((prod * prod).sum())
        direct_time = time.perf_counter() - t0

        t0 = time.perf_counter()
        for b in blocks:
            xb = np.ascontiguousarray(x[:, b])
            rb = np.ascontiguousarray(resid[:, b])
            sb = xb.T @ xb
            for _ in range(iterations):
                float(np.einsum("ij,ij->", rb @ sb, rb))
        reform_time = time.perf_counter() - t0
        measured_eta = direct_time / reform_time if reform_time > 0 else float("inf")

    return BenchResult(
        direct=OpCounter(direct_macs, direct_time),
        reformulated=OpCounter(reform_macs, reform_time),
        counted_eta=counted_eta,
        measured_eta=measured_eta,
        modelled_eta=speedup_model(n, iterations, samples, block_k),
    )
