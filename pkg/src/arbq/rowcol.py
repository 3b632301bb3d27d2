"""Row-column scaled binarization: reconstruction alpha_r x alpha_c x B.

Per-row scales cannot track weight matrices whose magnitude varies strongly
by column; factoring the scale into a per-row and a per-column vector does,
at negligible storage cost. There is no additive mean here: the sign plane
is fixed at sign(W) and refinement alternates exact least-squares updates of
the two scale vectors, each conditioned on the other.

Only the product alpha_r[i] * alpha_c[j] is identified; any nonzero factor
can move between the vectors without changing the reconstruction. Comparisons
therefore go through reconstructions, and :meth:`gauge_fixed` canonicalizes
for serialization by rescaling alpha_c to unit mean absolute value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .binarize import EPS, ArbTrace
from .errors import ValidationError
from .planes import (
    BitMask,
    SignPlane,
    as_mask,
    as_weight_matrix,
    sign_plus,
)

__all__ = [
    "RowColQuant",
    "RowColQuant2",
    "rc_init",
    "rc_error",
    "refine_alpha_r",
    "refine_alpha_c",
    "arbrc_first_order",
    "arbrc_second_order",
]

log = logging.getLogger(__name__)


def _check_rc_arrays(alpha_r, alpha_c, plane, mask, label):
    n, m = plane.rows, plane.cols
    if alpha_r.shape != (n,) or alpha_c.shape != (m,):
        raise ValidationError(f"{label}: scale shapes do not match plane {n}x{m}")
    if not (np.isfinite(alpha_r).all() and np.isfinite(alpha_c).all()):
        raise ValidationError(f"{label}: non-finite scales")
    if (mask.rows, mask.cols) != (n, m):
        raise ValidationError(f"{label}: mask shape does not match plane")


def _gauge(alpha_r, alpha_c, scope_cols):
    """Rescale so the mean |alpha_c| over in-scope columns is 1."""
    if scope_cols.any():
        g = float(np.abs(alpha_c[scope_cols]).mean())
        if g > 0.0:
            return alpha_r * g, alpha_c / g
    return alpha_r, alpha_c


@dataclass(frozen=True)
class RowColQuant:
    """One sign plane scaled by a row vector and a column vector."""

    alpha_r: np.ndarray
    alpha_c: np.ndarray
    plane: SignPlane
    mask: BitMask

    def __post_init__(self):
        _check_rc_arrays(self.alpha_r, self.alpha_c, self.plane, self.mask, "RowColQuant")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.plane.rows, self.plane.cols)

    def reconstruct(self) -> np.ndarray:
        rec = self.alpha_r[:, None] * self.alpha_c[None, :] * self.plane.signs()
        return np.where(self.mask.bools(), rec, 0.0)

    def gauge_fixed(self) -> "RowColQuant":
        scope = self.mask.bools().any(axis=0)
        ar, ac = _gauge(self.alpha_r, self.alpha_c, scope)
        return replace(self, alpha_r=ar, alpha_c=ac)


@dataclass(frozen=True)
class RowColQuant2:
    """Two row-column scaled planes, the second fitted to the residual."""

    alpha_r1: np.ndarray
    alpha_c1: np.ndarray
    plane1: SignPlane
    alpha_r2: np.ndarray
    alpha_c2: np.ndarray
    plane2: SignPlane
    mask: BitMask

    def __post_init__(self):
        _check_rc_arrays(self.alpha_r1, self.alpha_c1, self.plane1, self.mask, "RowColQuant2")
        _check_rc_arrays(self.alpha_r2, self.alpha_c2, self.plane2, self.mask, "RowColQuant2")
        if (self.plane2.rows, self.plane2.cols) != (self.plane1.rows, self.plane1.cols):
            raise ValidationError("RowColQuant2: plane shapes differ")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.plane1.rows, self.plane1.cols)

    def reconstruct(self) -> np.ndarray:
        rec = (
            self.alpha_r1[:, None] * self.alpha_c1[None, :] * self.plane1.signs()
            + self.alpha_r2[:, None] * self.alpha_c2[None, :] * self.plane2.signs()
        )
        return np.where(self.mask.bools(), rec, 0.0)

    def gauge_fixed(self) -> "RowColQuant2":
        scope = self.mask.bools().any(axis=0)
        ar1, ac1 = _gauge(self.alpha_r1, self.alpha_c1, scope)
        ar2, ac2 = _gauge(self.alpha_r2, self.alpha_c2, scope)
        return replace(self, alpha_r1=ar1, alpha_c1=ac1, alpha_r2=ar2, alpha_c2=ac2)


def _rc_init_arrays(w: np.ndarray, mask: np.ndarray):
    """Magnitude-mean init: row scales from |W| row means, column scales from
    row-normalized magnitudes, plane from sign(W). Rows with zero scale are
    skipped in the column means."""
    mf = mask.astype(np.float64)
    cnt_r = np.maximum(mf.sum(axis=1), 1.0)
    alpha_r = (np.abs(w) * mf).sum(axis=1) / cnt_r
    live = alpha_r > 0.0
    contrib = mf * live[:, None]
    cnt_c = np.maximum(contrib.sum(axis=0), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(live[:, None], np.abs(w) / np.where(alpha_r[:, None] > 0, alpha_r[:, None], 1.0), 0.0)
    alpha_c = (ratio * contrib).sum(axis=0) / cnt_c
    signs = np.where(mask, sign_plus(w), np.int8(1))
    return alpha_r, alpha_c, signs


def rc_init(w, mask) -> RowColQuant:
    """Closed-form row-column init (no refinement)."""
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    alpha_r, alpha_c, signs = _rc_init_arrays(w, mb)
    return RowColQuant(
        alpha_r=alpha_r,
        alpha_c=alpha_c,
        plane=SignPlane.from_signs(signs),
        mask=BitMask.from_bools(mb),
    )


def _rc_error_raw(w: np.ndarray, mask: np.ndarray, order: int) -> float:
    # hot path for partition searches: no validation, magnitudes only
    mf = mask.astype(np.float64)
    cnt_r = np.maximum(mf.sum(axis=1), 1.0)
    a = np.abs(w) * mf
    for _ in range(order):
        ar = a.sum(axis=1) / cnt_r
        live = ar > 0.0
        contrib = mf * live[:, None]
        cnt_c = np.maximum(contrib.sum(axis=0), 1.0)
        ac = ((a / np.where(live, ar, 1.0)[:, None]) * live[:, None]).sum(axis=0) / cnt_c
        # masked magnitude residual; feeds the next plane unchanged because
        # |s(|w| - p)| = ||w| - p|
        a = np.abs(a - ar[:, None] * ac[None, :] * mf)
    return float((a * a).sum())


def rc_error(w, mask, order: int = 1) -> float:
    """Closed-form row-column init error without building quant objects.

    Cheap scorer for partition searches, mirroring
    :func:`arbq.binarize.binary_error` for the row-column method. Works on
    magnitudes throughout: with the plane at sign(W) the masked residual is
    sign(W) * (|W| - alpha_r alpha_c), so only |W| is needed.
    """
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    return _rc_error_raw(w, mb, order)


def refine_alpha_r(w, alpha_c, signs, mask) -> np.ndarray:
    """Least-squares row scales for fixed column scales and plane:
    per row, sum of W * (alpha_c B) over the mask / sum of (alpha_c B)^2."""
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    basis = alpha_c[None, :] * signs
    num = np.where(mb, w * basis, 0.0).sum(axis=1)
    den = np.where(mb, basis * basis, 0.0).sum(axis=1)
    dead = mb.any(axis=1) & (den <= 0.0)
    if dead.any():
        log.warning("refine_alpha_r: %d live rows with zero basis norm", int(dead.sum()))
    return num / (den + EPS)


def refine_alpha_c(w, alpha_r, signs, mask) -> np.ndarray:
    """Least-squares column scales for fixed row scales and plane (the
    column-wise mirror of :func:`refine_alpha_r`)."""
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    basis = alpha_r[:, None] * signs
    num = np.where(mb, w * basis, 0.0).sum(axis=0)
    den = np.where(mb, basis * basis, 0.0).sum(axis=0)
    dead = mb.any(axis=0) & (den <= 0.0)
    if dead.any():
        log.warning("refine_alpha_c: %d live columns with zero basis norm", int(dead.sum()))
    return num / (den + EPS)


def _l1_rows(w, rec, mask):
    r = np.where(mask, w - rec, 0.0)
    return (r * r).sum(axis=1)


def arbrc_first_order(w, mask, iterations: int, tol: float | None = None):
    """Alternating row/column scale refinement with the plane fixed.

    Each iteration refines the row scales then the column scales, both exact
    conditional minimizers (the same updates as :func:`refine_alpha_r` and
    :func:`refine_alpha_c`, phrased as matrix products against the fixed
    masked plane), so the per-iteration error trace is non-increasing. The
    trace records per-row squared error at iteration end.
    """
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    if iterations < 0:
        raise ValidationError("arbrc_first_order: iterations must be >= 0")
    alpha_r, alpha_c, signs = _rc_init_arrays(w, mb)
    mf = mb.astype(np.float64)
    sm = signs * mf
    ws = w * sm
    wm = w * mf

    def l1_rows():
        r = wm - alpha_r[:, None] * (alpha_c[None, :] * sm)
        return (r * r).sum(axis=1)

    l1s = [l1_rows()]
    for _ in range(iterations):
        alpha_r = (ws @ alpha_c) / (mf @ (alpha_c * alpha_c) + EPS)
        alpha_c = (ws.T @ alpha_r) / (mf.T @ (alpha_r * alpha_r) + EPS)
        l1s.append(l1_rows())
        if tol is not None and len(l1s) >= 2:
            if l1s[-2].sum() - l1s[-1].sum() < tol * (l1s[0].sum() + 1.0):
                break

    quant = RowColQuant(
        alpha_r=alpha_r,
        alpha_c=alpha_c,
        plane=SignPlane.from_signs(signs),
        mask=BitMask.from_bools(mb),
    )
    return quant, ArbTrace(l1=np.array(l1s))


def arbrc_second_order(w, mask, iterations: int, tol: float | None = None):
    """Two-plane row-column refinement.

    The second plane is initialized on the first's residual; each iteration
    refines plane 1's scales against W minus plane 2's contribution, then
    plane 2's against the updated plane 1. Both planes keep their init signs.
    """
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    if iterations < 0:
        raise ValidationError("arbrc_second_order: iterations must be >= 0")
    ar1, ac1, s1 = _rc_init_arrays(w, mb)
    mf = mb.astype(np.float64)
    sm1 = s1 * mf
    r1 = w * mf - ar1[:, None] * (ac1[None, :] * sm1)
    ar2, ac2, s2 = _rc_init_arrays(r1, mb)
    sm2 = s2 * mf
    wm = w * mf

    def l1_rows():
        r = wm - ar1[:, None] * (ac1[None, :] * sm1) \
            - ar2[:, None] * (ac2[None, :] * sm2)
        return (r * r).sum(axis=1)

    l1s = [l1_rows()]
    for _ in range(iterations):
        target = wm - ar2[:, None] * (ac2[None, :] * sm2)
        ts = target * sm1
        ar1 = (ts @ ac1) / (mf @ (ac1 * ac1) + EPS)
        ac1 = (ts.T @ ar1) / (mf.T @ (ar1 * ar1) + EPS)
        target = wm - ar1[:, None] * (ac1[None, :] * sm1)
        ts = target * sm2
        ar2 = (ts @ ac2) / (mf @ (ac2 * ac2) + EPS)
        ac2 = (ts.T @ ar2) / (mf.T @ (ar2 * ar2) + EPS)
        l1s.append(l1_rows())
        if tol is not None and len(l1s) >= 2:
            if l1s[-2].sum() - l1s[-1].sum() < tol * (l1s[0].sum() + 1.0):
                break

    quant = RowColQuant2(
        alpha_r1=ar1,
        alpha_c1=ac1,
        plane1=SignPlane.from_signs(s1),
        alpha_r2=ar2,
        alpha_c2=ac2,
        plane2=SignPlane.from_signs(s2),
        mask=BitMask.from_bools(mb),
    )
    return quant, ArbTrace(l1=np.array(l1s))
