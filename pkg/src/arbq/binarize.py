"""Alternating refined binarization of weight rows under an element mask.

A first-order quant approximates masked entries of W by ``alpha * B + mu``
with per-row scale ``alpha``, per-row mean ``mu`` and a sign plane ``B``.
Refinement alternates exact conditional minimizers of the squared masked
reconstruction error: the mean update absorbs the current residual row mean,
the scale update is the least-squares fit against the current plane, and the
plane update re-signs against the updated mean.

A second-order quant adds a second plane fitted to the residual of the first;
its combined mean folds both passes into a single ``mu``. Scale refinement is
sequential (first plane, then second) and the plane pair is re-selected per
element by nearest reconstruction among all four sign combinations.

Iteration traces snapshot per-row parameters and errors. For the first-order
loop the snapshot is taken right after the scale update, i.e. against the
plane those scales were fitted to; the sign refresh then closes the iteration.
At that point the error obeys, per row and exactly,

    l1[t] = l1[0] - count * (alpha[t]**2 - alpha[0]**2 - (mu[t] - mu[0])**2)

which ties the achievable error to the growth of the scale alone. The
second-order loop snapshots at the end of each iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .planes import (
    BitMask,
    SignPlane,
    as_mask,
    as_weight_matrix,
    masked_count,
    masked_row_mean,
    sign_plus,
)

__all__ = [
    "EPS",
    "FirstOrderQuant",
    "SecondOrderQuant",
    "ArbTrace",
    "binary_first_order",
    "binary_second_order",
    "residual",
    "refine_mu",
    "refine_alpha",
    "refine_alphas_second",
    "refine_sign_pair",
    "quant_error_l1",
    "arb_first_order",
    "arb_second_order",
]

# Guard added to least-squares denominators so empty or degenerate groups
# produce zero scales instead of dividing by zero.
EPS = 1e-12

# Sign combinations for the second-order plane pair, in canonical rank order.
# When a target is equidistant from two candidates with equal value, the
# later (higher-rank) combination wins, preferring +1 in the first plane.
_PAIR_B1 = np.array([-1, -1, 1, 1], dtype=np.int8)
_PAIR_B2 = np.array([-1, 1, -1, 1], dtype=np.int8)


@dataclass(frozen=True)
class FirstOrderQuant:
    """One sign plane with per-row scale and mean, valid on ``mask`` only."""

    alpha: np.ndarray
    mu: np.ndarray
    plane: SignPlane
    mask: BitMask

    def __post_init__(self):
        n, m = self.plane.rows, self.plane.cols
        if self.alpha.shape != (n,) or self.mu.shape != (n,):
            raise ValidationError("FirstOrderQuant: parameter shapes do not match plane")
        if (self.mask.rows, self.mask.cols) != (n, m):
            raise ValidationError("FirstOrderQuant: mask shape does not match plane")
        if not (np.isfinite(self.alpha).all() and np.isfinite(self.mu).all()):
            raise ValidationError("FirstOrderQuant: non-finite parameters")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.plane.rows, self.plane.cols)

    def reconstruct(self) -> np.ndarray:
        """Masked reconstruction; entries off the mask are 0."""
        rec = self.alpha[:, None] * self.plane.signs() + self.mu[:, None]
        return np.where(self.mask.bools(), rec, 0.0)


@dataclass(frozen=True)
class SecondOrderQuant:
    """Two sign planes with per-row scales and a combined per-row mean."""

    alpha1: np.ndarray
    alpha2: np.ndarray
    mu: np.ndarray
    plane1: SignPlane
    plane2: SignPlane
    mask: BitMask

    def __post_init__(self):
        n, m = self.plane1.rows, self.plane1.cols
        if (self.plane2.rows, self.plane2.cols) != (n, m):
            raise ValidationError("SecondOrderQuant: plane shapes differ")
        for arr in (self.alpha1, self.alpha2, self.mu):
            if arr.shape != (n,):
                raise ValidationError("SecondOrderQuant: parameter shapes do not match planes")
            if not np.isfinite(arr).all():
                raise ValidationError("SecondOrderQuant: non-finite parameters")
        if (self.mask.rows, self.mask.cols) != (n, m):
            raise ValidationError("SecondOrderQuant: mask shape does not match planes")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.plane1.rows, self.plane1.cols)

    def reconstruct(self) -> np.ndarray:
        rec = (
            self.alpha1[:, None] * self.plane1.signs()
            + self.alpha2[:, None] * self.plane2.signs()
            + self.mu[:, None]
        )
        return np.where(self.mask.bools(), rec, 0.0)


@dataclass(frozen=True)
class ArbTrace:
    """Per-iteration refinement snapshots; row 0 is the closed-form init.

    ``l1`` has shape (iterations + 1, n) and should be non-increasing down
    each column to within 1e-9 * (initial + 1); :meth:`assert_monotone`
    checks exactly that. ``alpha``/``mu``/``alpha2`` are present where the
    producing variant defines them.
    """

    l1: np.ndarray
    alpha: np.ndarray | None = None
    mu: np.ndarray | None = None
    alpha2: np.ndarray | None = None

    @property
    def iterations(self) -> int:
        return self.l1.shape[0] - 1

    def totals(self) -> np.ndarray:
        """Total error per recorded step, shape (iterations + 1,)."""
        return self.l1.sum(axis=1)

    def assert_monotone(self, tol: float = 1e-9) -> None:
        tot = self.totals()
        slack = tol * (tot[0] + 1.0)
        worst = float(np.diff(tot).max(initial=-np.inf))
        if worst > slack:
            raise ValidationError(f"trace error increased by {worst} (allowed {slack})")


def _binary_arrays(w: np.ndarray, mask: np.ndarray):
    """Closed-form init on dense arrays: masked mean, mean absolute deviation,
    sign plane (+1 canonically off the mask)."""
    mu = masked_row_mean(w, mask)
    alpha = masked_row_mean(np.abs(w - mu[:, None]), mask)
    signs = np.where(mask, sign_plus(w - mu[:, None]), np.int8(1))
    return alpha, mu, signs


def binary_first_order(w, mask) -> FirstOrderQuant:
    """Closed-form single-plane binarization of masked entries."""
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    alpha, mu, signs = _binary_arrays(w, mb)
    return FirstOrderQuant(
        alpha=alpha,
        mu=mu,
        plane=SignPlane.from_signs(signs),
        mask=BitMask.from_bools(mb),
    )


def binary_second_order(w, mask) -> SecondOrderQuant:
    """Closed-form two-plane binarization: first order, then first order on
    its residual; means are folded into one combined ``mu``."""
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    a1, mu1, s1 = _binary_arrays(w, mb)
    resid = np.where(mb, w - (a1[:, None] * s1 + mu1[:, None]), 0.0)
    a2, mu2, s2 = _binary_arrays(resid, mb)
    return SecondOrderQuant(
        alpha1=a1,
        alpha2=a2,
        mu=mu1 + mu2,
        plane1=SignPlane.from_signs(s1),
        plane2=SignPlane.from_signs(s2),
        mask=BitMask.from_bools(mb),
    )


def residual(w, quant) -> np.ndarray:
    """W minus the quant's reconstruction on its mask, 0 elsewhere."""
    w = as_weight_matrix(w)
    if w.shape != quant.shape:
        raise ValidationError(f"residual: weight shape {w.shape} != quant shape {quant.shape}")
    return np.where(quant.mask.bools(), w - quant.reconstruct(), 0.0)


def refine_mu(mu: np.ndarray, resid: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Shift the mean by the masked row mean of the residual.

    Given fixed scales and planes this lands on the exact least-squares mean,
    so the masked residual row mean vanishes immediately afterwards.
    """
    return mu + masked_row_mean(resid, mask)


def refine_alpha(signs: np.ndarray, w: np.ndarray, mask: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Least-squares scale for a fixed plane: sum of B*(W - mu) over the mask
    divided by the masked count (guarded by EPS)."""
    num = np.where(mask, signs * (w - mu[:, None]), 0.0).sum(axis=1)
    return num / (masked_count(mask) + EPS)


def refine_alphas_second(
    signs1: np.ndarray,
    signs2: np.ndarray,
    alpha2: np.ndarray,
    w: np.ndarray,
    mask: np.ndarray,
    mu: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Sequential least-squares scales for a fixed plane pair: fit the first
    scale against the second plane's current contribution, then refit the
    second against the updated first."""
    t = w - mu[:, None]
    den = masked_count(mask) + EPS
    a1 = np.where(mask, signs1 * (t - alpha2[:, None] * signs2), 0.0).sum(axis=1) / den
    a2 = np.where(mask, signs2 * (t - a1[:, None] * signs1), 0.0).sum(axis=1) / den
    return a1, a2


def refine_sign_pair(
    w: np.ndarray,
    mask: np.ndarray,
    mu: np.ndarray,
    alpha1: np.ndarray,
    alpha2: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-element best plane pair among the four sign combinations.

    Each masked entry picks the combination whose value ``b1*alpha1 +
    b2*alpha2`` is nearest to ``w - mu``. Distance ties go to the larger
    candidate value; exact value ties prefer +1 in the first plane. Entries
    off the mask get the canonical (+1, +1).
    """
    t = w - mu[:, None]
    best_k = np.zeros(t.shape, dtype=np.int8)
    best_v = (_PAIR_B1[0] * alpha1 + _PAIR_B2[0] * alpha2)[:, None]
    best_v = np.broadcast_to(best_v, t.shape).copy()
    best_d = np.abs(t - best_v)
    for k in range(1, 4):
        v = (_PAIR_B1[k] * alpha1 + _PAIR_B2[k] * alpha2)[:, None]
        d = np.abs(t - v)
        take = (d < best_d) | ((d == best_d) & (v >= best_v))
        best_k[take] = k
        np.copyto(best_v, np.broadcast_to(v, t.shape), where=take)
        np.copyto(best_d, d, where=take)
    b1 = np.where(mask, _PAIR_B1[best_k], np.int8(1))
    b2 = np.where(mask, _PAIR_B2[best_k], np.int8(1))
    return b1, b2


def quant_error_l1(w, quant) -> float:
    """Total squared reconstruction error over the quant's mask."""
    r = residual(w, quant)
    return float((r * r).sum())


def binary_error(w: np.ndarray, mask: np.ndarray, order: int = 1) -> float:
    """Closed-form init error without building quant objects.

    Cheap scorer for partition searches: the total masked squared error of
    :func:`binary_first_order` (or :func:`binary_second_order` for order 2).
    Uses sum((w-mu)^2) - cnt*alpha^2 per row, which the plane's least-squares
    scale makes exact, so no sign plane is materialized.
    """
    mf = mask.astype(np.float64)
    cnt = mf.sum(axis=1)
    live = np.maximum(cnt, 1.0)
    d = (w - ((w * mf).sum(axis=1) / live)[:, None]) * mf
    alpha = np.abs(d).sum(axis=1) / live
    err = float((d * d).sum() - (cnt * alpha * alpha).sum())
    if order == 2:
        r = (d - alpha[:, None] * np.where(d >= 0, 1.0, -1.0)) * mf
        d2 = (r - (r.sum(axis=1) / live)[:, None]) * mf
        a2 = np.abs(d2).sum(axis=1) / live
        err = float((d2 * d2).sum() - (cnt * a2 * a2).sum())
    return err


def _l1_rows(w, recon, mask) -> np.ndarray:
    r = np.where(mask, w - recon, 0.0)
    return (r * r).sum(axis=1)


def arb_first_order(w, mask, iterations: int, tol: float | None = None):
    """Iteratively refined single-plane binarization.

    Each iteration updates mean, scale, then plane, every step an exact
    conditional minimizer of the masked squared error. Returns the final
    quant and an :class:`ArbTrace` whose snapshots are taken after the scale
    update (see module docstring for the identity that holds there). With
    ``tol`` set, iteration stops early once the recorded total error improves
    by less than ``tol * (initial + 1)``.
    """
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    if iterations < 0:
        raise ValidationError("arb_first_order: iterations must be >= 0")
    alpha, mu, signs = _binary_arrays(w, mb)
    bf = signs.astype(np.float64)
    cnt = masked_count(mb)
    safe_cnt = np.maximum(cnt, 1.0)

    l1 = _l1_rows(w, alpha[:, None] * bf + mu[:, None], mb)
    alphas, mus, l1s = [alpha], [mu], [l1]

    for _ in range(iterations):
        resid = np.where(mb, w - (alpha[:, None] * bf + mu[:, None]), 0.0)
        mu = mu + resid.sum(axis=1) / safe_cnt
        alpha = np.where(mb, bf * (w - mu[:, None]), 0.0).sum(axis=1) / (cnt + EPS)
        l1 = _l1_rows(w, alpha[:, None] * bf + mu[:, None], mb)
        alphas.append(alpha)
        mus.append(mu)
        l1s.append(l1)
        signs = np.where(mb, sign_plus(w - mu[:, None]), np.int8(1))
        bf = signs.astype(np.float64)
        if tol is not None and len(l1s) >= 2:
            if l1s[-2].sum() - l1.sum() < tol * (l1s[0].sum() + 1.0):
                break

    quant = FirstOrderQuant(
        alpha=alpha,
        mu=mu,
        plane=SignPlane.from_signs(signs),
        mask=BitMask.from_bools(mb),
    )
    trace = ArbTrace(l1=np.array(l1s), alpha=np.array(alphas), mu=np.array(mus))
    return quant, trace


def arb_second_order(w, mask, iterations: int, tol: float | None = None):
    """Iteratively refined two-plane binarization.

    Each iteration updates the combined mean, both scales sequentially, then
    re-selects the plane pair element-wise; the trace snapshots at the end of
    the iteration, where every step has been an exact conditional minimizer.
    """
    w = as_weight_matrix(w)
    mb = as_mask(mask, w.shape)
    if iterations < 0:
        raise ValidationError("arb_second_order: iterations must be >= 0")
    a1, mu1, s1 = _binary_arrays(w, mb)
    resid = np.where(mb, w - (a1[:, None] * s1 + mu1[:, None]), 0.0)
    a2, mu2, s2 = _binary_arrays(resid, mb)
    mu = mu1 + mu2
    safe_cnt = np.maximum(masked_count(mb), 1.0)

    def recon():
        return a1[:, None] * s1 + a2[:, None] * s2 + mu[:, None]

    l1s = [_l1_rows(w, recon(), mb)]
    a1s, a2s, mus = [a1], [a2], [mu]

    for _ in range(iterations):
        r = np.where(mb, w - recon(), 0.0)
        mu = mu + r.sum(axis=1) / safe_cnt
        a1, a2 = refine_alphas_second(s1, s2, a2, w, mb, mu)
        s1, s2 = refine_sign_pair(w, mb, mu, a1, a2)
        l1s.append(_l1_rows(w, recon(), mb))
        a1s.append(a1)
        a2s.append(a2)
        mus.append(mu)
        if tol is not None and len(l1s) >= 2:
            if l1s[-2].sum() - l1s[-1].sum() < tol * (l1s[0].sum() + 1.0):
                break

    quant = SecondOrderQuant(
        alpha1=a1,
        alpha2=a2,
        mu=mu,
        plane1=SignPlane.from_signs(s1),
        plane2=SignPlane.from_signs(s2),
        mask=BitMask.from_bools(mb),
    )
    trace = ArbTrace(l1=np.array(l1s), alpha=np.array(a1s), mu=np.array(mus), alpha2=np.array(a2s))
    return quant, trace
