"""Closed-form binarization, refinement steps, and the iteration drivers.

The skewed row [0, 0, 0, 4] is worked through by hand below: init lands at
mu=1, alpha=1.5 with squared error 3.0, and one refinement pass moves to
mu=1.75, alpha=1.875 with error 0.1875.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arbq import (
    ValidationError,
    arb_first_order,
    arb_second_order,
    binary_error,
    binary_first_order,
    binary_second_order,
)
from arbq.binarize import (
    quant_error_l1,
    refine_alpha,
    refine_alphas_second,
    refine_mu,
    refine_sign_pair,
    residual,
)

SKEWED = np.array([[0.0, 0.0, 0.0, 4.0]])
FULL = np.ones((1, 4), dtype=bool)


def random_instance(seed, n=6, m=17, p_mask=0.8):
    gen = np.random.default_rng(seed)
    w = gen.standard_normal((n, m))
    mask = gen.random((n, m)) < p_mask
    mask[:, 0] = True  # no fully empty rows
    return w, mask


class TestClosedFormInit:
    def test_symmetric_row_is_exact(self):
        q = binary_first_order(np.array([[1.0, -1.0, 1.0, -1.0]]), FULL)
        assert q.mu == pytest.approx([0.0])
        assert q.alpha == pytest.approx([1.0])
        assert quant_error_l1(np.array([[1.0, -1.0, 1.0, -1.0]]), q) == pytest.approx(0.0)

    def test_skewed_row_hand_values(self):
        q = binary_first_order(SKEWED, FULL)
        assert q.mu == pytest.approx([1.0])
        assert q.alpha == pytest.approx([1.5])
        assert np.array_equal(q.plane.signs(), [[-1, -1, -1, 1]])
        np.testing.assert_allclose(q.reconstruct(), [[-0.5, -0.5, -0.5, 2.5]])
        assert quant_error_l1(SKEWED, q) == pytest.approx(3.0)

    def test_residual_hand_values(self):
        q = binary_first_order(SKEWED, FULL)
        np.testing.assert_allclose(residual(SKEWED, q), [[0.5, 0.5, 0.5, 1.5]])

    def test_masked_entries_ignored(self):
        w = np.array([[0.0, 0.0, 0.0, 4.0, 1e6]])
        mask = np.array([[1, 1, 1, 1, 0]], dtype=bool)
        q = binary_first_order(w, mask)
        assert q.mu == pytest.approx([1.0])
        assert q.reconstruct()[0, 4] == 0.0

    def test_empty_row_inert(self):
        w = np.array([[3.0, -2.0]])
        q = binary_first_order(w, np.zeros((1, 2), dtype=bool))
        assert q.alpha == pytest.approx([0.0])
        assert q.mu == pytest.approx([0.0])
        assert quant_error_l1(w, q) == pytest.approx(0.0)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_binary_error_matches_quant_objects(self, seed):
        w, mask = random_instance(seed)
        q1 = binary_first_order(w, mask)
        assert binary_error(w, mask) == pytest.approx(quant_error_l1(w, q1), rel=1e-9, abs=1e-9)
        q2 = binary_second_order(w, mask)
        assert binary_error(w, mask, order=2) == pytest.approx(
            quant_error_l1(w, q2), rel=1e-9, abs=1e-9
        )


class TestSecondOrderInit:
    def test_skewed_row_hand_values(self):
        q = binary_second_order(SKEWED, FULL)
        assert q.alpha1 == pytest.approx([1.5])
        assert q.alpha2 == pytest.approx([0.375])
        # combined mean folds mu1=1 and the residual mean 0.75
        assert q.mu == pytest.approx([1.75])

    def test_zero_residual_reduces_to_first_order(self):
        w = np.array([[2.0, -1.0, 2.0, -1.0]])  # exactly alpha*B + mu
        q = binary_second_order(w, FULL)
        assert q.alpha2 == pytest.approx([0.0])
        np.testing.assert_allclose(q.reconstruct(), binary_first_order(w, FULL).reconstruct())

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_never_worse_than_first_order(self, seed):
        w, mask = random_instance(seed)
        e1 = quant_error_l1(w, binary_first_order(w, mask))
        e2 = quant_error_l1(w, binary_second_order(w, mask))
        assert e2 <= e1 + 1e-12


class TestRefineSteps:
    def test_mu_step_hand_value(self):
        q = binary_first_order(SKEWED, FULL)
        mu = refine_mu(q.mu, residual(SKEWED, q), FULL)
        assert mu == pytest.approx([1.75])

    def test_alpha_step_hand_value(self):
        signs = np.array([[-1, -1, -1, 1]], dtype=np.int8)
        alpha = refine_alpha(signs, SKEWED, FULL, np.array([1.75]))
        assert alpha == pytest.approx([1.875])

    def test_mu_step_zeroes_residual_mean(self, rng):
        w, mask = random_instance(11)
        q = binary_first_order(w, mask)
        mu = refine_mu(q.mu, residual(w, q), mask)
        rec = q.alpha[:, None] * q.plane.signs() + mu[:, None]
        shift = np.where(mask, w - rec, 0.0).sum(axis=1) / np.maximum(mask.sum(axis=1), 1)
        np.testing.assert_allclose(shift, 0.0, atol=1e-12)

    def test_sequential_alphas_are_least_squares(self):
        w, mask = random_instance(5)
        q = binary_second_order(w, mask)
        s1, s2 = q.plane1.signs(), q.plane2.signs()
        a1, a2 = refine_alphas_second(s1, s2, q.alpha2, w, mask, q.mu)
        # a2 is the exact LS fit of the residual left by the refreshed a1
        t = np.where(mask, w - q.mu[:, None] - a1[:, None] * s1, 0.0)
        ls = (t * s2).sum(axis=1) / np.maximum(mask.sum(axis=1), 1)
        np.testing.assert_allclose(a2, ls, atol=1e-9)


class TestRefineSignPair:
    def pair(self, target, alpha1=2.0, alpha2=0.5):
        w = np.array([[target]])
        mask = np.ones((1, 1), dtype=bool)
        b1, b2 = refine_sign_pair(w, mask, np.zeros(1), np.array([alpha1]), np.array([alpha2]))
        return int(b1[0, 0]), int(b2[0, 0])

    def test_interior_target(self):
        # candidates are -2.5, -1.5, 1.5, 2.5; target 1.2 is nearest 1.5
        assert self.pair(1.2) == (1, -1)

    def test_distance_tie_takes_larger_value(self):
        # target 0 sits exactly between -1.5 and 1.5
        assert self.pair(0.0) == (1, -1)

    def test_exterior_target(self):
        assert self.pair(-3.0) == (-1, -1)

    def test_value_tie_prefers_plus_first_plane(self):
        # alpha2 = 0 collapses the candidates pairwise
        assert self.pair(1.0, alpha1=1.0, alpha2=0.0) == (1, 1)

    def test_off_mask_is_canonical_plus(self):
        w = np.array([[-9.0, -9.0]])
        mask = np.array([[0, 1]], dtype=bool)
        b1, b2 = refine_sign_pair(w, mask, np.zeros(1), np.ones(1), np.ones(1))
        assert (b1[0, 0], b2[0, 0]) == (1, 1)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_matches_exhaustive_enumeration(self, seed):
        gen = np.random.default_rng(seed)
        n, m = 3, 8
        w = gen.standard_normal((n, m))
        mask = np.ones((n, m), dtype=bool)
        mu = gen.standard_normal(n)
        a1 = np.abs(gen.standard_normal(n))
        a2 = np.abs(gen.standard_normal(n))
        b1, b2 = refine_sign_pair(w, mask, mu, a1, a2)
        combos = [(-1, -1), (-1, 1), (1, -1), (1, 1)]
        for i in range(n):
            for j in range(m):
                t = w[i, j] - mu[i]
                ranked = [
                    (-abs(t - (c1 * a1[i] + c2 * a2[i])), c1 * a1[i] + c2 * a2[i], k)
                    for k, (c1, c2) in enumerate(combos)
                ]
                k_best = max(ranked)[2]
                assert (b1[i, j], b2[i, j]) == combos[k_best]


class TestArbFirstOrder:
    def test_zero_iterations_returns_init(self):
        q0 = binary_first_order(SKEWED, FULL)
        q, trace = arb_first_order(SKEWED, FULL, iterations=0)
        np.testing.assert_allclose(q.reconstruct(), q0.reconstruct())
        assert trace.iterations == 0
        assert trace.totals() == pytest.approx([3.0])

    def test_one_iteration_hand_values(self):
        q, trace = arb_first_order(SKEWED, FULL, iterations=1)
        assert trace.alpha[1] == pytest.approx([1.875])
        assert trace.mu[1] == pytest.approx([1.75])
        assert trace.totals() == pytest.approx([3.0, 0.1875])

    def test_one_iteration_identity_hand_check(self):
        # 3.0 - 4 * (1.875^2 - 1.5^2 - 0.75^2) = 0.1875
        _, trace = arb_first_order(SKEWED, FULL, iterations=1)
        a0, a1 = trace.alpha[0, 0], trace.alpha[1, 0]
        m0, m1 = trace.mu[0, 0], trace.mu[1, 0]
        predicted = trace.l1[0, 0] - 4.0 * (a1**2 - a0**2 - (m1 - m0) ** 2)
        assert predicted == pytest.approx(0.1875)
        assert trace.l1[1, 0] == pytest.approx(predicted)

    @given(seed=st.integers(0, 2**32 - 1), iters=st.integers(1, 12))
    @settings(max_examples=40, deadline=None)
    def test_snapshot_identity_random(self, seed, iters):
        w, mask = random_instance(seed)
        _, trace = arb_first_order(w, mask, iterations=iters)
        cnt = mask.sum(axis=1)
        for t in range(1, trace.iterations + 1):
            predicted = trace.l1[0] - cnt * (
                trace.alpha[t] ** 2 - trace.alpha[0] ** 2 - (trace.mu[t] - trace.mu[0]) ** 2
            )
            np.testing.assert_allclose(trace.l1[t], predicted, rtol=1e-9, atol=1e-9)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_monotone_trace(self, seed):
        w, mask = random_instance(seed, n=8, m=24)
        _, trace = arb_first_order(w, mask, iterations=15)
        trace.assert_monotone()

    def test_tol_stops_early(self):
        w, mask = random_instance(3)
        _, full_trace = arb_first_order(w, mask, iterations=50)
        _, tol_trace = arb_first_order(w, mask, iterations=50, tol=1e-6)
        assert tol_trace.iterations < full_trace.iterations

    def test_homogeneity(self):
        w, mask = random_instance(9)
        q, _ = arb_first_order(w, mask, iterations=7)
        qs, _ = arb_first_order(2.5 * w, mask, iterations=7)
        assert np.array_equal(q.plane.signs(), qs.plane.signs())
        np.testing.assert_allclose(qs.reconstruct(), 2.5 * q.reconstruct(), rtol=1e-10)

    def test_negative_iterations_rejected(self):
        with pytest.raises(ValidationError):
            arb_first_order(SKEWED, FULL, iterations=-1)


class TestArbSecondOrder:
    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_monotone_trace(self, seed):
        w, mask = random_instance(seed, n=8, m=24)
        _, trace = arb_second_order(w, mask, iterations=15)
        trace.assert_monotone()

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_beats_first_order(self, seed):
        w, mask = random_instance(seed)
        _, t1 = arb_first_order(w, mask, iterations=10)
        _, t2 = arb_second_order(w, mask, iterations=10)
        assert t2.totals()[-1] <= t1.totals()[-1] + 1e-9

    def test_two_plane_representable_is_exact(self):
        gen = np.random.default_rng(4)
        n, m = 5, 16
        s1 = np.where(gen.random((n, m)) > 0.5, 1.0, -1.0)
        s2 = np.where(gen.random((n, m)) > 0.5, 1.0, -1.0)
        w = 1.25 * s1 + 0.5 * s2 + 0.3
        _, trace = arb_second_order(w, np.ones((n, m), dtype=bool), iterations=30)
        assert trace.totals()[-1] == pytest.approx(0.0, abs=1e-18)

    def test_final_quant_matches_trace_tail(self):
        w, mask = random_instance(7)
        q, trace = arb_second_order(w, mask, iterations=6)
        assert quant_error_l1(w, q) == pytest.approx(trace.totals()[-1], rel=1e-12, abs=1e-12)
