"""End-to-end layer quantization and the metrics it reports.

The constructive instances used for the exactness tests:

  arb / arb-x : W = a_i * B_ij + mu_i   (per-row scale and shift)
  arb-rc      : W = r_i * c_j * B_ij    (rank-1 magnitude, no shift)

Both are representable with zero error by the matching family, and every
column subset of them keeps the same structure, so partitioning cannot
break exactness.
"""

import numpy as np
import pytest

from arbq import (
    QuantConfig,
    QuantReport,
    ValidationError,
    quantize_layer,
    quantize_model,
    synth_calib_batches,
)
from arbq.pipeline import (
    REPORT_COLUMNS,
    column_deviation_profile,
    output_mse,
    report_row,
    residual_shift_profile,
    split_holdout,
)
from arbq.binarize import binary_first_order, refine_mu, residual
from arbq.calib import accumulate_second_moment, l2_error
from arbq.containers import encode_quant

from conftest import full_mask


def small_config(**overrides):
    """A config sized for tests: tiny calibration stream, two blocks."""
    base = dict(
        method="arb",
        iterations=15,
        block_k=16,
        salient_fractions=(0.125, 0.25),
        percentile_grid=(0.25, 0.5, 0.75),
        calib_batches=8,
        calib_rows=16,
        seed=0,
    )
    base.update(overrides)
    return QuantConfig(**base)


def gaussian_batches(gen, m, count=8, rows=16):
    return [gen.standard_normal((rows, m)) for _ in range(count)]


def exact_instance(gen, method, n=16, m=24):
    signs = np.where(gen.random((n, m)) < 0.5, -1.0, 1.0)
    if method == "arb-rc":
        r = np.exp(0.3 * gen.standard_normal(n))
        c = np.exp(0.3 * gen.standard_normal(m))
        return np.outer(r, c) * signs
    a = 0.5 + gen.random(n)
    mu = gen.standard_normal(n)
    return a[:, None] * signs + mu[:, None]


class TestExactInstances:
    @pytest.mark.parametrize("method", ["arb", "arb-x", "arb-rc"])
    def test_representable_layer_quantizes_to_zero(self, make_rng, method):
        gen = make_rng(7)
        w = exact_instance(gen, method)
        batches = gaussian_batches(gen, w.shape[1])
        config = small_config(method=method, iterations=40)
        layer, report = quantize_layer(w, batches, config)
        # float32 scale storage leaves ~1e-14 per entry, nothing more
        assert report.l1 <= 1e-8
        assert report.l2 <= 1e-6
        assert report.output_mse <= 1e-8
        assert np.abs(w - layer.reconstruct()).max() <= 1e-5

    def test_exact_instance_col_profile_correlation(self, make_rng):
        gen = make_rng(11)
        w = exact_instance(gen, "arb-rc")
        batches = gaussian_batches(gen, w.shape[1])
        layer, report = quantize_layer(w, batches, small_config(method="arb-rc"))
        assert report.col_dev_corr >= 0.99


class TestBaselineContract:
    def test_zero_iteration_arb_matches_baseline(self, make_rng):
        gen = make_rng(3)
        w = gen.standard_normal((24, 40))
        batches = gaussian_batches(gen, 40)
        arb0 = small_config(method="arb", iterations=0, cgb=False)
        base = small_config(method="baseline-t0", iterations=15, cgb=True)
        layer_a, rep_a = quantize_layer(w, batches, arb0)
        layer_b, rep_b = quantize_layer(w, batches, base)
        # baseline forces T=0 and undivided salient columns; only the
        # method label may differ
        assert np.array_equal(layer_a.reconstruct(), layer_b.reconstruct())
        assert np.array_equal(layer_a.maps.salient_cols, layer_b.maps.salient_cols)
        assert rep_a.l1 == rep_b.l1
        assert rep_a.l2 == rep_b.l2
        assert rep_a.output_mse == rep_b.output_mse
        assert rep_b.iterations == 0
        assert not rep_b.cgb

    def test_baseline_never_beats_refined(self, make_rng):
        for seed in range(5):
            gen = make_rng(seed)
            w = gen.standard_normal((32, 48)) * (1.0 + gen.random(48))
            batches = gaussian_batches(gen, 48)
            base = small_config(method="baseline-t0")
            refined = small_config(method="arb", iterations=15, cgb=False)
            _, rep_base = quantize_layer(w, batches, base)
            _, rep_arb = quantize_layer(w, batches, refined)
            assert rep_base.l1 >= rep_arb.l1 * (1.0 - 1e-9)


class TestMonotoneTraces:
    @pytest.mark.parametrize("method", ["arb", "arb-x", "arb-rc"])
    def test_final_trace_not_above_initial(self, make_rng, method):
        gen = make_rng(29)
        w = gen.standard_normal((24, 32)) * (1.0 + 2.0 * gen.random(32))
        batches = gaussian_batches(gen, 32)
        _, report = quantize_layer(w, batches, small_config(method=method))
        assert report.trace_final <= report.trace_initial * (1.0 + 1e-12) + 1e-12
        assert report.l1 >= 0.0
        assert report.l2 >= 0.0
        assert np.isfinite(report.output_mse)


class TestDeterminism:
    def test_identical_runs_byte_identical(self, make_rng):
        gen = make_rng(5)
        w = gen.standard_normal((16, 40))
        batches = gaussian_batches(gen, 40)
        config = small_config(method="arb-rc")
        layer1, rep1 = quantize_layer(w.copy(), [b.copy() for b in batches], config)
        layer2, rep2 = quantize_layer(w.copy(), [b.copy() for b in batches], config)
        assert encode_quant(layer1) == encode_quant(layer2)
        assert report_row(rep1) == report_row(rep2)

    def test_input_weights_not_mutated(self, make_rng):
        gen = make_rng(6)
        w = gen.standard_normal((12, 20))
        keep = w.copy()
        quantize_layer(w, gaussian_batches(gen, 20), small_config())
        assert np.array_equal(w, keep)

    def test_identical_layers_identical_artifacts(self, make_rng):
        gen = make_rng(8)
        w = gen.standard_normal((12, 24))
        shared = gaussian_batches(gen, 24)
        results = quantize_model(
            [("first", w), ("second", w.copy())],
            lambda name, m: shared,
            small_config(method="arb-rc"),
        )
        assert len(results) == 2
        blob1 = encode_quant(results[0][0])
        blob2 = encode_quant(results[1][0])
        assert blob1 == blob2

    def test_empty_model_is_empty(self):
        assert quantize_model([], lambda name, m: [], small_config()) == []


class TestHoldoutSplit:
    def test_every_fourth_batch_held_out(self):
        batches = [np.full((2, 3), float(i)) for i in range(8)]
        calib, hold = split_holdout(batches)
        assert [b[0, 0] for b in calib] == [0.0, 1.0, 2.0, 4.0, 5.0, 6.0]
        assert [b[0, 0] for b in hold] == [3.0, 7.0]

    def test_three_batches_last_held_out(self):
        batches = [np.full((2, 3), float(i)) for i in range(3)]
        calib, hold = split_holdout(batches)
        assert len(calib) == 2 and len(hold) == 1
        assert hold[0][0, 0] == 2.0

    def test_single_batch_split_by_rows(self):
        batch = np.arange(20.0).reshape(10, 2)
        calib, hold = split_holdout([batch])
        assert calib[0].shape == (8, 2)
        assert hold[0].shape == (2, 2)
        assert np.array_equal(np.vstack([calib[0], hold[0]]), batch)

    def test_tiny_single_batch(self):
        calib, hold = split_holdout([np.ones((2, 4))])
        assert calib[0].shape == (1, 4)
        assert hold[0].shape == (1, 4)

    def test_errors(self):
        with pytest.raises(ValidationError):
            split_holdout([])
        with pytest.raises(ValidationError):
            split_holdout([np.ones((1, 4))])


class TestSynthCalib:
    def test_keyed_by_seed_and_name(self):
        config = small_config(calib_batches=3, calib_rows=4)
        a = synth_calib_batches(6, config, name="layer.0")
        b = synth_calib_batches(6, config, name="layer.0")
        c = synth_calib_batches(6, config, name="layer.1")
        d = synth_calib_batches(6, small_config(calib_batches=3, calib_rows=4, seed=1), name="layer.0")
        assert len(a) == 3 and a[0].shape == (4, 6)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[0], c[0])
        assert not np.array_equal(a[0], d[0])

    def test_column_sigma_scales_profile(self):
        flat = small_config(calib_batches=16, calib_rows=64, calib_col_sigma=0.0)
        wide = small_config(calib_batches=16, calib_rows=64, calib_col_sigma=1.5)
        prof_flat = np.std(np.vstack(synth_calib_batches(8, flat)), axis=0)
        prof_wide = np.std(np.vstack(synth_calib_batches(8, wide)), axis=0)
        assert prof_flat.max() / prof_flat.min() < 1.3
        assert prof_wide.max() / prof_wide.min() > 2.0


class TestShiftProfile:
    def test_skewed_row_before_refinement(self):
        w = np.array([[0.0, 0.0, 0.0, 4.0]])
        quant = binary_first_order(w, full_mask(w.shape))
        shift = residual_shift_profile(w, quant.reconstruct())
        assert shift == pytest.approx([0.75])

    def test_mean_step_closes_the_gap(self):
        w = np.array([[0.0, 0.0, 0.0, 4.0]])
        mask = full_mask(w.shape)
        quant = binary_first_order(w, mask)
        mu = refine_mu(quant.mu, residual(w, quant), mask)
        recon = quant.alpha[:, None] * quant.plane.signs() + mu[:, None]
        assert residual_shift_profile(w, recon) == pytest.approx([0.0], abs=1e-10)

    def test_mean_step_random_rows(self, make_rng):
        gen = make_rng(17)
        w = gen.standard_normal((20, 30)) * 3.0
        mask = full_mask(w.shape)
        quant = binary_first_order(w, mask)
        mu = refine_mu(quant.mu, residual(w, quant), mask)
        recon = quant.alpha[:, None] * quant.plane.signs() + mu[:, None]
        np.testing.assert_allclose(
            residual_shift_profile(w, recon), np.zeros(20), atol=1e-10
        )

    def test_symmetric_rows_have_no_shift(self):
        w = np.array([[-2.0, -1.0, 1.0, 2.0], [-3.0, 3.0, -1.0, 1.0]])
        quant = binary_first_order(w, full_mask(w.shape))
        np.testing.assert_allclose(
            residual_shift_profile(w, quant.reconstruct()), [0.0, 0.0], atol=1e-12
        )


class TestColumnProfile:
    def test_identity_matrix(self):
        np.testing.assert_allclose(column_deviation_profile(np.eye(5)), np.full(5, 0.2))

    def test_scaling_one_column(self, make_rng):
        w = make_rng(2).standard_normal((10, 6))
        boosted = w.copy()
        boosted[:, 3] *= 10.0
        base = column_deviation_profile(w)
        prof = column_deviation_profile(boosted)
        assert prof[3] == pytest.approx(10.0 * base[3])
        np.testing.assert_allclose(np.delete(prof, 3), np.delete(base, 3))


class TestOutputMse:
    def test_exact_reconstruction_is_zero(self, make_rng):
        gen = make_rng(4)
        w = gen.standard_normal((6, 9))
        holdout = [gen.standard_normal((5, 9))]
        assert output_mse(w, w.copy(), holdout) == 0.0

    def test_matches_second_moment_error(self, make_rng):
        gen = make_rng(9)
        w = gen.standard_normal((6, 12))
        recon = w + 0.1 * gen.standard_normal((6, 12))
        batches = [gen.standard_normal((7, 12)) for _ in range(4)]
        stats = accumulate_second_moment(batches)
        direct = l2_error(w - recon, stats) / (stats.sample_count * w.shape[0])
        assert output_mse(w, recon, batches) == pytest.approx(direct, rel=1e-9)

    def test_doubling_residual_quadruples(self, make_rng):
        gen = make_rng(10)
        w = gen.standard_normal((5, 8))
        recon = w + gen.standard_normal((5, 8))
        far = w + 2.0 * (recon - w)
        holdout = [gen.standard_normal((6, 8))]
        assert output_mse(w, far, holdout) == pytest.approx(
            4.0 * output_mse(w, recon, holdout), rel=1e-12
        )

    def test_empty_holdout_rejected(self, make_rng):
        w = make_rng(1).standard_normal((3, 4))
        with pytest.raises(ValidationError):
            output_mse(w, np.zeros((3, 4)), [])


class TestReportSchema:
    def test_columns_are_frozen(self):
        assert REPORT_COLUMNS == (
            "name", "n", "m", "method", "order", "iterations", "block_k", "cgb",
            "compensated", "salient_fraction", "salient_count", "l1", "l2",
            "output_mse", "shift_pre", "shift_post", "col_dev_corr",
            "trace_initial", "trace_final", "plane_bits", "bitmap_bits",
            "scale_bits", "total_bytes", "avg_weight_bits",
        )
        assert "wall_time" not in REPORT_COLUMNS

    def test_row_formatting(self, make_rng):
        gen = make_rng(12)
        w = gen.standard_normal((8, 16))
        _, report = quantize_layer(w, gaussian_batches(gen, 16), small_config())
        row = report_row(report)
        assert len(row) == len(REPORT_COLUMNS)
        assert row[REPORT_COLUMNS.index("cgb")] in (0, 1)
        l1_cell = row[REPORT_COLUMNS.index("l1")]
        assert isinstance(l1_cell, str)
        assert float(l1_cell) == report.l1

    def test_wall_time_present_on_report(self, make_rng):
        gen = make_rng(13)
        w = gen.standard_normal((6, 8))
        _, report = quantize_layer(w, gaussian_batches(gen, 8), small_config())
        assert isinstance(report, QuantReport)
        assert report.wall_time >= 0.0


class TestConfigValidation:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"method": "ternary"},
            {"order": 3},
            {"iterations": -1},
            {"block_k": 0},
            {"salient_fractions": ()},
            {"salient_fractions": (1.5,)},
            {"percentile_grid": (0.0,)},
            {"damping_fraction": -0.1},
            {"scale_bytes": 3},
            {"calib_batches": 0},
            {"calib_col_sigma": -1.0},
        ],
    )
    def test_rejected(self, overrides):
        with pytest.raises(ValidationError):
            small_config(**overrides)

    def test_baseline_effective_settings(self):
        config = small_config(method="baseline-t0", iterations=15, cgb=True)
        assert config.effective_iterations == 0
        assert not config.effective_cgb
        assert config.family == "arb"
        assert "salient" in config.zone_names()

    def test_mismatched_calibration_width(self, make_rng):
        gen = make_rng(14)
        w = gen.standard_normal((6, 10))
        with pytest.raises(ValidationError):
            quantize_layer(w, gaussian_batches(gen, 11), small_config())
