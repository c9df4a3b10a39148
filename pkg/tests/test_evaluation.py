import csv
import json
import math

import numpy as np
import pytest

from hdrfuse.evaluation import (
    PSNR_CAP_DB,
    REFERENCE_ABLATION_DELTAS,
    REFERENCE_FULL_SCALE,
    MetricsReport,
    ablation_suite,
    evaluate_dataset,
    psnr_linear,
    psnr_mu,
    ssim,
    translation_sweep,
)
from hdrfuse.network import init_params, tiny_config
from hdrfuse.training import TrainConfig, train_loop


class TestPsnr:
    def test_identical_hits_cap(self, rng):
        img = rng.uniform(0, 1, size=(8, 8, 3))
        assert psnr_linear(img, img) == PSNR_CAP_DB

    def test_exact_power_of_ten(self):
        a = np.zeros((10, 10, 3))
        b = np.full((10, 10, 3), 0.1)  # MSE = 0.01
        assert psnr_linear(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_high_precision_log_value(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.05)  # MSE = 0.0025
        assert psnr_linear(a, b) == pytest.approx(26.0206, abs=1e-3)

    def test_mu_domain_constant_pair(self):
        a = np.full((4, 4, 3), 0.01)
        b = np.zeros((4, 4, 3))
        assert psnr_mu(a, b, 5000.0) == pytest.approx(6.716, abs=0.02)

    def test_mu_monotone_in_error_scale(self, rng):
        gt = rng.uniform(0.2, 0.8, size=(8, 8, 3))
        noise = rng.normal(size=gt.shape) * 0.05
        values = [psnr_mu(np.clip(gt + s * noise, 0, 1), gt) for s in (1.0, 0.5, 0.25)]
        assert values[0] < values[1] < values[2]

    def test_identity_tone_map_hook_matches_linear(self, rng):
        a = rng.uniform(0, 1, size=(6, 6, 3))
        b = rng.uniform(0, 1, size=(6, 6, 3))
        assert psnr_mu(a, b, tone_map=lambda x: x) == psnr_linear(a, b)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            psnr_linear(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestSsim:
    def test_identical_images(self, rng):
        img = rng.uniform(0, 1, size=(16, 16, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_symmetry_exact(self, rng):
        a = rng.uniform(0, 1, size=(14, 14, 3))
        b = rng.uniform(0, 1, size=(14, 14, 3))
        assert ssim(a, b) == ssim(b, a)

    def test_constant_pair_closed_form(self):
        a = np.full((16, 16, 3), 0.5)
        b = np.full((16, 16, 3), 0.6)
        c1, c2 = 0.01**2, 0.03**2
        expected = ((2 * 0.5 * 0.6 + c1) * c2) / ((0.25 + 0.36 + c1) * c2)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-9)

    def test_range(self, rng):
        a = rng.uniform(0, 1, size=(16, 16, 3))
        b = 1.0 - a
        value = ssim(a, b)
        assert -1.0 <= value <= 1.0

    def test_mu_domain_differs_from_linear(self, rng):
        gt = rng.uniform(0, 0.3, size=(16, 16, 3))
        noisy = np.clip(gt + rng.normal(size=gt.shape) * 0.02, 0, 1)
        assert ssim(noisy, gt, "mu") != ssim(noisy, gt, "linear")

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class TestEvaluateDataset:
    def test_gt_as_prediction_is_perfect(self, tiny_dataset):
        model = init_params(tiny_config(), rng_seed=0)
        report = evaluate_dataset(model, tiny_dataset, predict_fn=lambda rec: rec.gt_hdr.pixels)
        for row in report.rows:
            assert row["psnr_l"] == PSNR_CAP_DB
            assert row["psnr_mu"] == PSNR_CAP_DB
            assert row["ssim_l"] == pytest.approx(1.0, abs=1e-9)
            assert row["ssim_mu"] == pytest.approx(1.0, abs=1e-9)

    def test_model_inference_produces_finite_metrics(self, tiny_dataset, tmp_path):
        model = init_params(tiny_config(), rng_seed=0)
        report = evaluate_dataset(model, tiny_dataset, out_dir=tmp_path)
        assert report.rows and all(math.isfinite(row["psnr_mu"]) for row in report.rows)
        assert (tmp_path / "metrics.csv").exists() and (tmp_path / "metrics.json").exists()

    def test_aggregate_equals_mean_of_csv_rows(self, tiny_dataset, tmp_path):
        model = init_params(tiny_config(), rng_seed=0)
        report = evaluate_dataset(model, tiny_dataset, out_dir=tmp_path)
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        for metric in MetricsReport.METRICS:
            recomputed = float(np.mean([float(r[metric]) for r in rows]))
            assert report.aggregate[metric] == pytest.approx(recomputed, abs=1e-6)

    def test_scene_without_gt_skipped(self, tiny_dataset):
        _, test_dirs = __import__("hdrfuse.dataset", fromlist=["read_manifest"]).read_manifest(tiny_dataset)
        (test_dirs[0] / "gt.hdr").unlink()
        model = init_params(tiny_config(), rng_seed=0)
        with pytest.warns(UserWarning, match="no ground truth"):
            report = evaluate_dataset(model, tiny_dataset)
        assert report.skipped == [test_dirs[0].name]

    def test_reference_values_recorded(self, tiny_dataset):
        model = init_params(tiny_config(), rng_seed=0)
        report = evaluate_dataset(model, tiny_dataset, predict_fn=lambda rec: rec.gt_hdr.pixels)
        assert report.references == REFERENCE_FULL_SCALE


class TestTranslationSweep:
    def test_zero_delta_matches_interior_evaluation(self, tiny_dataset):
        model = init_params(tiny_config(), rng_seed=0)
        deltas = [0, 4]
        rows = translation_sweep(model, tiny_dataset, deltas=deltas)
        report = evaluate_dataset(model, tiny_dataset, margin=max(deltas))
        assert rows[0]["delta"] == 0
        assert rows[0]["psnr_mu"] == report.aggregate["psnr_mu"]

    def test_one_row_per_delta_in_order(self, tiny_dataset, tmp_path):
        model = init_params(tiny_config(), rng_seed=0)
        rows = translation_sweep(model, tiny_dataset, deltas=[0, 2, 4], out_dir=tmp_path)
        assert [r["delta"] for r in rows] == [0, 2, 4]
        with open(tmp_path / "sweep_plot.csv") as fh:
            plot_rows = list(csv.DictReader(fh))
        assert [int(r["delta"]) for r in plot_rows] == [0, 2, 4]


class TestAblationSuite:
    def test_empty_variant_list(self, tiny_dataset, tmp_path):
        tc = TrainConfig(learning_rate=1e-3, crop=32, max_steps=1, seed=0, checkpoint_every=1)
        table = ablation_suite(tiny_config(), tiny_dataset, [], tc, tmp_path)
        assert table["variants"] == {} and "psnr_mu" in table["full"]

    def test_variant_deltas_and_references(self, tiny_dataset, tmp_path):
        tc = TrainConfig(learning_rate=1e-3, crop=32, max_steps=1, seed=0, checkpoint_every=1)
        table = ablation_suite(tiny_config(), tiny_dataset, ["no_nft"], tc, tmp_path)
        assert table["reference_deltas_db"] == {"no_nft": REFERENCE_ABLATION_DELTAS["no_nft"]}
        measured = table["variants"]["no_nft"]
        assert measured["delta_psnr_mu"] == pytest.approx(
            measured["psnr_mu"] - table["full"]["psnr_mu"], abs=1e-9
        )
        saved = json.loads((tmp_path / "ablation.json").read_text())
        assert saved["reference_deltas_db"]["no_nft"] == REFERENCE_ABLATION_DELTAS["no_nft"]

    def test_unknown_variant_rejected(self, tiny_dataset, tmp_path):
        tc = TrainConfig(learning_rate=1e-3, crop=32, max_steps=1, seed=0, checkpoint_every=1)
        with pytest.raises(ValueError, match="unknown ablation variants"):
            ablation_suite(tiny_config(), tiny_dataset, ["bogus"], tc, tmp_path)
