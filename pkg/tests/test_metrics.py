"""Tests for the image quality metrics and mean opinion scores."""
from pathlib import Path
import math
import sys
import unittest

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from alan_fusion.data_pipeline import Image  # noqa: E402
from alan_fusion.exceptions import ShapeMismatchError, TooSmallForMetricError  # noqa: E402
from alan_fusion.metrics import (  # noqa: E402
    MetricReport,
    MosRecord,
    average_gradient,
    entropy,
    evaluate_pair,
    mos_aggregate,
    psnr_db,
    published_mos,
    render_mos_table,
    spatial_frequency,
    ssim_index,
    standard_deviation,
    vif,
)


def _random(seed: int, size: int = 64) -> Image:
    return Image(np.random.default_rng(seed).random((size, size)))


class NoReferenceMetricTests(unittest.TestCase):
    """Verify AG, entropy, SF and SD on hand-checked images."""

    def test_average_gradient(self) -> None:
        self.assertEqual(average_gradient(Image(np.full((5, 5), 0.3))), 0.0)
        step = Image(np.array([[0.0, 1.0], [0.0, 1.0]]))
        self.assertAlmostEqual(average_gradient(step), math.sqrt(0.5), places=12)
        ramp = Image(np.tile(np.arange(6) * 0.1, (4, 1)))
        self.assertAlmostEqual(average_gradient(ramp), 0.1 / math.sqrt(2.0), places=12)
        with self.assertRaises(TooSmallForMetricError):
            average_gradient(Image(np.zeros((1, 4))))

    def test_entropy(self) -> None:
        self.assertEqual(entropy(Image(np.zeros((4, 4)))), 0.0)
        halves = np.zeros((4, 4))
        halves[:, 2:] = 1.0
        self.assertAlmostEqual(entropy(Image(halves)), 1.0, places=12)
        ramp = Image((np.arange(256, dtype=np.float64) / 255.0).reshape(16, 16))
        self.assertAlmostEqual(entropy(ramp), 8.0, places=12)

    def test_spatial_frequency_and_deviation(self) -> None:
        flat = Image(np.full((4, 4), 0.5))
        self.assertEqual(spatial_frequency(flat), 0.0)
        self.assertEqual(standard_deviation(flat), 0.0)
        stripes = Image(np.tile([0.0, 1.0], (4, 2)))
        self.assertAlmostEqual(spatial_frequency(stripes), 1.0, places=12)
        self.assertAlmostEqual(standard_deviation(stripes), 0.5, places=12)


class FullReferenceMetricTests(unittest.TestCase):
    """Verify VIF, SSIM and PSNR wrappers."""

    def test_vif_of_identical_images_is_one(self) -> None:
        img = _random(0)
        self.assertAlmostEqual(vif(img, img), 1.0, places=6)

    def test_vif_drops_for_a_noisy_copy(self) -> None:
        img = _random(1)
        noisy = Image(
            np.clip(img.pixels + np.random.default_rng(2).normal(0, 0.2, img.pixels.shape), 0, 1)
        )
        self.assertLess(vif(img, noisy), 1.0)

    def test_vif_against_a_constant_is_near_zero(self) -> None:
        self.assertLess(vif(_random(9), Image(np.full((64, 64), 0.5))), 1e-6)

    def test_vif_needs_enough_pixels(self) -> None:
        small = _random(3, 16)
        with self.assertRaises(TooSmallForMetricError):
            vif(small, small)
        with self.assertRaises(ShapeMismatchError):
            vif(_random(3), _random(4, 40))

    def test_ssim_and_psnr(self) -> None:
        img = _random(5, 16)
        self.assertAlmostEqual(ssim_index(img, img), 1.0, places=9)
        darker = Image(img.pixels * 0.5)
        self.assertLess(ssim_index(img, darker), 1.0)
        self.assertAlmostEqual(psnr_db(Image(np.zeros((4, 4))), Image(np.full((4, 4), 0.1))), 20.0)


class ReportTests(unittest.TestCase):
    """Verify per-pair rows and column means."""

    def test_evaluate_pair_fills_computed_columns(self) -> None:
        a, b = _random(6), _random(7)
        fused = Image((a.pixels + b.pixels) / 2.0)
        row = evaluate_pair(fused, a, b)
        self.assertIsNone(row["cpbd"])
        self.assertIsNone(row["jnb"])
        assert row["ssim_a"] is not None and row["ssim_b"] is not None
        self.assertAlmostEqual(row["ssim_mean"], (row["ssim_a"] + row["ssim_b"]) / 2.0)
        self.assertIsNotNone(row["vif_a"])

    def test_small_images_skip_vif(self) -> None:
        a = _random(8, 12)
        row = evaluate_pair(a, a, a, ssim_window=11)
        self.assertIsNone(row["vif_a"])
        self.assertAlmostEqual(row["ssim_a"], 1.0, places=9)

    def test_means_skip_missing_values(self) -> None:
        report = MetricReport("ours", "cvs")
        report.add({"ag": 1.0, "vif_a": None}, "p1")
        report.add({"ag": 3.0, "vif_a": 0.5})
        means = report.means()
        self.assertEqual(means["ag"], 2.0)
        self.assertEqual(means["vif_a"], 0.5)
        self.assertIsNone(means["cpbd"])
        self.assertEqual(report.labels, ["p1", "2"])


class MosTests(unittest.TestCase):
    """Verify trimmed-mean aggregation and the stored table."""

    def test_trimmed_mean(self) -> None:
        self.assertEqual(mos_aggregate(MosRecord((1, 2, 3, 4, 10))), 3.0)
        self.assertEqual(mos_aggregate(MosRecord((5, 5, 5, 5))), 5.0)
        self.assertEqual(mos_aggregate(MosRecord((4.0, 2.0, 3.0))), 3.0)

    def test_too_few_raters(self) -> None:
        with self.assertRaises(ValueError):
            mos_aggregate(MosRecord((4.0, 5.0)))

    def test_out_of_range_scores_are_logged(self) -> None:
        with self.assertLogs("alan_fusion.metrics", level="WARNING"):
            MosRecord((1, 2, 10), "ours", "cvs")
        with self.assertRaises(ValueError):
            MosRecord((1.0, float("nan"), 2.0))

    def test_published_scores(self) -> None:
        self.assertEqual(published_mos("ours", "cvs"), 4.76)
        self.assertEqual(published_mos("OURS", "IR"), 4.79)
        self.assertEqual(published_mos("ifcnn", "MF"), 4.70)
        with self.assertRaises(KeyError):
            published_mos("median", "CVS")

    def test_rendered_table(self) -> None:
        table = render_mos_table(["ours"])
        lines = table.splitlines()
        self.assertEqual(lines[0].split(), ["Method", "CVS", "IR", "MF"])
        self.assertEqual(lines[1].split(), ["OURS", "4.76", "4.79", "4.65"])
        self.assertEqual(len(render_mos_table().splitlines()), 12)


if __name__ == "__main__":
    unittest.main()
