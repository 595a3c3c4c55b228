"""Tests for the fusion criteria and weight-map helpers."""
from pathlib import Path
import sys
import unittest

import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from alan_fusion.const import CRITERIA  # noqa: E402
from alan_fusion.exceptions import ShapeMismatchError  # noqa: E402
from alan_fusion.fusion_criteria import (  # noqa: E402
    FusionCriterion,
    FusionWeightMaps,
    constant_maps,
    export_clip,
    fill_degenerate_pixels,
    maximum_selection_maps,
    merge_features,
    merged_channels,
    nonlinear_fuse,
    normalize_criterion,
    normalize_weight_maps,
)

_PAIRS = 100


def _random_pairs(seed: int = 0) -> list[tuple[torch.Tensor, torch.Tensor]]:
    gen = torch.Generator().manual_seed(seed)
    return [
        (
            torch.rand(1, 1, 9, 7, generator=gen, dtype=torch.float64),
            torch.rand(1, 1, 9, 7, generator=gen, dtype=torch.float64),
        )
        for _ in range(_PAIRS)
    ]


class CriterionNameTests(unittest.TestCase):
    """Verify canonical names and accepted aliases."""

    def test_canonical_names_are_unchanged(self) -> None:
        for name in CRITERIA:
            self.assertEqual(normalize_criterion(name), name)

    def test_aliases_resolve(self) -> None:
        self.assertEqual(normalize_criterion("Max"), "maximum")
        self.assertEqual(normalize_criterion("add"), "sum")
        self.assertEqual(normalize_criterion("weighted-average"), "weighted_average")
        self.assertEqual(normalize_criterion(" avg "), "weighted_average")
        self.assertEqual(normalize_criterion("learned"), "nonlinear")

    def test_unknown_name_raises(self) -> None:
        with self.assertRaises(ValueError):
            normalize_criterion("median")

    def test_fixed_weight_range(self) -> None:
        with self.assertRaises(ValueError):
            FusionCriterion("weighted_average", fixed_weight=1.5)
        self.assertEqual(FusionCriterion("avg").kind, "weighted_average")

    def test_merge_widths(self) -> None:
        self.assertEqual(FusionCriterion("nonlinear").merge_width, 256)
        self.assertEqual(FusionCriterion("hybrid").merge_width, 128)
        self.assertEqual(FusionCriterion("maximum").merge_width, 64)


class WeightMapEquivalenceTests(unittest.TestCase):
    """Verify the fixed rules are special cases of per-pixel weighting."""

    def test_maximum_selection(self) -> None:
        for a, b in _random_pairs(1):
            fused = nonlinear_fuse((a, b), maximum_selection_maps(a, b))
            self.assertLess(float((fused - torch.maximum(a, b)).abs().max()), 1e-6)

    def test_sum(self) -> None:
        for a, b in _random_pairs(2):
            fused = nonlinear_fuse((a, b), constant_maps(a, 1.0, 1.0))
            self.assertLess(float((fused - (a + b)).abs().max()), 1e-6)

    def test_weighted_average(self) -> None:
        for lam in (0.0, 0.3, 0.5, 1.0):
            for a, b in _random_pairs(3):
                fused = nonlinear_fuse((a, b), constant_maps(a, lam, 1.0 - lam))
                expected = lam * a + (1.0 - lam) * b
                self.assertLess(float((fused - expected).abs().max()), 1e-6)

    def test_ties_go_to_the_first_source(self) -> None:
        a = torch.full((1, 1, 2, 2), 0.5)
        maps = maximum_selection_maps(a, a.clone())
        torch.testing.assert_close(maps.maps[0], torch.ones_like(a))
        torch.testing.assert_close(maps.maps[1], torch.zeros_like(a))

    def test_fuse_requires_two_matching_maps(self) -> None:
        a = torch.rand(1, 1, 4, 4)
        with self.assertRaises(ShapeMismatchError):
            nonlinear_fuse((a,), constant_maps(a, 0.5, 0.5))
        with self.assertRaises(ShapeMismatchError):
            nonlinear_fuse((a, a), constant_maps(torch.rand(1, 1, 3, 3), 0.5, 0.5))

    def test_maps_must_share_a_shape(self) -> None:
        with self.assertRaises(ShapeMismatchError):
            FusionWeightMaps((torch.ones(1, 1, 2, 2), torch.ones(1, 1, 3, 3)))
        with self.assertRaises(ValueError):
            FusionWeightMaps(())


class NormalizationTests(unittest.TestCase):
    """Verify weight-map normalisation and the degenerate-pixel fallback."""

    def test_normalized_maps_sum_to_one(self) -> None:
        gen = torch.Generator().manual_seed(4)
        raw = FusionWeightMaps(
            (
                torch.rand(1, 1, 6, 6, generator=gen, dtype=torch.float64) + 0.1,
                torch.rand(1, 1, 6, 6, generator=gen, dtype=torch.float64) + 0.1,
            )
        )
        total = normalize_weight_maps(raw).total()
        self.assertLess(float((total - 1.0).abs().max()), 1e-6)

    def test_degenerate_pixels_get_equal_weights(self) -> None:
        w1 = torch.tensor([[[[0.0, 0.6]]]], dtype=torch.float64)
        w2 = torch.tensor([[[[0.0, 0.2]]]], dtype=torch.float64)
        raw = FusionWeightMaps((w1, w2))
        filled = fill_degenerate_pixels(normalize_weight_maps(raw), raw.total(), 1e-2)
        self.assertAlmostEqual(float(filled.maps[0][0, 0, 0, 0]), 0.5)
        self.assertAlmostEqual(float(filled.maps[1][0, 0, 0, 0]), 0.5)
        self.assertAlmostEqual(float(filled.maps[0][0, 0, 0, 1]), 0.75, places=6)

    def test_fused_value_lies_between_sources(self) -> None:
        for a, b in _random_pairs(5)[:10]:
            gen = torch.Generator().manual_seed(6)
            raw = FusionWeightMaps(
                (
                    torch.rand(a.shape, generator=gen, dtype=torch.float64),
                    torch.rand(a.shape, generator=gen, dtype=torch.float64),
                )
            )
            maps = fill_degenerate_pixels(normalize_weight_maps(raw), raw.total(), 1e-2)
            fused = nonlinear_fuse((a, b), maps)
            self.assertTrue(bool((fused <= torch.maximum(a, b) + 1e-6).all()))
            self.assertTrue(bool((fused >= torch.minimum(a, b) - 1e-6).all()))

    def test_export_clip(self) -> None:
        clipped = export_clip(torch.tensor([-0.5, 0.5, 1.5]))
        torch.testing.assert_close(clipped, torch.tensor([0.0, 0.5, 1.0]))


class FeatureMergeTests(unittest.TestCase):
    """Verify feature-level merging and the resulting widths."""

    def test_each_criterion(self) -> None:
        fa = torch.rand(2, 64, 4, 4)
        fb = torch.rand(2, 64, 4, 4)
        torch.testing.assert_close(
            merge_features(fa, fb, FusionCriterion("maximum")), torch.maximum(fa, fb)
        )
        torch.testing.assert_close(merge_features(fa, fb, FusionCriterion("sum")), fa + fb)
        torch.testing.assert_close(
            merge_features(fa, fb, FusionCriterion("weighted_average", 0.25)),
            0.25 * fa + 0.75 * fb,
        )
        self.assertEqual(merge_features(fa, fb, FusionCriterion("concat")).shape[1], 128)

    def test_merged_channels_match_merge_output(self) -> None:
        fa = torch.rand(1, 64, 3, 3)
        for name in CRITERIA:
            criterion = FusionCriterion(name)
            self.assertEqual(
                merge_features(fa, fa, criterion).shape[1], merged_channels(64, criterion)
            )

    def test_shape_mismatch_raises(self) -> None:
        with self.assertRaises(ShapeMismatchError):
            merge_features(torch.rand(1, 64, 3, 3), torch.rand(1, 32, 3, 3), FusionCriterion())


if __name__ == "__main__":
    unittest.main()
