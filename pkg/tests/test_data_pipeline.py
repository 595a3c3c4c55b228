"""Tests for image I/O, patching, augmentation and pair synthesis."""
from pathlib import Path
import sys
import tempfile
import unittest

import numpy as np
import torch
from PIL import Image as PILImage
from torch.utils.data import DataLoader

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from alan_fusion.const import (  # noqa: E402
    PAIR_KIND_CROSS_MODAL,
    PAIR_KIND_MULTI_FOCUS,
    PAIR_KIND_RECON,
)
from alan_fusion.data_pipeline import (  # noqa: E402
    AugmentOptions,
    DatasetManifest,
    DegradationSpec,
    Image,
    ImagePair,
    ManifestRecord,
    PatchDataset,
    augment,
    degrade,
    extract_patches,
    load_grayscale,
    load_manifest,
    load_pairs,
    patch_count,
    prepare_dataset,
    save_grayscale,
    synthesize_cross_modal_pair,
    synthesize_multifocus_pair,
    synthesize_recon_pair,
    write_manifest,
)
from alan_fusion.exceptions import (  # noqa: E402
    ImageLoadError,
    ManifestError,
    PatchSizeError,
    ShapeMismatchError,
)


def _ramp(height: int = 16, width: int = 20) -> Image:
    rows = np.linspace(0.0, 1.0, height)[:, None]
    cols = np.linspace(0.0, 1.0, width)[None, :]
    return Image((rows + cols) / 2.0)


def _write_bases(folder: Path, count: int, size: int = 24) -> None:
    rng = np.random.default_rng(7)
    folder.mkdir(parents=True, exist_ok=True)
    for index in range(count):
        pixels = (rng.random((size, size)) * 255).astype(np.uint8)
        PILImage.fromarray(pixels).save(folder / f"base{index:02d}.png")


class ImageLoadingTests(unittest.TestCase):
    """Verify grayscale loading of 8-bit, 16-bit and colour rasters."""

    def test_eight_bit_gray_maps_to_unit_range(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "g.png"
            PILImage.fromarray(np.array([[0, 255], [51, 102]], dtype=np.uint8)).save(path)
            image = load_grayscale(path)
        np.testing.assert_allclose(image.pixels, [[0.0, 1.0], [0.2, 0.4]])

    def test_sixteen_bit_gray_keeps_full_precision(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "g16.png"
            PILImage.fromarray(np.array([[0, 65535], [32768, 1]], dtype=np.uint16)).save(path)
            image = load_grayscale(path)
        self.assertAlmostEqual(image.pixels[0, 1], 1.0)
        self.assertAlmostEqual(image.pixels[1, 0], 32768 / 65535.0)
        self.assertAlmostEqual(image.pixels[1, 1], 1 / 65535.0)

    def test_colour_is_reduced_with_luma_weights(self) -> None:
        rgb = np.zeros((1, 3, 3), dtype=np.uint8)
        rgb[0, 0] = (255, 0, 0)
        rgb[0, 1] = (0, 255, 0)
        rgb[0, 2] = (0, 0, 255)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "c.png"
            PILImage.fromarray(rgb).save(path)
            image = load_grayscale(path)
        np.testing.assert_allclose(image.pixels[0], [0.299, 0.587, 0.114], atol=1e-12)

    def test_missing_and_undecodable_files_raise(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ImageLoadError):
                load_grayscale(Path(tmp) / "absent.png")
            junk = Path(tmp) / "junk.png"
            junk.write_bytes(b"not an image")
            with self.assertRaises(ImageLoadError):
                load_grayscale(junk)

    def test_save_then_load_quantises_to_eight_bits(self) -> None:
        image = _ramp()
        with tempfile.TemporaryDirectory() as tmp:
            loaded = load_grayscale(save_grayscale(image, Path(tmp) / "r.pgm"))
        self.assertLessEqual(float(np.abs(loaded.pixels - image.pixels).max()), 0.5 / 255 + 1e-12)

    def test_image_rejects_values_outside_unit_range(self) -> None:
        with self.assertRaises(ValueError):
            Image(np.array([[1.5]]))
        with self.assertRaises(ShapeMismatchError):
            Image(np.zeros(4))


class PatchTests(unittest.TestCase):
    """Verify aligned patch extraction."""

    def test_patch_count_matches_closed_form(self) -> None:
        pair = ImagePair(_ramp(16, 20), _ramp(16, 20), PAIR_KIND_CROSS_MODAL)
        patches = extract_patches(pair, 8, 4, stride=2)
        self.assertEqual(len(patches), patch_count(20, 16, 8, 4, 2))
        self.assertEqual(patches[0].a.pixels.shape, (4, 8))

    def test_default_stride_tiles_without_overlap(self) -> None:
        pair = ImagePair(_ramp(16, 20), _ramp(16, 20), PAIR_KIND_CROSS_MODAL)
        patches = extract_patches(pair, 10, 8)
        self.assertEqual(len(patches), 4)
        np.testing.assert_array_equal(patches[3].a.pixels, pair.a.pixels[8:16, 10:20])

    def test_patches_stay_aligned_across_members(self) -> None:
        a = _ramp()
        b = Image(1.0 - a.pixels)
        for patch in extract_patches(ImagePair(a, b, PAIR_KIND_CROSS_MODAL), 5, 5, stride=3):
            np.testing.assert_allclose(patch.a.pixels + patch.b.pixels, 1.0)

    def test_oversized_patch_raises(self) -> None:
        pair = ImagePair(_ramp(8, 8), _ramp(8, 8), PAIR_KIND_CROSS_MODAL)
        with self.assertRaises(PatchSizeError):
            extract_patches(pair, 9, 4)

    def test_stride_below_one_raises(self) -> None:
        pair = ImagePair(_ramp(8, 8), _ramp(8, 8), PAIR_KIND_CROSS_MODAL)
        with self.assertRaises(PatchSizeError):
            extract_patches(pair, 4, 4, stride=0)

    def test_pair_members_must_match(self) -> None:
        with self.assertRaises(ShapeMismatchError):
            ImagePair(_ramp(8, 8), _ramp(8, 9), PAIR_KIND_CROSS_MODAL)


class AugmentationTests(unittest.TestCase):
    """Verify that augmentation acts identically on every pair member."""

    def test_same_transform_applied_to_both_members(self) -> None:
        a = _ramp()
        b = Image(1.0 - a.pixels)
        gt = Image(a.pixels * 0.5)
        pair = ImagePair(a, b, PAIR_KIND_MULTI_FOCUS, gt)
        options = AugmentOptions(hflip=True, vflip=True, random_crop=True)
        for seed in range(10):
            out = augment(pair, options, seed)
            self.assertEqual(out.a.pixels.shape, a.pixels.shape)
            np.testing.assert_allclose(out.a.pixels + out.b.pixels, 1.0)
            assert out.ground_truth is not None
            np.testing.assert_allclose(out.ground_truth.pixels, out.a.pixels * 0.5)

    def test_augmentation_is_seeded(self) -> None:
        pair = ImagePair(_ramp(), _ramp(), PAIR_KIND_CROSS_MODAL)
        options = AugmentOptions(hflip=True, vflip=True, random_crop=True)
        first = augment(pair, options, 3)
        second = augment(pair, options, 3)
        np.testing.assert_array_equal(first.a.pixels, second.a.pixels)


class SynthesisTests(unittest.TestCase):
    """Verify degradation and synthetic pair generators."""

    def test_degradation_is_deterministic_per_seed(self) -> None:
        spec = DegradationSpec(seed=11)
        first = degrade(_ramp(), spec)
        second = degrade(_ramp(), spec)
        np.testing.assert_array_equal(first.pixels, second.pixels)
        self.assertFalse(np.array_equal(first.pixels, degrade(_ramp(), spec.with_seed(12)).pixels))

    def test_degradation_stays_in_range(self) -> None:
        out = degrade(Image(np.ones((12, 12))), DegradationSpec(brightness_range=(1.2, 1.2), seed=1))
        self.assertLessEqual(float(out.pixels.max()), 1.0)
        self.assertGreaterEqual(float(out.pixels.min()), 0.0)

    def test_identity_degradation_returns_the_input(self) -> None:
        spec = DegradationSpec((1.0, 1.0), (0.0, 0.0), (0.0, 0.0))
        np.testing.assert_allclose(degrade(_ramp(), spec).pixels, _ramp().pixels)

    def test_invalid_ranges_are_rejected(self) -> None:
        with self.assertRaises(ValueError):
            DegradationSpec(blur_sigma_range=(2.0, 1.0))
        with self.assertRaises(ValueError):
            DegradationSpec(brightness_range=(0.0, 1.0))

    def test_generated_pairs_have_expected_kinds(self) -> None:
        base = _ramp(24, 24)
        self.assertEqual(synthesize_cross_modal_pair(base, 0).pair_kind, PAIR_KIND_CROSS_MODAL)
        recon = synthesize_recon_pair(base, DegradationSpec(seed=2))
        self.assertEqual(recon.pair_kind, PAIR_KIND_RECON)
        np.testing.assert_array_equal(recon.b.pixels, base.pixels)
        focus = synthesize_multifocus_pair(base, 5)
        self.assertEqual(focus.pair_kind, PAIR_KIND_MULTI_FOCUS)
        assert focus.ground_truth is not None
        np.testing.assert_array_equal(focus.ground_truth.pixels, base.pixels)

    def test_multifocus_views_are_complementary(self) -> None:
        base = Image(np.random.default_rng(0).random((24, 24)))
        pair = synthesize_multifocus_pair(base, 9)
        sharp_a = np.isclose(pair.a.pixels, base.pixels)
        sharp_b = np.isclose(pair.b.pixels, base.pixels)
        self.assertTrue(np.all(sharp_a | sharp_b))
        self.assertTrue(sharp_a.any() and sharp_b.any())


class PatchDatasetTests(unittest.TestCase):
    """Verify the tensor view of training patches."""

    def _patches(self) -> list[ImagePair]:
        base = Image(np.random.default_rng(4).random((16, 20)))
        return extract_patches(synthesize_multifocus_pair(base, 2), 10, 8)

    def test_batches_have_a_channel_axis(self) -> None:
        loader = DataLoader(PatchDataset(self._patches(), with_ground_truth=True), batch_size=3)
        batches = list(loader)
        self.assertEqual(
            [tuple(batch["a"].shape) for batch in batches], [(3, 1, 8, 10), (1, 1, 8, 10)]
        )
        self.assertEqual(tuple(batches[0]["gt"].shape), (3, 1, 8, 10))
        self.assertNotIn("gt", PatchDataset(self._patches())[0])

    def test_augmentation_depends_on_seed_and_epoch_only(self) -> None:
        options = AugmentOptions(hflip=True, vflip=True)
        first = PatchDataset(self._patches(), options, seed=7)
        second = PatchDataset(self._patches(), options, seed=7)
        for index in range(len(first)):
            torch.testing.assert_close(first[index]["a"], second[index]["a"])
        changed = []
        for epoch in range(1, 6):
            second.set_epoch(epoch)
            changed.append(
                any(not torch.equal(first[i]["a"], second[i]["a"]) for i in range(len(first)))
            )
        self.assertTrue(any(changed))

    def test_missing_ground_truth_is_rejected(self) -> None:
        pair = ImagePair(_ramp(), _ramp(), PAIR_KIND_MULTI_FOCUS)
        with self.assertRaises(ManifestError):
            PatchDataset([pair], with_ground_truth=True)


class ManifestTests(unittest.TestCase):
    """Verify manifest files and dataset preparation."""

    def test_manifest_written_and_read_back(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            save_grayscale(_ramp(), root / "a.png")
            save_grayscale(_ramp(), root / "b.png")
            save_grayscale(_ramp(), root / "gt.png")
            manifest = DatasetManifest(
                root, PAIR_KIND_MULTI_FOCUS, (ManifestRecord("a.png", "b.png", "gt.png"),)
            )
            path = write_manifest(manifest, root / "m.tsv")
            loaded = load_manifest(path)
            self.assertEqual(loaded.pair_kind, PAIR_KIND_MULTI_FOCUS)
            self.assertEqual(loaded.records, manifest.records)
            pairs = load_pairs(loaded, workers=2)
        self.assertEqual(len(pairs), 1)
        self.assertIsNotNone(pairs[0].ground_truth)

    def test_missing_referenced_file_is_reported(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "m.tsv"
            path.write_text("#kind\tcross_modal\na.png\tb.png\n", encoding="utf-8")
            with self.assertRaises(ManifestError):
                load_manifest(path)

    def test_ground_truth_presence_must_match_kind(self) -> None:
        with self.assertRaises(ManifestError):
            DatasetManifest(Path("."), PAIR_KIND_CROSS_MODAL, (ManifestRecord("a", "b", "c"),))

    def test_prepare_dataset_writes_one_record_per_base(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            _write_bases(root / "bases", 10)
            manifest = prepare_dataset(root / "bases", root / "out" / "m.tsv", "cvs-synth", seed=3)
            self.assertEqual(len(manifest), 10)
            self.assertEqual(len(load_manifest(root / "out" / "m.tsv")), 10)

    def test_prepare_dataset_is_deterministic(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            _write_bases(root / "bases", 3)
            for run in ("one", "two"):
                prepare_dataset(root / "bases", root / run / "m.tsv", "recon", seed=5)
            self.assertEqual(
                (root / "one" / "m.tsv").read_bytes(), (root / "two" / "m.tsv").read_bytes()
            )
            for name in sorted(p.name for p in (root / "one" / "images").iterdir()):
                self.assertEqual(
                    (root / "one" / "images" / name).read_bytes(),
                    (root / "two" / "images" / name).read_bytes(),
                )

    def test_prepare_multifocus_records_ground_truth(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            _write_bases(root / "bases", 2)
            manifest = prepare_dataset(root / "bases", root / "mf" / "m.tsv", "multifocus")
        self.assertTrue(all(record.path_gt for record in manifest.records))

    def test_prepare_dataset_rejects_empty_input(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            (Path(tmp) / "empty").mkdir()
            with self.assertRaises(ManifestError):
                prepare_dataset(Path(tmp) / "empty", Path(tmp) / "m.tsv", "recon")


if __name__ == "__main__":
    unittest.main()
