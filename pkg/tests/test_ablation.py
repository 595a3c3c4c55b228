"""Tests for the criterion and subtask-assistance comparisons."""
from pathlib import Path
import csv
import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from alan_fusion.ablation import ablation_variants, run_ablation  # noqa: E402
from alan_fusion.config import validate_run_config  # noqa: E402
from alan_fusion.const import ENV_SLOW_TESTS  # noqa: E402
from alan_fusion.data_pipeline import Image, prepare_dataset, save_grayscale  # noqa: E402
from alan_fusion.exceptions import ConfigError, ManifestError  # noqa: E402


class VariantTests(unittest.TestCase):
    """Verify the variants each comparison trains."""

    def test_criteria_variants(self) -> None:
        variants = ablation_variants(validate_run_config({}), "criteria")
        self.assertEqual(
            [v.criterion for v in variants], ["nonlinear", "maximum", "sum", "weighted_average"]
        )
        self.assertTrue(all(v.options.lateral_recon for v in variants))

    def test_task_variants_toggle_laterals(self) -> None:
        cfg = validate_run_config({"model": {"criterion": "sum"}})
        variants = {v.name: v for v in ablation_variants(cfg, "tasks")}
        self.assertEqual(
            list(variants),
            ["main_only", "main_subtask1", "multifocus_only", "main_subtask2", "full"],
        )
        self.assertTrue(all(v.criterion == "sum" for v in variants.values()))
        only = variants["main_only"].options
        self.assertFalse(only.lateral_recon or only.lateral_multifocus)
        self.assertTrue(variants["main_subtask1"].options.lateral_recon)
        self.assertFalse(variants["main_subtask1"].options.lateral_multifocus)

    def test_task_variants_read_only_the_subtasks_they_use(self) -> None:
        variants = {v.name: v for v in ablation_variants(validate_run_config({}), "tasks")}
        self.assertEqual(variants["main_only"].priors, ())
        self.assertEqual(variants["main_subtask1"].priors, ("subtask1",))
        self.assertEqual(variants["main_subtask2"].priors, ("subtask2",))
        self.assertEqual(variants["full"].priors, ("subtask1", "subtask2"))
        self.assertEqual(variants["multifocus_only"].standalone, "subtask2")
        self.assertEqual(variants["multifocus_only"].priors, ("subtask2",))
        criteria = ablation_variants(validate_run_config({}), "criteria")
        self.assertTrue(all(v.standalone is None for v in criteria))

    def test_unknown_mode(self) -> None:
        with self.assertRaises(ConfigError):
            ablation_variants(validate_run_config({}), "losses")

    def test_evaluation_manifest_is_required(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ManifestError):
                run_ablation(validate_run_config({}), "criteria", tmp)


@unittest.skipUnless(os.environ.get(ENV_SLOW_TESTS), f"set {ENV_SLOW_TESTS}=1 to run")
class EndToEndAblationTests(unittest.TestCase):
    """Verify a tiny criteria comparison from base images to comparison CSV."""

    def test_criteria_comparison(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            rng = np.random.default_rng(0)
            for index in range(2):
                save_grayscale(Image(rng.random((16, 16))), root / "bases" / f"s{index}.png")
            manifests = {}
            for kind, name in (("recon", "recon"), ("multifocus", "mf"), ("cvs-synth", "cvs")):
                path = root / name / "manifest.tsv"
                prepare_dataset(root / "bases", path, kind, seed=1)
                manifests[name] = str(path)
            cfg = validate_run_config(
                {
                    "data": {
                        "patch_width": 16,
                        "patch_height": 16,
                        "manifests": {
                            "subtask1": manifests["recon"],
                            "subtask2": manifests["mf"],
                            "main": [manifests["cvs"]],
                        },
                    },
                    "loss": {"ssim_window": 7},
                    "train": {
                        "out_dir": str(root / "runs"),
                        "subtask1": {"patch_width": 16, "patch_height": 16, "max_steps": 1},
                        "subtask2": {"max_steps": 1},
                        "main": {"max_steps": 1, "batch_size": 2},
                    },
                    "eval": {"ssim_window": 7},
                }
            )
            result = run_ablation(cfg, "criteria", root / "ablation")
            self.assertEqual(len(result.reports), 4)
            self.assertTrue((root / "ablation" / "subtask1" / "subtask1.alan").is_file())
            with result.comparison_path.open(newline="", encoding="utf-8") as handle:
                rows = list(csv.DictReader(handle))
            self.assertEqual(
                [row["method"] for row in rows], ["nonlinear", "maximum", "sum", "weighted_average"]
            )
            self.assertTrue(all(row["pairs"] == "2" for row in rows))
            self.assertTrue((root / "ablation" / "plots" / "ag.png").is_file())


if __name__ == "__main__":
    unittest.main()
