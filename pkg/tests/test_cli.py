"""Tests for the command-line entry point, run in-process."""
from pathlib import Path
import contextlib
import io
import json
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from alan_fusion.cli import main  # noqa: E402
from alan_fusion.data_pipeline import (  # noqa: E402
    Image,
    load_grayscale,
    load_manifest,
    save_grayscale,
)
from alan_fusion.networks import instantiate, save_checkpoint  # noqa: E402


def _run(*argv: str) -> tuple[int, str]:
    out = io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(io.StringIO()):
        code = main(["--log-level", "ERROR", *argv])
    return code, out.getvalue()


def _bases(folder: Path, count: int = 2, size: int = 16) -> Path:
    rng = np.random.default_rng(0)
    for index in range(count):
        save_grayscale(Image(rng.random((size, size))), folder / f"scene{index}.png")
    return folder


class UsageTests(unittest.TestCase):
    """Verify exit codes for bad command lines."""

    def test_missing_command(self) -> None:
        self.assertEqual(_run()[0], 1)

    def test_unknown_option(self) -> None:
        self.assertEqual(_run("describe", "--kind", "fusion_main", "--colour")[0], 1)

    def test_missing_config_file(self) -> None:
        self.assertEqual(_run("describe", "--kind", "fusion_main", "--config", "nope.yaml")[0], 1)


class DescribeAndMosTests(unittest.TestCase):
    """Verify the commands that only print."""

    def test_describe(self) -> None:
        code, out = _run("describe", "--kind", "fusion_main", "--criterion", "sum")
        self.assertEqual(code, 0)
        self.assertTrue(out.startswith("fusion_main (sum)"))
        self.assertIn("parameters:", out)

    def test_stored_mos_table(self) -> None:
        code, out = _run("mos", "--methods", "ours", "ifcnn")
        self.assertEqual(code, 0)
        self.assertEqual(len(out.splitlines()), 3)
        self.assertEqual(_run("mos", "--methods", "median")[0], 1)

    def test_mos_from_scores(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "scores.csv"
            path.write_text("ours,CVS,1,2,3,4,10\nours,IR,5,5,5,5\n", encoding="utf-8")
            code, out = _run("mos", "--scores", str(path))
            self.assertEqual(code, 0)
            self.assertEqual(out.splitlines(), ["ours,CVS,3.0", "ours,IR,5.0"])
            path.write_text("ours,CVS,4,5\n", encoding="utf-8")
            self.assertEqual(_run("mos", "--scores", str(path))[0], 2)


class PipelineTests(unittest.TestCase):
    """Verify prepare-data, train, fuse and evaluate against temporary directories."""

    def test_prepare_data_writes_manifest_and_artefacts(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            bases = _bases(root / "bases")
            manifest = root / "data" / "manifest.tsv"
            code, out = _run(
                "prepare-data", "--input", str(bases), "--out", str(manifest), "--kind", "multifocus"
            )
            self.assertEqual(code, 0)
            self.assertIn("2 multi_focus records", out)
            loaded = load_manifest(manifest)
            self.assertEqual(len(loaded), 2)
            self.assertIsNotNone(loaded.records[0].path_gt)
            self.assertTrue((root / "data" / "run_config.yaml").is_file())
            provenance = json.loads((root / "data" / "provenance.json").read_text(encoding="utf-8"))
            self.assertEqual(provenance["kind"], "multifocus")

    def test_prepare_data_without_images(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            (Path(tmp) / "empty").mkdir()
            code, _ = _run(
                "prepare-data",
                "--input",
                str(Path(tmp) / "empty"),
                "--out",
                str(Path(tmp) / "m.tsv"),
                "--kind",
                "recon",
            )
            self.assertEqual(code, 2)

    def test_out_of_range_config_values_are_usage_errors(self) -> None:
        documents = {
            "dark.yaml": "data:\n  degradation:\n    brightness_range: [0.0, 1.0]\n",
            "silent.yaml": (
                "loss:\n  alpha_ssim: 0\n  alpha_psnr: 0\n  alpha_perceptual: 0\n  alpha_mse: 0\n"
            ),
        }
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            bases = _bases(root / "bases")
            for name, text in documents.items():
                (root / name).write_text(text, encoding="utf-8")
            code, _ = _run(
                "prepare-data",
                "--input",
                str(bases),
                "--out",
                str(root / "data" / "manifest.tsv"),
                "--kind",
                "recon",
                "--config",
                str(root / "dark.yaml"),
            )
            self.assertEqual(code, 1)
            self.assertFalse((root / "data" / "manifest.tsv").exists())
            code, _ = _run(
                "train",
                "--stage",
                "subtask1",
                "--config",
                str(root / "silent.yaml"),
                "--out-dir",
                str(root / "runs"),
            )
            self.assertEqual(code, 1)

    def test_main_stage_without_subtasks(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            code, _ = _run("train", "--stage", "main", "--out-dir", tmp)
            self.assertEqual(code, 2)

    def test_fuse_checks_the_criterion(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            _bases(root)
            _, ckpt = instantiate("fusion_main", "maximum", seed=1)
            ckpt_path = save_checkpoint(ckpt, root / "main.alan")
            args = [
                "fuse",
                "--ckpt",
                str(ckpt_path),
                "--a",
                str(root / "scene0.png"),
                "--b",
                str(root / "scene1.png"),
                "--out",
                str(root / "fused.png"),
            ]
            self.assertEqual(_run(*args, "--criterion", "sum")[0], 2)
            self.assertEqual(_run(*args, "--criterion", "bogus")[0], 1)
            code, _ = _run(*args, "--criterion", "max", "--dump-weights", str(root / "maps"))
            self.assertEqual(code, 0)
            self.assertTrue((root / "fused.png").is_file())
            self.assertTrue((root / "maps" / "w1.png").is_file())
            self.assertTrue((root / "maps" / "w2.png").is_file())

    def test_fusing_an_image_with_itself(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            _bases(root, count=1)
            _, ckpt = instantiate("fusion_main", "nonlinear", seed=3)
            ckpt_path = save_checkpoint(ckpt, root / "main.alan")
            source = str(root / "scene0.png")
            for name in ("first.png", "second.png"):
                code, _ = _run(
                    "fuse",
                    "--ckpt",
                    str(ckpt_path),
                    "--a",
                    source,
                    "--b",
                    source,
                    "--out",
                    str(root / name),
                )
                self.assertEqual(code, 0)
            original = load_grayscale(root / "scene0.png").pixels
            fused = load_grayscale(root / "first.png").pixels
            self.assertEqual(fused.shape, original.shape)
            self.assertLessEqual(float(np.abs(fused - original).max()), 1.0 / 255.0 + 1e-9)
            self.assertEqual(
                (root / "first.png").read_bytes(), (root / "second.png").read_bytes()
            )

    def test_fuse_refuses_a_reconstruction_checkpoint(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            _bases(root)
            _, ckpt = instantiate("recon_subtask1")
            ckpt_path = save_checkpoint(ckpt, root / "recon.alan")
            code, _ = _run(
                "fuse",
                "--ckpt",
                str(ckpt_path),
                "--a",
                str(root / "scene0.png"),
                "--b",
                str(root / "scene1.png"),
                "--out",
                str(root / "fused.png"),
            )
            self.assertEqual(code, 1)

    def test_corrupt_checkpoint(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            _bases(root)
            (root / "bad.alan").write_bytes(b"ALANCKPT\n{not json\n")
            code, _ = _run(
                "fuse",
                "--ckpt",
                str(root / "bad.alan"),
                "--a",
                str(root / "scene0.png"),
                "--b",
                str(root / "scene1.png"),
                "--out",
                str(root / "fused.png"),
            )
            self.assertEqual(code, 2)

    def test_evaluate_writes_report_summary_and_plots(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            bases = _bases(root / "bases", count=3)
            manifest = root / "cvs" / "manifest.tsv"
            self.assertEqual(
                _run(
                    "prepare-data",
                    "--input",
                    str(bases),
                    "--out",
                    str(manifest),
                    "--kind",
                    "cvs-synth",
                )[0],
                0,
            )
            _, ckpt = instantiate("fusion_main", "nonlinear", seed=2)
            ckpt_path = save_checkpoint(ckpt, root / "main.alan")
            report = root / "eval" / "report.csv"
            code, out = _run(
                "evaluate",
                "--manifest",
                str(manifest),
                "--ckpt",
                str(ckpt_path),
                "--out",
                str(report),
                "--plots",
                str(root / "eval" / "plots"),
                "--dataset",
                "CVS",
            )
            self.assertEqual(code, 0)
            self.assertIn("3 pairs scored", out)
            lines = report.read_text(encoding="utf-8").splitlines()
            self.assertEqual(len(lines), 4)
            self.assertTrue(lines[1].startswith("00000_scene0_a,nonlinear,CVS,"))
            self.assertTrue((root / "eval" / "report.summary.csv").is_file())
            self.assertTrue((root / "eval" / "plots" / "ag.png").is_file())
            self.assertFalse((root / "eval" / "plots" / "vif_a.png").exists())
            self.assertTrue((root / "eval" / "provenance.json").is_file())


if __name__ == "__main__":
    unittest.main()
