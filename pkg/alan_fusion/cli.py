"""Command-line entry point: ``python -m alan_fusion <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import NoReturn, Sequence

import torch

from .ablation import run_ablation
from .config import (
    CONF_DATA,
    CONF_EVAL,
    RunConfig,
    degradation_spec,
    load_run_config,
    network_options,
    prior_checkpoint_paths,
    stage_config,
    write_provenance,
    write_run_config,
)
from .const import (
    ABLATE_MODES,
    CRITERIA,
    EXIT_OK,
    KIND_RECON,
    NETWORK_KINDS,
    PREPARE_KINDS,
    STAGES,
)
from .data_pipeline import (
    Image,
    load_grayscale,
    load_manifest,
    load_pairs,
    prepare_dataset,
    save_grayscale,
)
from .exceptions import AlanFusionError, DataError, MissingPrerequisiteError, UsageError
from .fusion_criteria import normalize_criterion
from .metrics import mos_aggregate, render_mos_table
from .networks import describe, forward_fuse, load_checkpoint, model_from_checkpoint
from .reports import (
    evaluate_model,
    merge_external_metrics,
    read_mos_csv,
    summary_path,
    write_plots,
    write_report_csv,
    write_summary_csv,
)
from .training import PRIOR_STAGES, freeze, required_priors, train_stage

_LOGGER = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _ArgumentParser(argparse.ArgumentParser):
    """Raises :class:`UsageError` instead of exiting on bad flags."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def _load_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(getattr(args, "config", None))


def _run_dir_artefacts(
    cfg: RunConfig, directory: Path, seed: int, argv: Sequence[str], started: float, **extra: object
) -> None:
    write_run_config(cfg, directory)
    write_provenance(directory, seed, argv, time.monotonic() - started, **extra)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_prepare_data(args: argparse.Namespace, argv: Sequence[str]) -> int:
    started = time.monotonic()
    cfg = _load_config(args)
    manifest = prepare_dataset(
        args.input, args.out, args.kind, args.seed, degradation_spec(cfg, args.seed)
    )
    _run_dir_artefacts(cfg, Path(args.out).parent, args.seed, argv, started, kind=args.kind)
    print(f"{args.out}: {len(manifest)} {manifest.pair_kind} records")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> int:
    started = time.monotonic()
    cfg = _load_config(args)
    stage_cfg = stage_config(
        cfg, args.stage, seed=args.seed, resume=args.resume, out_dir=args.out_dir
    )
    paths = dict(
        zip(PRIOR_STAGES[args.stage], prior_checkpoint_paths(cfg, args.stage, args.out_dir))
    )
    prior = []
    for needed in required_priors(args.stage, stage_cfg.options):
        path = paths[needed]
        if not path.is_file():
            raise MissingPrerequisiteError(
                f"stage {args.stage} requires the {needed} checkpoint {path}; "
                f"train --stage {needed} first"
            )
        prior.append(freeze(load_checkpoint(path)))
    _, log = train_stage(stage_cfg, prior)
    stage_dir = stage_cfg.stage_dir
    assert stage_dir is not None
    _run_dir_artefacts(
        cfg, stage_dir, stage_cfg.seed, argv, started, stage=args.stage, steps=len(log)
    )
    print(f"{log.checkpoint_path}: {args.stage} trained for {len(log)} steps")
    return EXIT_OK


def cmd_fuse(args: argparse.Namespace, argv: Sequence[str]) -> int:
    expected = None
    if args.criterion is not None:
        try:
            expected = normalize_criterion(args.criterion)
        except ValueError as err:
            raise UsageError(str(err)) from err
    ckpt = load_checkpoint(args.ckpt, expected_criterion=expected)
    if ckpt.kind == KIND_RECON:
        raise UsageError(f"{args.ckpt} holds a reconstruction network, not a fusion one")
    model = model_from_checkpoint(ckpt)
    src_a = load_grayscale(args.a)
    src_b = load_grayscale(args.b)
    fused, maps = forward_fuse(
        model, src_a.to_tensor(torch.float32), src_b.to_tensor(torch.float32)
    )
    save_grayscale(Image.from_tensor(fused), args.out)
    if args.dump_weights is not None:
        folder = Path(args.dump_weights)
        for index, weight_map in enumerate(maps.maps, 1):
            save_grayscale(Image.from_tensor(weight_map), folder / f"w{index}.png")
        _LOGGER.info("Wrote weight maps to %s", folder)
    print(f"{args.out}: fused {src_a.width}x{src_a.height} with criterion {ckpt.criterion}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    started = time.monotonic()
    cfg = _load_config(args)
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    manifest = load_manifest(args.manifest)
    pairs = load_pairs(manifest, cfg.section(CONF_DATA)["workers"])
    labels = [Path(record.path_a).stem for record in manifest.records]
    report, _ = evaluate_model(
        model,
        pairs,
        args.method or ckpt.criterion or ckpt.kind,
        args.dataset or Path(args.manifest).stem,
        labels,
        ssim_window=cfg.section(CONF_EVAL)["ssim_window"],
    )
    if args.external is not None:
        merge_external_metrics(report, args.external)
    out = Path(args.out)
    write_report_csv(report, out)
    write_summary_csv([report], summary_path(out))
    if args.plots is not None:
        write_plots([report], args.plots)
    _run_dir_artefacts(cfg, out.parent, ckpt.seed, argv, started, checkpoint=str(args.ckpt))
    print(f"{out}: {len(report)} pairs scored")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    started = time.monotonic()
    cfg = _load_config(args)
    result = run_ablation(cfg, args.mode, args.out)
    _run_dir_artefacts(cfg, Path(args.out), cfg.seed, argv, started, mode=args.mode)
    print(f"{result.comparison_path}: {len(result.reports)} {args.mode} variants compared")
    return EXIT_OK


def cmd_describe(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = _load_config(args)
    criterion = args.criterion or cfg.criterion
    print(describe(args.kind, criterion, network_options(cfg)), end="")
    return EXIT_OK


def cmd_mos(args: argparse.Namespace, argv: Sequence[str]) -> int:
    if args.scores is None:
        try:
            table = render_mos_table(args.methods)
        except KeyError as err:
            raise UsageError(str(err)) from err
        print(table, end="")
        return EXIT_OK
    for record in read_mos_csv(args.scores):
        try:
            value = mos_aggregate(record)
        except ValueError as err:
            raise DataError(f"{record.method}/{record.dataset}: {err}") from err
        print(f"{record.method},{record.dataset},{value!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="alan_fusion", description="Multi-task image fusion")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="root logger level",
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    prepare = commands.add_parser("prepare-data", help="generate a paired dataset and manifest")
    prepare.add_argument("--input", required=True, help="directory of base images")
    prepare.add_argument("--out", required=True, help="manifest file to write")
    prepare.add_argument("--kind", required=True, choices=tuple(PREPARE_KINDS))
    prepare.add_argument("--seed", type=int, default=0)
    prepare.add_argument("--config", help="run config (degradation ranges)")
    prepare.set_defaults(handler=cmd_prepare_data)

    train = commands.add_parser("train", help="train one stage")
    train.add_argument("--stage", required=True, choices=STAGES)
    train.add_argument("--config", help="run config file or preset name")
    train.add_argument("--resume", help="checkpoint to resume from")
    train.add_argument("--seed", type=int, help="override train.seed")
    train.add_argument("--out-dir", help="override train.out_dir")
    train.set_defaults(handler=cmd_train)

    fuse = commands.add_parser("fuse", help="fuse two images with a trained checkpoint")
    fuse.add_argument("--ckpt", required=True)
    fuse.add_argument("--a", required=True)
    fuse.add_argument("--b", required=True)
    fuse.add_argument("--out", required=True)
    fuse.add_argument(
        "--criterion",
        help="must match the checkpoint's criterion; it cannot be changed at fuse time",
    )
    fuse.add_argument("--dump-weights", help="directory for the W1/W2 weight-map images")
    fuse.set_defaults(handler=cmd_fuse)

    evaluate = commands.add_parser("evaluate", help="score a checkpoint on a manifest")
    evaluate.add_argument("--manifest", required=True)
    evaluate.add_argument("--ckpt", required=True)
    evaluate.add_argument("--out", required=True, help="report CSV")
    evaluate.add_argument("--plots", help="directory for per-metric bar charts")
    evaluate.add_argument("--config")
    evaluate.add_argument("--method", help="method label (default: the checkpoint criterion)")
    evaluate.add_argument("--dataset", help="dataset label (default: the manifest name)")
    evaluate.add_argument("--external", help="CSV with cpbd/jnb values keyed by pair")
    evaluate.set_defaults(handler=cmd_evaluate)

    ablate = commands.add_parser("ablate", help="compare fusion criteria or subtask assistance")
    ablate.add_argument("--mode", required=True, choices=ABLATE_MODES)
    ablate.add_argument("--config")
    ablate.add_argument("--out", required=True, help="output directory")
    ablate.set_defaults(handler=cmd_ablate)

    desc = commands.add_parser("describe", help="print the layer table of a network")
    desc.add_argument("--kind", required=True, choices=NETWORK_KINDS)
    desc.add_argument("--criterion", choices=CRITERIA)
    desc.add_argument("--config")
    desc.set_defaults(handler=cmd_describe)

    mos = commands.add_parser("mos", help="aggregate rater scores or print stored ones")
    mos.add_argument("--scores", help="CSV of method,dataset,score,...")
    mos.add_argument("--methods", nargs="*", help="restrict the stored table to these methods")
    mos.set_defaults(handler=cmd_mos)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args_list = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(args_list)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return err.exit_code
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, force=True)
    try:
        return int(args.handler(args, args_list))
    except AlanFusionError as err:
        _LOGGER.error("%s failed: %s", args.command, err)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
