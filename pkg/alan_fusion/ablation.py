"""Comparisons of fusion criteria and of subtask assistance on the main task."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .checkpoint import Checkpoint
from .config import (
    CONF_DATA,
    CONF_EVAL,
    RunConfig,
    eval_manifest,
    network_options,
    prior_checkpoint_paths,
    stage_config,
)
from .const import (
    ABLATE_CRITERIA,
    ABLATE_MODES,
    ABLATE_TASKS,
    ABLATION_CRITERIA,
    ABLATION_FILE,
    KIND_MULTIFOCUS,
    KIND_RECON,
    STAGE_MAIN,
    STAGE_SUBTASK1,
    STAGE_SUBTASK2,
    TASK_MULTIFOCUS_ONLY,
    TASK_VARIANT_ORDER,
    TASK_VARIANTS,
)
from .data_pipeline import load_manifest, load_pairs
from .exceptions import ConfigError, ManifestError
from .metrics import MetricReport
from .networks import NetworkOptions, load_checkpoint, model_from_checkpoint
from .reports import evaluate_model, write_plots, write_report_csv, write_summary_csv
from .training import PRIOR_STAGES, FrozenCheckpoint, freeze, required_priors, train_stage

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationVariant:
    """One configuration in a comparison.

    A ``standalone`` variant trains nothing: the named subtask's checkpoint
    is scored directly.
    """

    name: str
    criterion: str
    options: NetworkOptions
    standalone: str | None = None

    @property
    def priors(self) -> tuple[str, ...]:
        if self.standalone is not None:
            return (self.standalone,)
        return required_priors(STAGE_MAIN, self.options)


@dataclass
class AblationResult:
    mode: str
    reports: list[MetricReport]
    checkpoints: dict[str, Path]
    comparison_path: Path
    plot_paths: list[Path]


def ablation_variants(cfg: RunConfig, mode: str) -> list[AblationVariant]:
    """The four criteria, or the lateral configurations plus the lone multi-focus network."""
    options = network_options(cfg)
    if mode == ABLATE_CRITERIA:
        return [AblationVariant(name, name, options) for name in ABLATION_CRITERIA]
    if mode == ABLATE_TASKS:
        variants = []
        for name in TASK_VARIANT_ORDER:
            if name == TASK_MULTIFOCUS_ONLY:
                variants.append(
                    AblationVariant(name, cfg.criterion, options, standalone=STAGE_SUBTASK2)
                )
                continue
            recon, multifocus = TASK_VARIANTS[name]
            variants.append(
                AblationVariant(
                    name,
                    cfg.criterion,
                    replace(options, lateral_recon=recon, lateral_multifocus=multifocus),
                )
            )
        return variants
    raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {ABLATE_MODES}")


def _subtask_priors(
    cfg: RunConfig, out_dir: Path, stages: set[str]
) -> dict[str, FrozenCheckpoint]:
    """The requested subtask checkpoints, training any that do not exist yet."""
    kinds = {STAGE_SUBTASK1: KIND_RECON, STAGE_SUBTASK2: KIND_MULTIFOCUS}
    priors: dict[str, FrozenCheckpoint] = {}
    for stage, path in zip(PRIOR_STAGES[STAGE_MAIN], prior_checkpoint_paths(cfg, STAGE_MAIN)):
        if stage not in stages:
            continue
        kind = kinds[stage]
        ckpt: Checkpoint
        if path.is_file():
            ckpt = load_checkpoint(path, expected_kind=kind)
            _LOGGER.info("Using %s checkpoint %s", stage, path)
        else:
            _LOGGER.info("No %s checkpoint at %s, training one under %s", stage, path, out_dir)
            ckpt, _ = train_stage(stage_config(cfg, stage, out_dir=out_dir))
        priors[stage] = freeze(ckpt)
    return priors


def run_ablation(
    cfg: RunConfig,
    mode: str,
    out_dir: str | os.PathLike[str],
    variants: Sequence[AblationVariant] | None = None,
) -> AblationResult:
    """Train and evaluate the main network once per variant.

    Subtask checkpoints are loaded or trained only when some variant reads
    them. Every variant is scored on the evaluation manifest, and the
    comparison CSV holds one row of column means per variant.
    """
    folder = Path(out_dir)
    chosen = list(variants) if variants is not None else ablation_variants(cfg, mode)
    manifest_path = eval_manifest(cfg)
    if manifest_path is None:
        raise ManifestError(
            "ablation needs an evaluation manifest (eval.manifest or data.manifests.main)"
        )
    manifest = load_manifest(manifest_path)
    pairs = load_pairs(manifest, cfg.section(CONF_DATA)["workers"])
    ssim_window = cfg.section(CONF_EVAL)["ssim_window"]
    needed = {stage for variant in chosen for stage in variant.priors}
    priors = _subtask_priors(cfg, folder, needed)
    reports: list[MetricReport] = []
    checkpoints: dict[str, Path] = {}
    for variant in chosen:
        if variant.standalone is not None:
            _LOGGER.info("Ablation %s: scoring the %s network alone", mode, variant.standalone)
            ckpt = priors[variant.standalone].checkpoint
        else:
            _LOGGER.info("Ablation %s: training variant %s", mode, variant.name)
            stage_cfg = stage_config(
                cfg,
                STAGE_MAIN,
                out_dir=folder / variant.name,
                criterion=variant.criterion,
                options=variant.options,
            )
            ckpt, log = train_stage(stage_cfg, [priors[stage] for stage in variant.priors])
            if log.checkpoint_path is not None:
                checkpoints[variant.name] = log.checkpoint_path
        report, _ = evaluate_model(
            model_from_checkpoint(ckpt),
            pairs,
            variant.name,
            manifest_path.stem,
            ssim_window=ssim_window,
        )
        write_report_csv(report, folder / variant.name / "report.csv")
        reports.append(report)
    for handle in priors.values():
        handle.verify()
    comparison = write_summary_csv(reports, folder / ABLATION_FILE)
    plots = write_plots(reports, folder / "plots") if cfg.section(CONF_EVAL)["plots"] else []
    _LOGGER.info(
        "Ablation %s finished: %d variants, comparison in %s", mode, len(reports), comparison
    )
    return AblationResult(mode, reports, checkpoints, comparison, plots)
