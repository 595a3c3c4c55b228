"""Run configuration: YAML documents validated against a voluptuous schema.

Every key has a default, so an empty document is a valid run config. Unknown
keys are rejected at every level.
"""
from __future__ import annotations

import json
import logging
import os
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import voluptuous as vol
import yaml

from .checkpoint import checkpoint_name
from .const import (
    CRITERION_NONLINEAR,
    DEFAULT_ADAM_BETAS,
    DEFAULT_ADAM_EPS,
    DEFAULT_ALPHAS,
    DEFAULT_ATTENTION_RATIO,
    DEFAULT_BLUR_SIGMA_RANGE,
    DEFAULT_BRIGHTNESS_RANGE,
    DEFAULT_CAP_DB,
    DEFAULT_DEGENERATE_FLOOR,
    DEFAULT_FIXED_WEIGHT,
    DEFAULT_KEEP_CHECKPOINTS,
    DEFAULT_NOISE_SIGMA_RANGE,
    DEFAULT_PATCH_HEIGHT,
    DEFAULT_PATCH_WIDTH,
    DEFAULT_RUN_DIR,
    DEFAULT_SSIM_WINDOW,
    DEFAULT_WEIGHT_EPS,
    OPTIMIZER_ADAM,
    OPTIMIZER_GD,
    PROVENANCE_FILE,
    RUN_CONFIG_FILE,
    STAGE_DEFAULTS,
    STAGE_MAIN,
    STAGE_SUBTASK1,
    STAGE_SUBTASK2,
    STAGES,
)
from .data_pipeline import AugmentOptions, DegradationSpec
from .exceptions import ConfigError
from .fusion_criteria import normalize_criterion
from .losses import LossWeights
from .networks import NetworkOptions
from .training import DatasetSource, StageConfig

_LOGGER = logging.getLogger(__name__)

_PACKAGE_VERSION = "unknown"
try:
    _manifest = json.loads(
        (Path(__file__).resolve().parent / "manifest.json").read_text(encoding="utf-8")
    )
    _PACKAGE_VERSION = str(_manifest.get("version", "unknown"))
except (OSError, ValueError, TypeError):
    pass

PRESET_DIR = Path(__file__).resolve().parent / "presets"

# Keys
CONF_DATA = "data"
CONF_MODEL = "model"
CONF_LOSS = "loss"
CONF_TRAIN = "train"
CONF_EVAL = "eval"
CONF_MANIFESTS = "manifests"
CONF_LATERALS = "laterals"
CONF_AUGMENT = "augment"
CONF_DEGRADATION = "degradation"


def _criterion(value: Any) -> str:
    if not isinstance(value, str):
        raise vol.Invalid("criterion must be a string")
    try:
        return normalize_criterion(value)
    except ValueError as err:
        raise vol.Invalid(str(err)) from err


def _range_pair(value: Any) -> list[float]:
    try:
        lo, hi = (float(item) for item in value)
    except (TypeError, ValueError) as err:
        raise vol.Invalid("expected a [low, high] pair of numbers") from err
    if lo > hi:
        raise vol.Invalid(f"lower bound {lo} exceeds upper bound {hi}")
    if lo < 0:
        raise vol.Invalid(f"bounds must be non-negative, got [{lo}, {hi}]")
    return [lo, hi]


def _brightness_range(value: Any) -> list[float]:
    lo, hi = _range_pair(value)
    if lo <= 0:
        raise vol.Invalid(f"brightness lower bound must be positive, got {lo}")
    return [lo, hi]


def _source(value: Any) -> dict[str, Any]:
    """Accept ``path`` or ``{path, weight}`` for a main-stage manifest entry."""
    if isinstance(value, str):
        value = {"path": value}
    return _SOURCE_SCHEMA(value)


POSITIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=1))
NON_NEGATIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=0))
POSITIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False))
NON_NEGATIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0.0))
OPTIONAL_PATH = vol.Any(None, str)

_SOURCE_SCHEMA = vol.Schema(
    {
        vol.Required("path"): str,
        vol.Optional("weight", default=1.0): POSITIVE_FLOAT,
    },
    extra=vol.PREVENT_EXTRA,
)


def _odd(value: int) -> int:
    if value % 2 == 0:
        raise vol.Invalid(f"window size must be odd, got {value}")
    return value


WINDOW = vol.All(vol.Coerce(int), vol.Range(min=1), _odd)

DATA_SCHEMA = vol.Schema(
    {
        vol.Optional("patch_width", default=DEFAULT_PATCH_WIDTH): POSITIVE_INT,
        vol.Optional("patch_height", default=DEFAULT_PATCH_HEIGHT): POSITIVE_INT,
        vol.Optional("stride", default=None): vol.Any(None, POSITIVE_INT),
        vol.Optional(CONF_AUGMENT, default=dict): vol.Schema(
            {
                vol.Optional("hflip", default=False): bool,
                vol.Optional("vflip", default=False): bool,
                vol.Optional("random_crop", default=False): bool,
            },
            extra=vol.PREVENT_EXTRA,
        ),
        vol.Optional(CONF_DEGRADATION, default=dict): vol.Schema(
            {
                vol.Optional(
                    "brightness_range", default=list(DEFAULT_BRIGHTNESS_RANGE)
                ): _brightness_range,
                vol.Optional(
                    "blur_sigma_range", default=list(DEFAULT_BLUR_SIGMA_RANGE)
                ): _range_pair,
                vol.Optional(
                    "noise_sigma_range", default=list(DEFAULT_NOISE_SIGMA_RANGE)
                ): _range_pair,
            },
            extra=vol.PREVENT_EXTRA,
        ),
        vol.Optional(CONF_MANIFESTS, default=dict): vol.Schema(
            {
                vol.Optional(STAGE_SUBTASK1, default=None): OPTIONAL_PATH,
                vol.Optional(STAGE_SUBTASK2, default=None): OPTIONAL_PATH,
                vol.Optional(STAGE_MAIN, default=list): [_source],
            },
            extra=vol.PREVENT_EXTRA,
        ),
        vol.Optional("workers", default=0): NON_NEGATIVE_INT,
    },
    extra=vol.PREVENT_EXTRA,
)

MODEL_SCHEMA = vol.Schema(
    {
        vol.Optional("criterion", default=CRITERION_NONLINEAR): _criterion,
        vol.Optional("fixed_weight", default=DEFAULT_FIXED_WEIGHT): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, max=1.0)
        ),
        vol.Optional("attention_ratio", default=DEFAULT_ATTENTION_RATIO): POSITIVE_INT,
        vol.Optional("normalize_weights", default=True): bool,
        vol.Optional("weight_eps", default=DEFAULT_WEIGHT_EPS): POSITIVE_FLOAT,
        vol.Optional("degenerate_floor", default=DEFAULT_DEGENERATE_FLOOR): NON_NEGATIVE_FLOAT,
        vol.Optional("conv_bias", default=True): bool,
        vol.Optional("share_branch_weights", default=False): bool,
        vol.Optional(CONF_LATERALS, default=dict): vol.Schema(
            {
                vol.Optional("recon", default=True): bool,
                vol.Optional("multifocus", default=True): bool,
            },
            extra=vol.PREVENT_EXTRA,
        ),
    },
    extra=vol.PREVENT_EXTRA,
)

_ALPHA_KEYS = ("alpha_ssim", "alpha_psnr", "alpha_perceptual", "alpha_mse")


def _some_alpha_positive(values: dict[str, Any]) -> dict[str, Any]:
    if not any(values[key] > 0 for key in _ALPHA_KEYS):
        raise vol.Invalid("at least one of " + ", ".join(_ALPHA_KEYS) + " must be positive")
    return values


LOSS_SCHEMA = vol.All(
    vol.Schema(
        {
            vol.Optional("alpha_ssim", default=DEFAULT_ALPHAS[0]): NON_NEGATIVE_FLOAT,
            vol.Optional("alpha_psnr", default=DEFAULT_ALPHAS[1]): NON_NEGATIVE_FLOAT,
            vol.Optional("alpha_perceptual", default=DEFAULT_ALPHAS[2]): NON_NEGATIVE_FLOAT,
            vol.Optional("alpha_mse", default=DEFAULT_ALPHAS[3]): NON_NEGATIVE_FLOAT,
            vol.Optional("cap_db", default=DEFAULT_CAP_DB): POSITIVE_FLOAT,
            vol.Optional("ssim_window", default=DEFAULT_SSIM_WINDOW): WINDOW,
        },
        extra=vol.PREVENT_EXTRA,
    ),
    _some_alpha_positive,
)


def _stage_schema(stage: str) -> vol.Schema:
    defaults = STAGE_DEFAULTS[stage]
    keys: dict[Any, Any] = {
        vol.Optional("learning_rate", default=defaults["learning_rate"]): POSITIVE_FLOAT,
        vol.Optional("batch_size", default=defaults["batch_size"]): POSITIVE_INT,
        vol.Optional("epochs", default=defaults["epochs"]): POSITIVE_INT,
        vol.Optional("patch_width", default=None): vol.Any(None, POSITIVE_INT),
        vol.Optional("patch_height", default=None): vol.Any(None, POSITIVE_INT),
        vol.Optional("max_steps", default=None): vol.Any(None, POSITIVE_INT),
    }
    if stage == STAGE_MAIN:
        keys[vol.Optional("subtask1_checkpoint", default=None)] = OPTIONAL_PATH
        keys[vol.Optional("subtask2_checkpoint", default=None)] = OPTIONAL_PATH
    return vol.Schema(keys, extra=vol.PREVENT_EXTRA)


TRAIN_SCHEMA = vol.Schema(
    {
        vol.Optional("seed", default=0): NON_NEGATIVE_INT,
        vol.Optional("out_dir", default=DEFAULT_RUN_DIR): str,
        vol.Optional("optimizer", default=OPTIMIZER_ADAM): vol.In((OPTIMIZER_ADAM, OPTIMIZER_GD)),
        vol.Optional("betas", default=list(DEFAULT_ADAM_BETAS)): vol.All(
            [vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0, max_included=False))],
            vol.Length(min=2, max=2),
        ),
        vol.Optional("adam_eps", default=DEFAULT_ADAM_EPS): POSITIVE_FLOAT,
        vol.Optional("keep_checkpoints", default=DEFAULT_KEEP_CHECKPOINTS): NON_NEGATIVE_INT,
        **{vol.Optional(stage, default=dict): _stage_schema(stage) for stage in STAGES},
    },
    extra=vol.PREVENT_EXTRA,
)

EVAL_SCHEMA = vol.Schema(
    {
        vol.Optional("manifest", default=None): OPTIONAL_PATH,
        vol.Optional("ssim_window", default=DEFAULT_SSIM_WINDOW): WINDOW,
        vol.Optional("plots", default=True): bool,
    },
    extra=vol.PREVENT_EXTRA,
)

RUN_CONFIG_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_DATA, default=dict): DATA_SCHEMA,
        vol.Optional(CONF_MODEL, default=dict): MODEL_SCHEMA,
        vol.Optional(CONF_LOSS, default=dict): LOSS_SCHEMA,
        vol.Optional(CONF_TRAIN, default=dict): TRAIN_SCHEMA,
        vol.Optional(CONF_EVAL, default=dict): EVAL_SCHEMA,
    },
    extra=vol.PREVENT_EXTRA,
)


@dataclass(frozen=True)
class RunConfig:
    """A validated run config and the document text it was parsed from."""

    values: dict[str, Any]
    text: str = ""
    source: Path | None = None

    def section(self, name: str) -> dict[str, Any]:
        return self.values[name]

    @property
    def seed(self) -> int:
        return int(self.values[CONF_TRAIN]["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.values[CONF_TRAIN]["out_dir"])

    @property
    def criterion(self) -> str:
        return str(self.values[CONF_MODEL]["criterion"])


def validate_run_config(data: Any, text: str = "", source: Path | None = None) -> RunConfig:
    if data is None:
        data = {}
    try:
        values = RUN_CONFIG_SCHEMA(data)
    except vol.Invalid as err:
        location = f"{source}: " if source else ""
        raise ConfigError(f"{location}invalid run config: {err}") from err
    if not text:
        text = yaml.safe_dump(values, sort_keys=True)
    return RunConfig(values, text, source)


def parse_run_config(text: str, source: Path | None = None) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{source or 'run config'} is not valid YAML: {err}") from err
    return validate_run_config(data, text, source)


def load_run_config(path: str | os.PathLike[str] | None = None) -> RunConfig:
    """Read a run config; ``None`` gives the all-defaults config.

    A bare name that is not an existing file is looked up among the bundled
    presets (``desk`` -> ``presets/desk.yaml``).
    """
    if path is None:
        return validate_run_config({})
    config_path = Path(path)
    if not config_path.is_file():
        preset = PRESET_DIR / f"{config_path.name}.yaml"
        if config_path.suffix or not preset.is_file():
            raise ConfigError(f"config file not found: {config_path}")
        config_path = preset
    try:
        text = config_path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {config_path}: {err}") from err
    _LOGGER.debug("Loaded run config %s", config_path)
    return parse_run_config(text, config_path)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def network_options(cfg: RunConfig) -> NetworkOptions:
    model = cfg.section(CONF_MODEL)
    laterals = model[CONF_LATERALS]
    return NetworkOptions(
        attention_ratio=model["attention_ratio"],
        conv_bias=model["conv_bias"],
        share_branch_weights=model["share_branch_weights"],
        normalize_weights=model["normalize_weights"],
        weight_eps=model["weight_eps"],
        degenerate_floor=model["degenerate_floor"],
        fixed_weight=model["fixed_weight"],
        lateral_recon=laterals["recon"],
        lateral_multifocus=laterals["multifocus"],
    )


def loss_weights(cfg: RunConfig) -> LossWeights:
    loss = cfg.section(CONF_LOSS)
    return LossWeights(
        alpha_ssim=loss["alpha_ssim"],
        alpha_psnr=loss["alpha_psnr"],
        alpha_perceptual=loss["alpha_perceptual"],
        alpha_mse=loss["alpha_mse"],
    )


def degradation_spec(cfg: RunConfig, seed: int = 0) -> DegradationSpec:
    ranges = cfg.section(CONF_DATA)[CONF_DEGRADATION]
    return DegradationSpec(
        brightness_range=tuple(ranges["brightness_range"]),  # type: ignore[arg-type]
        blur_sigma_range=tuple(ranges["blur_sigma_range"]),  # type: ignore[arg-type]
        noise_sigma_range=tuple(ranges["noise_sigma_range"]),  # type: ignore[arg-type]
        seed=seed,
    )


def stage_sources(cfg: RunConfig, stage: str) -> tuple[DatasetSource, ...]:
    manifests = cfg.section(CONF_DATA)[CONF_MANIFESTS]
    if stage == STAGE_MAIN:
        return tuple(DatasetSource(Path(item["path"]), item["weight"]) for item in manifests[stage])
    path = manifests[stage]
    return () if path is None else (DatasetSource(Path(path)),)


def prior_checkpoint_paths(
    cfg: RunConfig, stage: str, out_dir: str | os.PathLike[str] | None = None
) -> list[Path]:
    """Checkpoints a stage reads; unset entries point at the run directory."""
    if stage != STAGE_MAIN:
        return []
    block = cfg.section(CONF_TRAIN)[STAGE_MAIN]
    root = cfg.out_dir if out_dir is None else Path(out_dir)
    paths = []
    for prior in (STAGE_SUBTASK1, STAGE_SUBTASK2):
        explicit = block[f"{prior}_checkpoint"]
        paths.append(Path(explicit) if explicit else root / prior / checkpoint_name(prior))
    return paths


def eval_manifest(cfg: RunConfig) -> Path | None:
    explicit = cfg.section(CONF_EVAL)["manifest"]
    if explicit:
        return Path(explicit)
    sources = stage_sources(cfg, STAGE_MAIN)
    return sources[0].path if sources else None


def stage_config(
    cfg: RunConfig,
    stage: str,
    *,
    seed: int | None = None,
    resume: str | os.PathLike[str] | None = None,
    out_dir: str | os.PathLike[str] | None = None,
    criterion: str | None = None,
    options: NetworkOptions | None = None,
) -> StageConfig:
    """Hyperparameters of one stage drawn from the run config.

    Patch sizes left unset in the stage block fall back to the stage default
    for subtask 1 and to ``data.patch_width/height`` for the other stages.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    data = cfg.section(CONF_DATA)
    train = cfg.section(CONF_TRAIN)
    block = train[stage]
    if stage == STAGE_SUBTASK1:
        fallback_w = STAGE_DEFAULTS[stage]["patch_width"]
        fallback_h = STAGE_DEFAULTS[stage]["patch_height"]
    else:
        fallback_w, fallback_h = data["patch_width"], data["patch_height"]
    augment = data[CONF_AUGMENT]
    return StageConfig(
        stage=stage,
        learning_rate=block["learning_rate"],
        batch_size=block["batch_size"],
        epochs=block["epochs"],
        patch_width=int(block["patch_width"] or fallback_w),
        patch_height=int(block["patch_height"] or fallback_h),
        seed=cfg.seed if seed is None else seed,
        sources=stage_sources(cfg, stage),
        loss_weights=loss_weights(cfg),
        cap_db=cfg.section(CONF_LOSS)["cap_db"],
        ssim_window=cfg.section(CONF_LOSS)["ssim_window"],
        criterion=criterion or cfg.criterion,
        options=options or network_options(cfg),
        optimizer=train["optimizer"],
        betas=(train["betas"][0], train["betas"][1]),
        adam_eps=train["adam_eps"],
        stride=data["stride"],
        augment=AugmentOptions(augment["hflip"], augment["vflip"], augment["random_crop"]),
        max_steps=block["max_steps"],
        workers=data["workers"],
        out_dir=Path(out_dir) if out_dir is not None else cfg.out_dir,
        keep_checkpoints=train["keep_checkpoints"],
        resume=Path(resume) if resume is not None else None,
    )


# ---------------------------------------------------------------------------
# Run-directory artefacts
# ---------------------------------------------------------------------------


def write_run_config(cfg: RunConfig, directory: str | os.PathLike[str]) -> Path:
    """Echo the config document, as given, into a run directory."""
    folder = Path(directory)
    folder.mkdir(parents=True, exist_ok=True)
    target = folder / RUN_CONFIG_FILE
    target.write_text(cfg.text, encoding="utf-8")
    return target


def package_version() -> str:
    return _PACKAGE_VERSION


def write_provenance(
    directory: str | os.PathLike[str],
    seed: int,
    argv: Sequence[str],
    wall_clock_seconds: float,
    **extra: Any,
) -> Path:
    """Versions, platform, seed and command line of a run."""
    folder = Path(directory)
    folder.mkdir(parents=True, exist_ok=True)
    record = {
        "package_version": _PACKAGE_VERSION,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "platform": platform.platform(),
        "seed": seed,
        "argv": list(argv),
        "wall_clock_seconds": round(wall_clock_seconds, 3),
        **extra,
    }
    target = folder / PROVENANCE_FILE
    target.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _LOGGER.info("Wrote provenance to %s", target)
    return target
