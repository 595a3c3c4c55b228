"""Errors raised by the ALAN fusion package.

Each class carries the CLI exit code it maps to; only the CLI turns them into
process exit statuses.
"""
from __future__ import annotations

from .const import EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE


class AlanFusionError(Exception):
    """Base class for all package errors."""

    exit_code = EXIT_USAGE


class UsageError(AlanFusionError):
    """Error to indicate a bad command line or forbidden option."""

    exit_code = EXIT_USAGE


class ConfigError(UsageError):
    """Error to indicate the run config failed validation."""


class DataError(AlanFusionError):
    """Error to indicate unusable input data or artefacts."""

    exit_code = EXIT_DATA


class ImageLoadError(DataError):
    """Error to indicate an image file is missing, undecodable or empty."""


class ManifestError(DataError):
    """Error to indicate a malformed or inconsistent dataset manifest."""


class PatchSizeError(DataError):
    """Error to indicate a patch larger than its source image."""


class ShapeMismatchError(DataError):
    """Error to indicate operands with incompatible shapes."""


class MissingPrerequisiteError(DataError):
    """Error to indicate a stage was started without its prior checkpoints."""


class CheckpointError(DataError):
    """Error to indicate a checkpoint cannot be used."""


class CheckpointVersionError(CheckpointError):
    """Error to indicate an unsupported checkpoint format version."""


class CriterionMismatchError(CheckpointError):
    """Error to indicate a checkpoint trained under another fusion criterion."""


class CheckpointCorruptError(CheckpointError):
    """Error to indicate a truncated or damaged checkpoint file."""


class FrozenWeightsError(DataError):
    """Error to indicate frozen subtask weights were offered for training."""


class NumericError(AlanFusionError):
    """Error to indicate a numeric failure."""

    exit_code = EXIT_NUMERIC


class NonFiniteGradientError(NumericError):
    """Error to indicate a gradient step produced NaN or infinite values."""


class TooSmallForMetricError(NumericError):
    """Error to indicate an image is below a metric's minimum support."""
