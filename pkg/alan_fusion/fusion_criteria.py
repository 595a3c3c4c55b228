"""Feature- and pixel-merging rules.

The learned (nonlinear) rule fuses images with per-pixel weight maps
``f = W1*I1 + W2*I2``; maximum selection, sum and weighted average are the
special cases with indicator, all-one and constant-lambda maps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .const import (
    CRITERIA,
    CRITERION_CONCAT,
    CRITERION_HYBRID,
    CRITERION_MAXIMUM,
    CRITERION_NONLINEAR,
    CRITERION_SUM,
    CRITERION_WEIGHTED_AVERAGE,
    DEFAULT_FIXED_WEIGHT,
    DEFAULT_WEIGHT_EPS,
    MERGE_WIDTHS,
)
from .exceptions import ShapeMismatchError

# Accepted spellings resolved to canonical criterion names
_CRITERION_ALIASES: dict[str, str] = {
    "max": CRITERION_MAXIMUM,
    "add": CRITERION_SUM,
    "addition": CRITERION_SUM,
    "average": CRITERION_WEIGHTED_AVERAGE,
    "avg": CRITERION_WEIGHTED_AVERAGE,
    "mean": CRITERION_WEIGHTED_AVERAGE,
    "cat": CRITERION_CONCAT,
    "learned": CRITERION_NONLINEAR,
}


def normalize_criterion(name: str) -> str:
    """Return the canonical criterion name, resolving any alias."""
    key = name.strip().lower().replace("-", "_")
    canonical = _CRITERION_ALIASES.get(key, key)
    if canonical not in CRITERIA:
        raise ValueError(f"unknown fusion criterion {name!r}")
    return canonical


@dataclass(frozen=True)
class FusionCriterion:
    kind: str = CRITERION_NONLINEAR
    fixed_weight: float = DEFAULT_FIXED_WEIGHT

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", normalize_criterion(self.kind))
        if not 0.0 <= self.fixed_weight <= 1.0:
            raise ValueError(f"fixed_weight must lie in [0, 1], got {self.fixed_weight}")

    @property
    def merge_width(self) -> int:
        """Channel count entering C6/C7 under this criterion."""
        return MERGE_WIDTHS[self.kind]


@dataclass(frozen=True)
class FusionWeightMaps:
    """One nonnegative weight map per source image, same size as the sources."""

    maps: tuple[torch.Tensor, ...]

    def __post_init__(self) -> None:
        if not self.maps:
            raise ValueError("at least one weight map is required")
        shape = self.maps[0].shape
        for weight_map in self.maps:
            if weight_map.shape != shape:
                raise ShapeMismatchError("weight maps differ in shape")

    def __len__(self) -> int:
        return len(self.maps)

    def total(self) -> torch.Tensor:
        return torch.stack(self.maps).sum(dim=0)


def merge_features(
    fa: torch.Tensor, fb: torch.Tensor, criterion: FusionCriterion
) -> torch.Tensor:
    """Combine two feature maps of equal shape.

    ``concat``, ``nonlinear`` and ``hybrid``'s final step keep both streams by
    channel concatenation; under ``nonlinear`` the actual merge is left to the
    learned weight heads downstream.
    """
    if fa.shape != fb.shape:
        raise ShapeMismatchError(f"feature maps differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    kind = criterion.kind
    if kind == CRITERION_MAXIMUM:
        return torch.maximum(fa, fb)
    if kind == CRITERION_SUM:
        return fa + fb
    if kind in (CRITERION_WEIGHTED_AVERAGE, CRITERION_HYBRID):
        lam = criterion.fixed_weight
        return lam * fa + (1.0 - lam) * fb
    return torch.cat([fa, fb], dim=1)


def merged_channels(channels: int, criterion: FusionCriterion) -> int:
    """Channel count of :func:`merge_features` output for inputs of ``channels``."""
    if criterion.kind in (CRITERION_CONCAT, CRITERION_NONLINEAR):
        return 2 * channels
    return channels


def nonlinear_fuse(
    images: Sequence[torch.Tensor], maps: FusionWeightMaps
) -> torch.Tensor:
    """Per-pixel weighted combination of two sources, unclipped."""
    if len(images) != 2 or len(maps) != 2:
        raise ShapeMismatchError(
            f"fusion takes exactly two sources and two maps, got {len(images)} and {len(maps)}"
        )
    for image, weight_map in zip(images, maps.maps):
        if image.shape != weight_map.shape:
            raise ShapeMismatchError(
                f"image {tuple(image.shape)} and weight map {tuple(weight_map.shape)} differ"
            )
    return maps.maps[0] * images[0] + maps.maps[1] * images[1]


def normalize_weight_maps(
    raw: FusionWeightMaps, eps: float = DEFAULT_WEIGHT_EPS
) -> FusionWeightMaps:
    """Scale maps by their per-pixel sum plus ``eps``."""
    denominator = raw.total() + eps
    return FusionWeightMaps(tuple(weight_map / denominator for weight_map in raw.maps))


def fill_degenerate_pixels(
    maps: FusionWeightMaps, raw_total: torch.Tensor, floor: float
) -> FusionWeightMaps:
    """Use equal weights wherever the raw weight sum is at or below ``floor``."""
    degenerate = raw_total <= floor
    if not bool(degenerate.any()):
        return maps
    equal = 1.0 / len(maps)
    return FusionWeightMaps(
        tuple(
            torch.where(degenerate, torch.full_like(weight_map, equal), weight_map)
            for weight_map in maps.maps
        )
    )


def maximum_selection_maps(a: torch.Tensor, b: torch.Tensor) -> FusionWeightMaps:
    """Indicator maps picking the larger source; ties go to the first source."""
    if a.shape != b.shape:
        raise ShapeMismatchError("sources differ in shape")
    first = (a >= b).to(a.dtype)
    return FusionWeightMaps((first, 1.0 - first))


def constant_maps(like: torch.Tensor, w1: float, w2: float) -> FusionWeightMaps:
    return FusionWeightMaps((torch.full_like(like, w1), torch.full_like(like, w2)))


def export_clip(fused: torch.Tensor) -> torch.Tensor:
    """Clip a fused result to [0, 1] for writing; losses use the raw value."""
    return fused.clamp(0.0, 1.0)
