"""Image quality metrics and mean-opinion-score arithmetic."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.signal import convolve2d

from .const import (
    DEFAULT_SSIM_WINDOW,
    METRIC_COLUMNS,
    MOS_DATASETS,
    MOS_MAX_SCORE,
    MOS_MIN_RATERS,
    MOS_MIN_SCORE,
    PUBLISHED_MOS,
    VIF_MIN_SIZE,
)
from .data_pipeline import Image
from .exceptions import ShapeMismatchError, TooSmallForMetricError
from .losses import psnr, ssim

_LOGGER = logging.getLogger(__name__)

_VIF_NOISE_VARIANCE = 2.0
_VIF_EPS = 1e-10
_VIF_SCALES = 4


def _check_same(a: Image, b: Image) -> None:
    if a.pixels.shape != b.pixels.shape:
        raise ShapeMismatchError(f"images differ in size: {a.pixels.shape} vs {b.pixels.shape}")


# ---------------------------------------------------------------------------
# No-reference metrics
# ---------------------------------------------------------------------------


def average_gradient(img: Image) -> float:
    """Mean of sqrt((dx^2 + dy^2) / 2) over the (H-1) x (W-1) forward-difference grid."""
    if img.width < 2 or img.height < 2:
        raise TooSmallForMetricError("average gradient needs at least 2x2 pixels")
    p = img.pixels
    dx = p[:-1, 1:] - p[:-1, :-1]
    dy = p[1:, :-1] - p[:-1, :-1]
    return float(np.mean(np.sqrt((dx * dx + dy * dy) / 2.0)))


def entropy(img: Image, bins: int = 256) -> float:
    """Shannon entropy in bits of the ``bins``-level histogram."""
    if bins < 2:
        raise ValueError("entropy needs at least two bins")
    levels = np.rint(img.pixels * (bins - 1)).astype(np.int64).ravel()
    counts = np.bincount(levels, minlength=bins)
    probs = counts[counts > 0] / levels.size
    return float(-(probs * np.log2(probs)).sum()) + 0.0


def spatial_frequency(img: Image) -> float:
    p = img.pixels
    row = np.mean((p[:, 1:] - p[:, :-1]) ** 2) if img.width > 1 else 0.0
    col = np.mean((p[1:, :] - p[:-1, :]) ** 2) if img.height > 1 else 0.0
    return float(np.sqrt(row + col))


def standard_deviation(img: Image) -> float:
    return float(np.std(img.pixels))


# ---------------------------------------------------------------------------
# Full-reference metrics
# ---------------------------------------------------------------------------


def _gaussian(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    y, x = np.ogrid[-half : half + 1, -half : half + 1]
    kernel = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    kernel[kernel < np.finfo(kernel.dtype).eps * kernel.max()] = 0
    return kernel / kernel.sum()


def _filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return convolve2d(img, np.rot90(kernel, 2), mode="valid")


def vif(ref: Image, dist: Image) -> float:
    """Pixel-domain visual information fidelity over four scales.

    Images are compared on a 0-255 scale under a Gaussian scale mixture
    model with noise variance 2. Scales whose window no longer fits are
    skipped; when neither image carries any information the result is 1.
    """
    _check_same(ref, dist)
    if min(ref.pixels.shape) < VIF_MIN_SIZE:
        raise TooSmallForMetricError(f"VIF needs at least {VIF_MIN_SIZE}x{VIF_MIN_SIZE} pixels")
    a = ref.pixels * 255.0
    b = dist.pixels * 255.0
    num = 0.0
    den = 0.0
    for scale in range(1, _VIF_SCALES + 1):
        size = 2 ** (_VIF_SCALES - scale + 1) + 1
        window = _gaussian(size, size / 5.0)
        if scale > 1:
            if min(a.shape) < size:
                _LOGGER.warning("VIF: image too small for scale %d, skipping the rest", scale)
                break
            a = _filter(a, window)[::2, ::2]
            b = _filter(b, window)[::2, ::2]
        if min(a.shape) < size:
            _LOGGER.warning("VIF: image too small for scale %d, skipping the rest", scale)
            break
        mu1 = _filter(a, window)
        mu2 = _filter(b, window)
        sigma1_sq = np.maximum(_filter(a * a, window) - mu1 * mu1, 0.0)
        sigma2_sq = np.maximum(_filter(b * b, window) - mu2 * mu2, 0.0)
        sigma12 = _filter(a * b, window) - mu1 * mu2

        g = sigma12 / (sigma1_sq + _VIF_EPS)
        sv_sq = sigma2_sq - g * sigma12
        flat_ref = sigma1_sq < _VIF_EPS
        g[flat_ref] = 0
        sv_sq[flat_ref] = sigma2_sq[flat_ref]
        sigma1_sq[flat_ref] = 0
        flat_dist = sigma2_sq < _VIF_EPS
        g[flat_dist] = 0
        sv_sq[flat_dist] = 0
        negative = g < 0
        sv_sq[negative] = sigma2_sq[negative]
        g[negative] = 0
        sv_sq[sv_sq <= _VIF_EPS] = _VIF_EPS

        num += float(np.sum(np.log10(1 + g * g * sigma1_sq / (sv_sq + _VIF_NOISE_VARIANCE))))
        den += float(np.sum(np.log10(1 + sigma1_sq / _VIF_NOISE_VARIANCE)))
    if den == 0.0:
        return 1.0 if num == 0.0 else 0.0
    value = num / den
    return 1.0 if math.isnan(value) else value


def _tensor(img: Image) -> torch.Tensor:
    return img.to_tensor(torch.float64)


def ssim_index(x: Image, y: Image, window: int = DEFAULT_SSIM_WINDOW) -> float:
    _check_same(x, y)
    return float(ssim(_tensor(x), _tensor(y), window=window))


def psnr_db(x: Image, y: Image) -> float:
    _check_same(x, y)
    return float(psnr(_tensor(x), _tensor(y)))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


MetricRow = dict[str, float | None]


def evaluate_pair(
    fused: Image, src_a: Image, src_b: Image, ssim_window: int = DEFAULT_SSIM_WINDOW
) -> MetricRow:
    """All computed report columns for one fused image; reserved columns stay empty."""
    _check_same(fused, src_a)
    _check_same(fused, src_b)
    window = min(ssim_window, fused.width, fused.height)
    if window % 2 == 0:
        window -= 1
    ssim_a = ssim_index(fused, src_a, window)
    ssim_b = ssim_index(fused, src_b, window)
    row: MetricRow = {name: None for name in METRIC_COLUMNS}
    row.update(
        ag=average_gradient(fused),
        entropy=entropy(fused),
        sf=spatial_frequency(fused),
        sd=standard_deviation(fused),
        ssim_a=ssim_a,
        ssim_b=ssim_b,
        ssim_mean=(ssim_a + ssim_b) / 2.0,
        psnr_a=psnr_db(fused, src_a),
        psnr_b=psnr_db(fused, src_b),
    )
    if min(fused.pixels.shape) >= VIF_MIN_SIZE:
        row.update(vif_a=vif(src_a, fused), vif_b=vif(src_b, fused))
    else:
        _LOGGER.debug("Fused image below %d pixels, VIF columns left empty", VIF_MIN_SIZE)
    return row


@dataclass
class MetricReport:
    """Per-image metric rows for one method on one dataset."""

    method: str
    dataset: str
    rows: list[MetricRow] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)

    def add(self, row: MetricRow, label: str = "") -> None:
        self.rows.append({name: row.get(name) for name in METRIC_COLUMNS})
        self.labels.append(label or str(len(self.rows)))

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list[float]:
        return [value for row in self.rows if (value := row.get(name)) is not None]

    def means(self) -> MetricRow:
        """Arithmetic mean of each column over the rows that carry a value."""
        result: MetricRow = {}
        for name in METRIC_COLUMNS:
            values = self.column(name)
            result[name] = math.fsum(values) / len(values) if values else None
        return result


# ---------------------------------------------------------------------------
# Mean opinion scores
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MosRecord:
    """Raw 0-5 scores given by raters to one method on one dataset.

    Out-of-range scores are kept (and logged); the aggregation drops the
    extremes anyway.
    """

    scores: tuple[float, ...]
    method: str = ""
    dataset: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if any(math.isnan(score) for score in self.scores):
            raise ValueError("MOS scores must be numbers")
        outside = [s for s in self.scores if not MOS_MIN_SCORE <= s <= MOS_MAX_SCORE]
        if outside:
            _LOGGER.warning(
                "MOS record %s/%s has %d score(s) outside [%s, %s]",
                self.method or "?",
                self.dataset or "?",
                len(outside),
                MOS_MIN_SCORE,
                MOS_MAX_SCORE,
            )


def mos_aggregate(rec: MosRecord) -> float:
    """Drop one highest and one lowest score, average the rest."""
    if len(rec.scores) < MOS_MIN_RATERS:
        raise ValueError(f"MOS aggregation needs at least {MOS_MIN_RATERS} scores")
    kept = sorted(rec.scores)[1:-1]
    return math.fsum(kept) / len(kept)


def _canonical_method(method: str) -> str:
    key = method.strip().upper()
    if key not in PUBLISHED_MOS:
        raise KeyError(f"no stored subjective scores for method {method!r}")
    return key


def published_mos(method: str, dataset: str) -> float:
    """Stored subjective score of a compared method on CVS, IR or MF."""
    scores = PUBLISHED_MOS[_canonical_method(method)]
    key = dataset.strip().upper()
    if key not in scores:
        raise KeyError(f"no stored subjective score for dataset {dataset!r}")
    return scores[key]


def render_mos_table(methods: Sequence[str] | None = None) -> str:
    """Stored subjective scores as a fixed-width text table."""
    names = [_canonical_method(m) for m in methods] if methods else list(PUBLISHED_MOS)
    lines = [f"{'Method':<11}" + "".join(f"{d:>7}" for d in MOS_DATASETS)]
    for name in names:
        lines.append(
            f"{name:<11}" + "".join(f"{PUBLISHED_MOS[name][d]:>7.2f}" for d in MOS_DATASETS)
        )
    return "\n".join(lines) + "\n"
