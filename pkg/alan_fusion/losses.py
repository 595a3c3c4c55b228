"""Loss terms and their per-task combinations.

Every function accepts tensors holding one or more single-channel planes
(``(H, W)``, ``(1, H, W)`` or ``(B, 1, H, W)``) and returns a scalar tensor
so that autograd can flow back to the fused image.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .const import (
    DEFAULT_ALPHAS,
    DEFAULT_CAP_DB,
    DEFAULT_MSE_FLOOR,
    DEFAULT_SSIM_K1,
    DEFAULT_SSIM_K2,
    DEFAULT_SSIM_SIGMA,
    DEFAULT_SSIM_WINDOW,
    TASK_LE,
    TASK_LF,
    TASK_LM,
)
from .exceptions import ShapeMismatchError
from .nn_blocks import DenseEncoder

TERM_SSIM = "ssim"
TERM_PSNR = "psnr"
TERM_PERCEPTUAL = "perceptual"
TERM_MSE = "mse"
TERMS: tuple[str, ...] = (TERM_SSIM, TERM_PSNR, TERM_PERCEPTUAL, TERM_MSE)
TASK_TAGS: tuple[str, ...] = (TASK_LM, TASK_LF, TASK_LE)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the SSIM, PSNR, perceptual and MSE terms."""

    alpha_ssim: float = DEFAULT_ALPHAS[0]
    alpha_psnr: float = DEFAULT_ALPHAS[1]
    alpha_perceptual: float = DEFAULT_ALPHAS[2]
    alpha_mse: float = DEFAULT_ALPHAS[3]

    def __post_init__(self) -> None:
        alphas = self.as_dict().values()
        if any(alpha < 0 for alpha in alphas):
            raise ValueError("loss weights must be nonnegative")
        if not any(alpha > 0 for alpha in alphas):
            raise ValueError("at least one loss weight must be positive")

    def as_dict(self) -> dict[str, float]:
        return {
            TERM_SSIM: self.alpha_ssim,
            TERM_PSNR: self.alpha_psnr,
            TERM_PERCEPTUAL: self.alpha_perceptual,
            TERM_MSE: self.alpha_mse,
        }


@dataclass
class LossReport:
    """Itemised loss: the four terms, their weights, the weighted total and a task tag."""

    terms: dict[str, torch.Tensor]
    weights: LossWeights
    tag: str
    total: torch.Tensor = field(init=False)

    def __post_init__(self) -> None:
        if self.tag not in TASK_TAGS:
            raise ValueError(f"unknown task tag {self.tag!r}")
        alphas = self.weights.as_dict()
        total = torch.zeros((), dtype=self.terms[TERM_MSE].dtype)
        for name in TERMS:
            total = total + alphas[name] * self.terms[name]
        self.total = total

    def values(self) -> dict[str, float]:
        """Plain floats for logging: each term plus ``total``."""
        row = {name: float(self.terms[name].detach()) for name in TERMS}
        row["total"] = float(self.total.detach())
        return row


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    if x.dim() == 4 and x.shape[1] == 1:
        return x
    raise ShapeMismatchError(f"expected single-channel planes, got {tuple(x.shape)}")


def _check_pair(x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    xb, yb = _as_batch(x), _as_batch(y)
    if xb.shape != yb.shape:
        raise ShapeMismatchError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return xb, yb


def gaussian_window(
    size: int, sigma: float = DEFAULT_SSIM_SIGMA, dtype: torch.dtype = torch.float64
) -> torch.Tensor:
    """Normalised 2-D Gaussian kernel of odd ``size``."""
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    profile = torch.exp(-(coords**2) / (2.0 * sigma**2))
    profile = profile / profile.sum()
    return torch.outer(profile, profile)


def ssim(
    x: torch.Tensor,
    y: torch.Tensor,
    window: int = DEFAULT_SSIM_WINDOW,
    k1: float = DEFAULT_SSIM_K1,
    k2: float = DEFAULT_SSIM_K2,
) -> torch.Tensor:
    """Mean SSIM over all fully contained Gaussian windows (dynamic range 1)."""
    xb, yb = _check_pair(x, y)
    if window % 2 == 0 or window < 1:
        raise ValueError(f"SSIM window must be odd, got {window}")
    if window > min(xb.shape[-2:]):
        raise ValueError(f"SSIM window {window} exceeds image size {tuple(xb.shape[-2:])}")
    kernel = gaussian_window(window, dtype=xb.dtype)[None, None]
    c1 = k1**2
    c2 = k2**2

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, kernel)

    mu_x, mu_y = blur(xb), blur(yb)
    var_x = blur(xb * xb) - mu_x * mu_x
    var_y = blur(yb * yb) - mu_y * mu_y
    cov = blur(xb * yb) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (numerator / denominator).mean()


def loss_ssim(
    x: torch.Tensor, y: torch.Tensor, window: int = DEFAULT_SSIM_WINDOW
) -> torch.Tensor:
    return 1.0 - ssim(x, y, window=window)


def loss_mse(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    xb, yb = _check_pair(x, y)
    return ((xb - yb) ** 2).mean()


def psnr(x: torch.Tensor, y: torch.Tensor, mse_floor: float = DEFAULT_MSE_FLOOR) -> torch.Tensor:
    """Peak signal-to-noise ratio in dB for unit dynamic range."""
    return -10.0 * torch.log10(torch.clamp(loss_mse(x, y), min=mse_floor))


def loss_psnr(
    x: torch.Tensor, y: torch.Tensor, cap_db: float = DEFAULT_CAP_DB
) -> torch.Tensor:
    """Cap-normalised PSNR deficit ``max(0, (cap - psnr) / cap)``."""
    return torch.clamp((cap_db - psnr(x, y)) / cap_db, min=0.0)


def loss_perceptual(
    x: torch.Tensor, y: torch.Tensor, extractor: DenseEncoder | None
) -> torch.Tensor:
    """Mean squared distance of EC1-EC3 activations, averaged over the taps."""
    xb, yb = _check_pair(x, y)
    if extractor is None:
        return torch.zeros((), dtype=xb.dtype)
    if any(param.requires_grad for param in extractor.parameters()):
        raise ValueError("perceptual extractor weights must be frozen")
    taps_x = extractor.taps(xb)
    taps_y = extractor.taps(yb)
    distances = [((fx - fy) ** 2).mean() for fx, fy in zip(taps_x, taps_y)]
    return torch.stack(distances).mean()


def combined_loss(
    x: torch.Tensor,
    y: torch.Tensor,
    lw: LossWeights,
    extractor: DenseEncoder | None = None,
    *,
    cap_db: float = DEFAULT_CAP_DB,
    window: int = DEFAULT_SSIM_WINDOW,
    tag: str = TASK_LE,
) -> LossReport:
    """Weighted SSIM + PSNR + perceptual + MSE loss of ``x`` against ``y``."""
    terms = {
        TERM_SSIM: loss_ssim(x, y, window=window),
        TERM_PSNR: loss_psnr(x, y, cap_db=cap_db),
        TERM_PERCEPTUAL: loss_perceptual(x, y, extractor),
        TERM_MSE: loss_mse(x, y),
    }
    return LossReport(terms, lw, tag)


def fusion_task_loss(
    fused: torch.Tensor,
    src_a: torch.Tensor,
    src_b: torch.Tensor,
    lw: LossWeights,
    extractor: DenseEncoder | None = None,
    *,
    cap_db: float = DEFAULT_CAP_DB,
    window: int = DEFAULT_SSIM_WINDOW,
) -> LossReport:
    """Unsupervised fusion loss: the mean of the combined loss against each source."""
    report_a = combined_loss(fused, src_a, lw, extractor, cap_db=cap_db, window=window, tag=TASK_LF)
    report_b = combined_loss(fused, src_b, lw, extractor, cap_db=cap_db, window=window, tag=TASK_LF)
    terms = {name: 0.5 * report_a.terms[name] + 0.5 * report_b.terms[name] for name in TERMS}
    return LossReport(terms, lw, TASK_LF)


def total_loss(
    lm: torch.Tensor | float, lf: torch.Tensor | float, le: torch.Tensor | float
) -> torch.Tensor | float:
    """Sum of the three task losses; a stage passes zero for the terms it does not train."""
    return lm + lf + le
