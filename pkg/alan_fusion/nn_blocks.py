"""Differentiable building blocks shared by the three networks.

Convolutions use same-padding so every block preserves spatial size at
stride 1. Gradients come from torch autograd.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .const import DEFAULT_ATTENTION_RATIO, STREAM_CHANNELS
from .exceptions import ShapeMismatchError

ACTIVATION_RELU = "relu"
ACTIVATION_SIGMOID = "sigmoid"
ACTIVATION_NONE = "none"
ACTIVATIONS: tuple[str, ...] = (ACTIVATION_RELU, ACTIVATION_SIGMOID, ACTIVATION_NONE)


@dataclass(frozen=True)
class ConvSpec:
    """One row of a layer table."""

    name: str
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    activation: str = ACTIVATION_RELU

    def __post_init__(self) -> None:
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"{self.name}: kernel size must be odd, got {self.kernel_size}")
        if self.stride < 1:
            raise ValueError(f"{self.name}: stride must be at least 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"{self.name}: channel counts must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"{self.name}: unknown activation {self.activation!r}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)


@dataclass(frozen=True)
class LayerWeights:
    """Kernel (out, in, k, k) and optional bias (out,) of one convolution."""

    weight: torch.Tensor
    bias: torch.Tensor | None = None


@dataclass(frozen=True)
class AttentionWeights:
    """Reduction (channels/r x channels) and expansion (channels x channels/r) transforms."""

    w1: torch.Tensor
    w2: torch.Tensor
    reduction_ratio: int

    @property
    def channels(self) -> int:
        return int(self.w1.shape[1])


# Subtask 1 dense encoder / decoder rows
DENSE_ENCODER_SPECS: tuple[ConvSpec, ...] = (
    ConvSpec("C1", 3, 1, 16),
    ConvSpec("EC1", 3, 16, 16),
    ConvSpec("EC2", 3, 32, 16),
    ConvSpec("EC3", 3, 48, 16),
)
DENSE_DECODER_SPECS: tuple[ConvSpec, ...] = (
    ConvSpec("DC1", 3, 64, 64),
    ConvSpec("DC2", 3, 64, 32),
    ConvSpec("DC3", 3, 32, 16),
    ConvSpec("DC4", 3, 16, 1),
)
# Multi-scale residual block rows: two parallel stages then a 1x1 fuse
MSRB_STAGE1_SPECS: tuple[ConvSpec, ...] = (
    ConvSpec("C12", 1, 64, 64),
    ConvSpec("C13", 3, 64, 64),
    ConvSpec("C14", 5, 64, 64),
)
MSRB_STAGE2_SPECS: tuple[ConvSpec, ...] = (
    ConvSpec("C15", 1, 192, 64),
    ConvSpec("C16", 3, 192, 64),
    ConvSpec("C17", 5, 192, 64),
)
MSRB_FUSE_SPEC = ConvSpec("C18", 1, 192, 64)


def apply_activation(x: torch.Tensor, activation: str) -> torch.Tensor:
    if activation == ACTIVATION_RELU:
        return torch.relu(x)
    if activation == ACTIVATION_SIGMOID:
        return torch.sigmoid(x)
    return x


def _check_channels(x: torch.Tensor, expected: int, where: str) -> None:
    if x.dim() != 4:
        raise ShapeMismatchError(f"{where}: expected a rank-4 feature map, got {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ShapeMismatchError(
            f"{where}: expected {expected} input channels, got {x.shape[1]}"
        )


def conv_preactivation(x: torch.Tensor, spec: ConvSpec, weights: LayerWeights) -> torch.Tensor:
    """Same-padded convolution without the activation."""
    _check_channels(x, spec.in_channels, spec.name)
    if tuple(weights.weight.shape) != spec.weight_shape:
        raise ShapeMismatchError(
            f"{spec.name}: kernel shape {tuple(weights.weight.shape)} != {spec.weight_shape}"
        )
    if weights.bias is not None and tuple(weights.bias.shape) != (spec.out_channels,):
        raise ShapeMismatchError(f"{spec.name}: bias shape {tuple(weights.bias.shape)}")
    return F.conv2d(
        x, weights.weight, weights.bias, stride=spec.stride, padding=spec.kernel_size // 2
    )


def conv2d(x: torch.Tensor, spec: ConvSpec, weights: LayerWeights) -> torch.Tensor:
    """Same-padded convolution followed by the ConvSpec activation."""
    return apply_activation(conv_preactivation(x, spec, weights), spec.activation)


def global_average_pool(x: torch.Tensor) -> torch.Tensor:
    """Per (batch, channel) mean over the spatial dimensions, shape (B, C)."""
    if x.dim() != 4:
        raise ShapeMismatchError(f"expected a rank-4 feature map, got {tuple(x.shape)}")
    return x.mean(dim=(2, 3))


def channel_attention(features: torch.Tensor, aw: AttentionWeights) -> torch.Tensor:
    """Gate every channel by sigmoid(w2 . relu(w1 . GAP(F)))."""
    channels = features.shape[1]
    if channels % aw.reduction_ratio:
        raise ShapeMismatchError(
            f"{channels} channels not divisible by reduction ratio {aw.reduction_ratio}"
        )
    if aw.channels != channels:
        raise ShapeMismatchError(f"attention built for {aw.channels} channels, got {channels}")
    pooled = global_average_pool(features)
    gate = torch.sigmoid(torch.relu(pooled @ aw.w1.T) @ aw.w2.T)
    return features * gate[:, :, None, None]


class ConvLayer(nn.Module):
    """A single table row as a trainable layer."""

    def __init__(self, spec: ConvSpec, bias: bool = True) -> None:
        super().__init__()
        self.spec = spec
        self.weight = nn.Parameter(torch.empty(spec.weight_shape))
        self.bias: nn.Parameter | None
        if bias:
            self.bias = nn.Parameter(torch.empty(spec.out_channels))
        else:
            self.register_parameter("bias", None)
        self.reset_parameters()

    def reset_parameters(self, bias_value: float = 0.0) -> None:
        """He-uniform for relu rows, Xavier-uniform otherwise."""
        if self.spec.activation == ACTIVATION_RELU:
            nn.init.kaiming_uniform_(self.weight, nonlinearity="relu")
        else:
            nn.init.xavier_uniform_(self.weight)
        if self.bias is not None:
            nn.init.constant_(self.bias, bias_value)

    @property
    def weights(self) -> LayerWeights:
        return LayerWeights(self.weight, self.bias)

    def preactivation(self, x: torch.Tensor) -> torch.Tensor:
        return conv_preactivation(x, self.spec, self.weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.spec, self.weights)

    def extra_repr(self) -> str:
        spec = self.spec
        return (
            f"{spec.name}: k={spec.kernel_size} {spec.in_channels}->{spec.out_channels} "
            f"s={spec.stride} {spec.activation}"
        )


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation style channel gate (bias-free transforms)."""

    def __init__(self, channels: int, reduction_ratio: int = DEFAULT_ATTENTION_RATIO) -> None:
        super().__init__()
        if reduction_ratio < 1 or channels % reduction_ratio:
            raise ShapeMismatchError(
                f"{channels} channels not divisible by reduction ratio {reduction_ratio}"
            )
        self.reduction_ratio = reduction_ratio
        hidden = channels // reduction_ratio
        self.w1 = nn.Parameter(torch.empty(hidden, channels))
        self.w2 = nn.Parameter(torch.empty(channels, hidden))
        nn.init.kaiming_uniform_(self.w1, nonlinearity="relu")
        nn.init.xavier_uniform_(self.w2)

    @property
    def attention_weights(self) -> AttentionWeights:
        return AttentionWeights(self.w1, self.w2, self.reduction_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return channel_attention(x, self.attention_weights)


def _layers(specs: Sequence[ConvSpec], bias: bool) -> nn.ModuleDict:
    return nn.ModuleDict({spec.name: ConvLayer(spec, bias) for spec in specs})


class MultiScaleResidualBlock(nn.Module):
    """Kernels 1/3/5 in two concatenated stages, a 1x1 fuse and a residual add."""

    def __init__(self, bias: bool = True) -> None:
        super().__init__()
        self.stage1 = _layers(MSRB_STAGE1_SPECS, bias)
        self.stage2 = _layers(MSRB_STAGE2_SPECS, bias)
        self.fuse = ConvLayer(MSRB_FUSE_SPEC, bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, STREAM_CHANNELS, "MSRB")
        first = torch.cat([layer(x) for layer in self.stage1.values()], dim=1)
        second = torch.cat([layer(first) for layer in self.stage2.values()], dim=1)
        return self.fuse(second) + x


def msrb(x: torch.Tensor, block: MultiScaleResidualBlock) -> torch.Tensor:
    return block(x)


class DenseEncoder(nn.Module):
    """C1 then EC1-EC3, each consuming the concatenation of all earlier outputs."""

    def __init__(self, bias: bool = True) -> None:
        super().__init__()
        self.layers = _layers(DENSE_ENCODER_SPECS, bias)

    def _outputs(self, img: torch.Tensor) -> list[torch.Tensor]:
        _check_channels(img, 1, "dense encoder")
        outputs: list[torch.Tensor] = []
        for name, layer in self.layers.items():
            source = img if name == "C1" else torch.cat(outputs, dim=1)
            outputs.append(layer(source))
        return outputs

    def taps(self, img: torch.Tensor) -> list[torch.Tensor]:
        """EC1, EC2 and EC3 activations, the perceptual-loss feature taps."""
        return self._outputs(img)[1:]

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return torch.cat(self._outputs(img), dim=1)


class DenseDecoder(nn.Module):
    """DC1-DC4 bringing 64 channels back to one."""

    def __init__(self, bias: bool = True) -> None:
        super().__init__()
        self.layers = _layers(DENSE_DECODER_SPECS, bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        _check_channels(features, STREAM_CHANNELS, "dense decoder")
        out = features
        for layer in self.layers.values():
            out = layer(out)
        return out


def dense_encode(img: torch.Tensor, encoder: DenseEncoder) -> torch.Tensor:
    return encoder(img)


def dense_decode(features: torch.Tensor, decoder: DenseDecoder) -> torch.Tensor:
    return decoder(features)
