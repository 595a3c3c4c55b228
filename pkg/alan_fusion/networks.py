"""The three networks, their lateral connections and checkpoint persistence.

``recon_subtask1`` is the dense encoder/decoder that undoes degradations,
``multifocus_subtask2`` and ``fusion_main`` share the siamese fusion layout:
per branch a shallow stream (C2/C4 or C3/C5) and a deep stream (MSRB then
channel attention), a merge point selected by the fusion criterion, the late
layers C6-C9 and the two weight heads C10/C11.
"""
from __future__ import annotations

import io
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import torch
from torch import nn

from .checkpoint import (
    Checkpoint,
    arrays_from_module,
    load_arrays_into,
    load_container,
    save_container,
)
from .const import (
    CRITERION_CONCAT,
    CRITERION_HYBRID,
    CRITERION_NONLINEAR,
    DEFAULT_ATTENTION_RATIO,
    DEFAULT_DEGENERATE_FLOOR,
    DEFAULT_FIXED_WEIGHT,
    DEFAULT_HEAD_BIAS,
    DEFAULT_WEIGHT_EPS,
    KIND_FUSION,
    KIND_MULTIFOCUS,
    KIND_RECON,
    LATERAL_MULTIFOCUS,
    LATERAL_RECON,
    MERGE_WIDTHS,
    NETWORK_KINDS,
    STAGE_UNTRAINED,
    STREAM_CHANNELS,
)
from .exceptions import (
    CheckpointCorruptError,
    CriterionMismatchError,
    ShapeMismatchError,
    UsageError,
)
from .fusion_criteria import (
    FusionCriterion,
    FusionWeightMaps,
    fill_degenerate_pixels,
    merge_features,
    nonlinear_fuse,
    normalize_criterion,
    normalize_weight_maps,
)
from .nn_blocks import (
    DENSE_DECODER_SPECS,
    DENSE_ENCODER_SPECS,
    MSRB_FUSE_SPEC,
    MSRB_STAGE1_SPECS,
    MSRB_STAGE2_SPECS,
    ChannelAttention,
    ConvLayer,
    ConvSpec,
    DenseDecoder,
    DenseEncoder,
    MultiScaleResidualBlock,
    apply_activation,
)

_LOGGER = logging.getLogger(__name__)

# Layers that may receive lateral contributions, and the shallow-stream
# layers fed by the reconstruction decoder's first layer.
LATERAL_MULTIFOCUS_LAYERS: tuple[str, ...] = ("C4", "C5", "C8", "C9")
LATERAL_RECON_TARGETS: dict[str, str] = {"a": "C4", "b": "C5"}


@dataclass(frozen=True)
class NetworkOptions:
    """Construction options recorded in every checkpoint."""

    attention_ratio: int = DEFAULT_ATTENTION_RATIO
    conv_bias: bool = True
    share_branch_weights: bool = False
    normalize_weights: bool = True
    weight_eps: float = DEFAULT_WEIGHT_EPS
    degenerate_floor: float = DEFAULT_DEGENERATE_FLOOR
    fixed_weight: float = DEFAULT_FIXED_WEIGHT
    lateral_recon: bool = True
    lateral_multifocus: bool = True

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> NetworkOptions:
        known = {item.name for item in fields(cls)}
        return cls(**{key: value for key, value in data.items() if key in known})


# ---------------------------------------------------------------------------
# Layer tables
# ---------------------------------------------------------------------------


def fusion_layer_specs(criterion: str) -> tuple[ConvSpec, ...]:
    """C2-C18 for a fusion-layout network under ``criterion``."""
    width = MERGE_WIDTHS[normalize_criterion(criterion)]
    late = 4 * STREAM_CHANNELS
    return (
        ConvSpec("C2", 3, 1, STREAM_CHANNELS),
        ConvSpec("C3", 3, 1, STREAM_CHANNELS),
        ConvSpec("C4", 3, STREAM_CHANNELS, STREAM_CHANNELS),
        ConvSpec("C5", 3, STREAM_CHANNELS, STREAM_CHANNELS),
        ConvSpec("C6", 3, width, STREAM_CHANNELS),
        ConvSpec("C7", 3, width, STREAM_CHANNELS),
        ConvSpec("C8", 3, STREAM_CHANNELS, STREAM_CHANNELS),
        ConvSpec("C9", 3, STREAM_CHANNELS, STREAM_CHANNELS),
        ConvSpec("C10", 3, late, 1),
        ConvSpec("C11", 3, late, 1),
        *MSRB_STAGE1_SPECS,
        *MSRB_STAGE2_SPECS,
        MSRB_FUSE_SPEC,
    )


def layer_table(kind: str, criterion: str | None = None) -> tuple[ConvSpec, ...]:
    """Declared layer rows of a network kind."""
    if kind == KIND_RECON:
        return DENSE_ENCODER_SPECS + DENSE_DECODER_SPECS
    if kind in (KIND_MULTIFOCUS, KIND_FUSION):
        return fusion_layer_specs(criterion or CRITERION_NONLINEAR)
    raise UsageError(f"unknown network kind {kind!r}")


def describe(
    kind: str, criterion: str | None = None, options: NetworkOptions | None = None
) -> str:
    """Render the layer table of a network kind as aligned text."""
    criterion_name = (
        None if kind == KIND_RECON else normalize_criterion(criterion or CRITERION_NONLINEAR)
    )
    network, _ = instantiate(kind, criterion_name, 0, options)
    out = io.StringIO()
    title = kind if criterion_name is None else f"{kind} ({criterion_name})"
    out.write(f"{title}\n")
    out.write(f"{'Layer':<6}{'Kernel':>7}{'Input':>7}{'Out':>6}{'Stride':>8}  Activation\n")
    for spec in layer_table(kind, criterion_name):
        out.write(
            f"{spec.name:<6}{spec.kernel_size:>7}{spec.in_channels:>7}"
            f"{spec.out_channels:>6}{spec.stride:>8}  {spec.activation}\n"
        )
    trainable = sum(p.numel() for p in unique_parameters(network))
    out.write(f"parameters: {trainable}\n")
    return out.getvalue()


def unique_parameters(module: nn.Module) -> Iterator[nn.Parameter]:
    """Parameters of ``module`` with shared tensors listed once."""
    seen: set[int] = set()
    for param in module.parameters():
        if id(param) not in seen:
            seen.add(id(param))
            yield param


def _table_rows(network: nn.Module) -> list[tuple[str, nn.Module]]:
    """(table name, layer) for every layer slot, shared slots included."""
    if isinstance(network, ReconstructionNetwork):
        return [*network.encoder.layers.items(), *network.decoder.layers.items()]
    if isinstance(network, FusionNetwork):
        rows = list(network.convs.items())
        for block in (network.msrb_a, network.msrb_b):
            rows.extend(block.stage1.items())
            rows.extend(block.stage2.items())
            rows.append((MSRB_FUSE_SPEC.name, block.fuse))
        return rows
    raise UsageError(f"{type(network).__name__} is not one of the network kinds")


def _geometry(spec: ConvSpec) -> tuple[int, int, int, int, str]:
    return (spec.kernel_size, spec.in_channels, spec.out_channels, spec.stride, spec.activation)


def audit_shapes(network: nn.Module, kind: str, criterion: str | None) -> None:
    """Check every constructed layer against the declared layer table."""
    expected = {spec.name: spec for spec in layer_table(kind, criterion)}
    rows = _table_rows(network)
    built = {name for name, _ in rows}
    if built != set(expected):
        missing = sorted(set(expected) - built)
        extra = sorted(built - set(expected))
        raise ShapeMismatchError(f"{kind}: layer set differs (missing {missing}, extra {extra})")
    for name, layer in rows:
        spec = expected[name]
        if (
            not isinstance(layer, ConvLayer)
            or _geometry(layer.spec) != _geometry(spec)
            or tuple(layer.weight.shape) != spec.weight_shape
        ):
            raise ShapeMismatchError(f"{kind}: layer {name} does not match its table row {spec}")


# ---------------------------------------------------------------------------
# Lateral connections
# ---------------------------------------------------------------------------


def lateral_sum(
    preactivation: torch.Tensor, contributions: Sequence[torch.Tensor], activation: str
) -> torch.Tensor:
    """Activation of an own-path pre-activation plus frozen lateral terms."""
    total = preactivation
    for contribution in contributions:
        if contribution.shape != preactivation.shape:
            raise ShapeMismatchError(
                f"lateral term {tuple(contribution.shape)} does not match "
                f"own path {tuple(preactivation.shape)}"
            )
        total = total + contribution
    return apply_activation(total, activation)


def forward_with_laterals(
    layer: ConvLayer, x: torch.Tensor, contributions: Sequence[torch.Tensor] = ()
) -> torch.Tensor:
    """One main-task layer receiving lateral terms from frozen subtask layers.

    ``contributions`` are the source layers' pre-activations on their own
    inputs; with none the result equals ``layer(x)`` exactly.
    """
    return lateral_sum(layer.preactivation(x), contributions, layer.spec.activation)


@dataclass(frozen=True)
class LateralTap:
    """One lateral source feeding a receiving main-task layer."""

    source: str
    source_layer: str
    receiving_layer: str


class LateralConnections:
    """Frozen subtask networks and the taps they feed into the main network."""

    def __init__(
        self,
        recon: ReconstructionNetwork | None = None,
        multifocus: FusionNetwork | None = None,
    ) -> None:
        self.recon = recon
        self.multifocus = multifocus
        for source in (recon, multifocus):
            if source is not None:
                source.requires_grad_(False)
                source.eval()

    @property
    def taps(self) -> tuple[LateralTap, ...]:
        taps: list[LateralTap] = []
        if self.recon is not None:
            taps.extend(
                LateralTap(LATERAL_RECON, "DC1", target)
                for target in LATERAL_RECON_TARGETS.values()
            )
        if self.multifocus is not None:
            taps.extend(
                LateralTap(LATERAL_MULTIFOCUS, name, name) for name in LATERAL_MULTIFOCUS_LAYERS
            )
        return tuple(taps)

    def __bool__(self) -> bool:
        return self.recon is not None or self.multifocus is not None

    def contributions(self, a: torch.Tensor, b: torch.Tensor) -> dict[str, list[torch.Tensor]]:
        """Per receiving layer, the frozen sources' pre-activations for inputs ``a``, ``b``."""
        result: dict[str, list[torch.Tensor]] = {}
        with torch.no_grad():
            if self.recon is not None:
                dc1 = self.recon.decoder.layers["DC1"]
                for key, source in (("a", a), ("b", b)):
                    encoded = self.recon.encoder(source)
                    result.setdefault(LATERAL_RECON_TARGETS[key], []).append(
                        dc1.preactivation(encoded)
                    )
            if self.multifocus is not None:
                output = self.multifocus.run(a, b, collect=True)
                for name in LATERAL_MULTIFOCUS_LAYERS:
                    result.setdefault(name, []).append(output.preactivations[name])
        return result

    def checkpoints(self) -> dict[str, Checkpoint]:
        sections: dict[str, Checkpoint] = {}
        if self.recon is not None:
            sections[LATERAL_RECON] = network_checkpoint(self.recon, self.recon.stage, self.recon.seed)
        if self.multifocus is not None:
            sections[LATERAL_MULTIFOCUS] = network_checkpoint(
                self.multifocus, self.multifocus.stage, self.multifocus.seed
            )
        return sections


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


class ReconstructionNetwork(nn.Module):
    """Dense encoder followed by the decoder; maps a degraded image to a clean one."""

    kind = KIND_RECON

    def __init__(self, options: NetworkOptions | None = None) -> None:
        super().__init__()
        self.options = options or NetworkOptions()
        self.criterion: str | None = None
        self.stage = STAGE_UNTRAINED
        self.seed = 0
        self.encoder = DenseEncoder(self.options.conv_bias)
        self.decoder = DenseDecoder(self.options.conv_bias)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(img))


@dataclass
class FusionOutput:
    """Result of one fusion forward pass."""

    fused: torch.Tensor
    maps: FusionWeightMaps
    raw_maps: FusionWeightMaps
    preactivations: dict[str, torch.Tensor]


class FusionNetwork(nn.Module):
    """Siamese fusion layout used by the multi-focus subtask and the main task."""

    def __init__(
        self,
        kind: str = KIND_FUSION,
        criterion: str = CRITERION_NONLINEAR,
        options: NetworkOptions | None = None,
    ) -> None:
        super().__init__()
        if kind not in (KIND_MULTIFOCUS, KIND_FUSION):
            raise UsageError(f"{kind!r} does not use the fusion layout")
        self.kind = kind
        self.options = options or NetworkOptions()
        self.fusion_criterion = FusionCriterion(criterion, self.options.fixed_weight)
        self.criterion: str | None = self.fusion_criterion.kind
        self.stage = STAGE_UNTRAINED
        self.seed = 0
        bias = self.options.conv_bias
        specs = {spec.name: spec for spec in fusion_layer_specs(self.fusion_criterion.kind)}
        convs: dict[str, ConvLayer] = {}
        for name in ("C2", "C4", "C6", "C7", "C8", "C9", "C10", "C11"):
            convs[name] = ConvLayer(specs[name], bias)
        share = self.options.share_branch_weights
        convs["C3"] = convs["C2"] if share else ConvLayer(specs["C3"], bias)
        convs["C5"] = convs["C4"] if share else ConvLayer(specs["C5"], bias)
        self.convs = nn.ModuleDict(convs)
        self.msrb_a = MultiScaleResidualBlock(bias)
        self.msrb_b = self.msrb_a if share else MultiScaleResidualBlock(bias)
        self.cam_a = ChannelAttention(STREAM_CHANNELS, self.options.attention_ratio)
        self.cam_b = self.cam_a if share else ChannelAttention(
            STREAM_CHANNELS, self.options.attention_ratio
        )
        for head in ("C10", "C11"):
            self.convs[head].reset_parameters(bias_value=DEFAULT_HEAD_BIAS)

    def run(
        self,
        a: torch.Tensor,
        b: torch.Tensor,
        contributions: Mapping[str, Sequence[torch.Tensor]] | None = None,
        collect: bool = False,
    ) -> FusionOutput:
        """Full forward pass returning the fused image and its weight maps.

        ``contributions`` holds lateral terms per receiving layer name;
        with ``collect`` every layer's own-path pre-activation is kept.
        """
        if a.shape != b.shape:
            raise ShapeMismatchError(f"sources differ in size: {tuple(a.shape)} vs {tuple(b.shape)}")
        lateral = contributions or {}
        preactivations: dict[str, torch.Tensor] = {}

        def layer(name: str, x: torch.Tensor) -> torch.Tensor:
            conv = self.convs[name]
            preactivation = conv.preactivation(x)
            if collect:
                preactivations[name] = preactivation
            return lateral_sum(preactivation, lateral.get(name, ()), conv.spec.activation)

        shallow_a = layer("C4", layer("C2", a))
        shallow_b = layer("C5", layer("C3", b))
        deep_a = self.cam_a(self.msrb_a(shallow_a))
        deep_b = self.cam_b(self.msrb_b(shallow_b))
        if self.fusion_criterion.kind in (CRITERION_NONLINEAR, CRITERION_CONCAT, CRITERION_HYBRID):
            merged = merge_features(
                torch.cat([shallow_a, deep_a], dim=1),
                torch.cat([shallow_b, deep_b], dim=1),
                self.fusion_criterion,
            )
        else:
            merged = merge_features(deep_a, deep_b, self.fusion_criterion)
        h6 = layer("C6", merged)
        h7 = layer("C7", merged)
        h8 = layer("C8", h6)
        h9 = layer("C9", h7)
        late = torch.cat([h6, h7, h8, h9], dim=1)
        raw_maps = FusionWeightMaps((layer("C10", late), layer("C11", late)))
        maps = raw_maps
        if self.options.normalize_weights:
            maps = normalize_weight_maps(raw_maps, self.options.weight_eps)
            maps = fill_degenerate_pixels(maps, raw_maps.total(), self.options.degenerate_floor)
        fused = nonlinear_fuse([a, b], maps)
        return FusionOutput(fused, maps, raw_maps, preactivations)

    def forward(
        self,
        a: torch.Tensor,
        b: torch.Tensor,
        contributions: Mapping[str, Sequence[torch.Tensor]] | None = None,
    ) -> torch.Tensor:
        return self.run(a, b, contributions).fused


@dataclass
class FusionModel:
    """A fusion network together with the frozen lateral sources it reads."""

    network: FusionNetwork
    laterals: LateralConnections

    @property
    def stage(self) -> str:
        return self.network.stage

    def run(self, a: torch.Tensor, b: torch.Tensor) -> FusionOutput:
        contributions = self.laterals.contributions(a, b) if self.laterals else None
        return self.network.run(a, b, contributions)


def forward_fuse(
    model: FusionModel | FusionNetwork, a: torch.Tensor, b: torch.Tensor
) -> tuple[torch.Tensor, FusionWeightMaps]:
    """Fuse two sources with a trained network; returns (fused, weight maps)."""
    if isinstance(model, FusionNetwork):
        model = FusionModel(model, LateralConnections())
    if model.stage == STAGE_UNTRAINED:
        _LOGGER.warning("Fusing with an untrained %s network", model.network.kind)
    with torch.no_grad():
        output = model.run(a, b)
    return output.fused, output.maps


# ---------------------------------------------------------------------------
# Construction and checkpoints
# ---------------------------------------------------------------------------


def build_network(
    kind: str, criterion: str | None, options: NetworkOptions
) -> ReconstructionNetwork | FusionNetwork:
    if kind == KIND_RECON:
        return ReconstructionNetwork(options)
    if kind in (KIND_MULTIFOCUS, KIND_FUSION):
        if criterion is None:
            raise UsageError(f"{kind} requires a fusion criterion")
        return FusionNetwork(kind, criterion, options)
    raise UsageError(f"unknown network kind {kind!r}; expected one of {NETWORK_KINDS}")


def network_checkpoint(
    network: ReconstructionNetwork | FusionNetwork,
    stage: str,
    seed: int,
    laterals: LateralConnections | None = None,
    epoch: int = 0,
) -> Checkpoint:
    return Checkpoint(
        kind=network.kind,
        criterion=network.criterion,
        stage=stage,
        seed=seed,
        options=network.options.as_dict(),
        arrays=arrays_from_module(network),
        laterals=laterals.checkpoints() if laterals else {},
        epoch=epoch,
    )


def instantiate(
    kind: str,
    criterion: FusionCriterion | str | None = None,
    seed: int = 0,
    options: NetworkOptions | None = None,
) -> tuple[ReconstructionNetwork | FusionNetwork, Checkpoint]:
    """Build a freshly initialised network and its untrained checkpoint.

    Initialisation draws from a private generator state seeded with ``seed``
    so the global torch RNG is left untouched.
    """
    options = options or NetworkOptions()
    if isinstance(criterion, FusionCriterion):
        criterion_name: str | None = criterion.kind
        options = NetworkOptions(**{**options.as_dict(), "fixed_weight": criterion.fixed_weight})
    else:
        criterion_name = criterion
    if kind == KIND_RECON:
        criterion_name = None
    elif criterion_name is None:
        criterion_name = CRITERION_NONLINEAR
    else:
        try:
            criterion_name = normalize_criterion(criterion_name)
        except ValueError as err:
            raise UsageError(str(err)) from err
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        network = build_network(kind, criterion_name, options)
    audit_shapes(network, kind, criterion_name)
    network.seed = seed
    _LOGGER.debug("Instantiated %s (criterion %s, seed %d)", kind, criterion_name, seed)
    return network, network_checkpoint(network, STAGE_UNTRAINED, seed)


def network_from_checkpoint(ckpt: Checkpoint) -> ReconstructionNetwork | FusionNetwork:
    """Rebuild the network stored in ``ckpt`` (lateral sections are ignored)."""
    try:
        options = NetworkOptions.from_dict(ckpt.options)
        with torch.random.fork_rng(devices=[]):
            network = build_network(ckpt.kind, ckpt.criterion, options)
    except (UsageError, ValueError, TypeError) as err:
        raise CheckpointCorruptError(f"cannot rebuild {ckpt.kind} from checkpoint: {err}") from err
    expected = {name: tuple(t.shape) for name, t in network.state_dict().items()}
    if expected != ckpt.shape_table():
        raise CheckpointCorruptError(f"{ckpt.kind}: shape table does not match the network")
    load_arrays_into(network, ckpt.arrays)
    network.stage = ckpt.stage
    network.seed = ckpt.seed
    return network


def model_from_checkpoint(ckpt: Checkpoint) -> FusionModel:
    """Rebuild a fusion network plus its embedded frozen lateral sources."""
    network = network_from_checkpoint(ckpt)
    if not isinstance(network, FusionNetwork):
        raise UsageError(f"checkpoint holds a {ckpt.kind} network, not a fusion network")
    recon = None
    multifocus = None
    if LATERAL_RECON in ckpt.laterals:
        recon = network_from_checkpoint(ckpt.laterals[LATERAL_RECON])
    if LATERAL_MULTIFOCUS in ckpt.laterals:
        multifocus = network_from_checkpoint(ckpt.laterals[LATERAL_MULTIFOCUS])
    if recon is not None and not isinstance(recon, ReconstructionNetwork):
        raise CheckpointCorruptError("reconstruction lateral section holds another kind")
    if multifocus is not None and not isinstance(multifocus, FusionNetwork):
        raise CheckpointCorruptError("multi-focus lateral section holds another kind")
    return FusionModel(network, LateralConnections(recon, multifocus))


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike[str]) -> Path:
    return save_container(ckpt, path)


def load_checkpoint(
    path: str | os.PathLike[str],
    expected_criterion: str | None = None,
    expected_kind: str | None = None,
) -> Checkpoint:
    """Read a checkpoint and verify its shape table and criterion tag."""
    ckpt = load_container(path)
    if ckpt.kind not in NETWORK_KINDS:
        raise CheckpointCorruptError(f"{path}: unknown network kind {ckpt.kind!r}")
    if expected_kind is not None and ckpt.kind != expected_kind:
        raise CheckpointCorruptError(f"{path}: holds {ckpt.kind}, expected {expected_kind}")
    if expected_criterion is not None and ckpt.kind != KIND_RECON:
        wanted = normalize_criterion(expected_criterion)
        if ckpt.criterion != wanted:
            raise CriterionMismatchError(
                f"{path}: trained with criterion {ckpt.criterion!r}, config asks for "
                f"{wanted!r}; the main network must be retrained"
            )
    for section in (ckpt, *ckpt.laterals.values()):
        network_from_checkpoint(section)
    return ckpt
