"""Staged training: reconstruction subtask, multi-focus subtask, then the main task.

Subtask networks are trained first and frozen; the main fusion network then
trains against both of its sources while reading the frozen subtasks through
lateral connections.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import torch
from torch import nn
from torch.utils.data import (
    ConcatDataset,
    DataLoader,
    RandomSampler,
    Sampler,
    WeightedRandomSampler,
)

from .checkpoint import Checkpoint, checkpoint_name, purge_old_checkpoints
from .const import (
    CRITERION_NONLINEAR,
    DEFAULT_ADAM_BETAS,
    DEFAULT_ADAM_EPS,
    DEFAULT_CAP_DB,
    DEFAULT_KEEP_CHECKPOINTS,
    DEFAULT_SSIM_WINDOW,
    ENV_THREADS,
    KIND_MULTIFOCUS,
    KIND_RECON,
    OPTIMIZER_ADAM,
    OPTIMIZER_GD,
    STAGE_DEFAULTS,
    STAGE_KINDS,
    STAGE_MAIN,
    STAGE_PAIR_KINDS,
    STAGE_SUBTASK1,
    STAGE_SUBTASK2,
    STAGE_TASK_TAGS,
    STAGE_UNTRAINED,
    STAGES,
    TRAIN_LOG_FILE,
)
from .data_pipeline import (
    AugmentOptions,
    ImagePair,
    PatchDataset,
    derive_seed,
    extract_patches,
    load_manifest,
    load_pairs,
    worker_count,
)
from .exceptions import (
    ConfigError,
    FrozenWeightsError,
    ManifestError,
    MissingPrerequisiteError,
    NonFiniteGradientError,
)
from .losses import LossReport, LossWeights, combined_loss, fusion_task_loss
from .networks import (
    FusionModel,
    FusionNetwork,
    LateralConnections,
    NetworkOptions,
    ReconstructionNetwork,
    instantiate,
    load_checkpoint,
    network_checkpoint,
    network_from_checkpoint,
    save_checkpoint,
    unique_parameters,
)
from .nn_blocks import DenseEncoder
from .train_log import TrainLog

_LOGGER = logging.getLogger(__name__)

PRIOR_STAGES: dict[str, tuple[str, ...]] = {
    STAGE_SUBTASK1: (),
    STAGE_SUBTASK2: (),
    STAGE_MAIN: (STAGE_SUBTASK1, STAGE_SUBTASK2),
}
_KIND_STAGES = {KIND_RECON: STAGE_SUBTASK1, KIND_MULTIFOCUS: STAGE_SUBTASK2}



def required_priors(stage: str, options: NetworkOptions | None = None) -> tuple[str, ...]:
    """Subtask stages a stage reads; the main stage needs only those its laterals use."""
    if stage != STAGE_MAIN or options is None:
        return PRIOR_STAGES[stage]
    return tuple(
        prior
        for prior, enabled in (
            (STAGE_SUBTASK1, options.lateral_recon),
            (STAGE_SUBTASK2, options.lateral_multifocus),
        )
        if enabled
    )


@dataclass(frozen=True)
class DatasetSource:
    """A manifest and its sampling weight in the epoch mixture."""

    path: Path
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.weight <= 0:
            raise ConfigError(f"sampling weight of {self.path} must be positive")


@dataclass(frozen=True)
class StageConfig:
    """Hyperparameters and inputs of one training stage."""

    stage: str
    learning_rate: float
    batch_size: int
    epochs: int
    patch_width: int
    patch_height: int
    seed: int = 0
    sources: tuple[DatasetSource, ...] = ()
    loss_weights: LossWeights = field(default_factory=LossWeights)
    cap_db: float = DEFAULT_CAP_DB
    ssim_window: int = DEFAULT_SSIM_WINDOW
    criterion: str = CRITERION_NONLINEAR
    options: NetworkOptions = field(default_factory=NetworkOptions)
    optimizer: str = OPTIMIZER_ADAM
    betas: tuple[float, float] = DEFAULT_ADAM_BETAS
    adam_eps: float = DEFAULT_ADAM_EPS
    stride: int | None = None
    augment: AugmentOptions = field(default_factory=AugmentOptions)
    max_steps: int | None = None
    workers: int = 0
    out_dir: Path | None = None
    keep_checkpoints: int = DEFAULT_KEEP_CHECKPOINTS
    resume: Path | None = None

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.patch_width < 1 or self.patch_height < 1:
            raise ConfigError("patch size must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        if self.optimizer not in (OPTIMIZER_ADAM, OPTIMIZER_GD):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def with_defaults(cls, stage: str, **overrides: object) -> StageConfig:
        """Stage defaults (learning rate, batch, epochs, patch size) plus overrides."""
        if stage not in STAGE_DEFAULTS:
            raise ConfigError(f"unknown stage {stage!r}")
        values: dict[str, object] = dict(STAGE_DEFAULTS[stage])
        values.update(overrides)
        return cls(stage=stage, **values)  # type: ignore[arg-type]

    @property
    def kind(self) -> str:
        return STAGE_KINDS[self.stage]

    @property
    def stage_dir(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / self.stage


# ---------------------------------------------------------------------------
# Freezing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrozenCheckpoint:
    """Read-only view of a trained subtask checkpoint and its checksum."""

    checkpoint: Checkpoint
    checksum: str

    @property
    def kind(self) -> str:
        return self.checkpoint.kind

    @property
    def stage(self) -> str:
        return self.checkpoint.stage

    def verify(self, current: Checkpoint | None = None) -> None:
        """Raise if the arrays (or ``current``, rebuilt from a live network) changed."""
        observed = (current or self.checkpoint).checksum()
        if observed != self.checksum:
            raise FrozenWeightsError(
                f"frozen {self.kind} weights changed (checksum {observed} != {self.checksum})"
            )


def freeze(ckpt: Checkpoint | FrozenCheckpoint) -> FrozenCheckpoint:
    """Make a checkpoint's arrays read-only; freezing twice returns the same handle."""
    if isinstance(ckpt, FrozenCheckpoint):
        return ckpt
    for array in ckpt.arrays.values():
        array.setflags(write=False)
    return FrozenCheckpoint(ckpt, ckpt.checksum())


_ModuleT = TypeVar("_ModuleT", bound=nn.Module)


def freeze_network(network: _ModuleT) -> _ModuleT:
    network.requires_grad_(False)
    network.eval()
    return network


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


def apply_thread_cap() -> None:
    """Honour the thread cap environment variable for torch intra-op parallelism."""
    cap = os.environ.get(ENV_THREADS)
    if cap is None:
        return
    try:
        threads = int(cap)
    except ValueError:
        _LOGGER.warning("Ignoring non-integer %s=%r", ENV_THREADS, cap)
        return
    if threads >= 1:
        torch.set_num_threads(threads)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def build_optimizer(
    params: Iterable[nn.Parameter],
    optimizer: str = OPTIMIZER_ADAM,
    learning_rate: float = 1e-4,
    betas: tuple[float, float] = DEFAULT_ADAM_BETAS,
    eps: float = DEFAULT_ADAM_EPS,
) -> torch.optim.Optimizer:
    """Adam or plain gradient descent over trainable parameters only."""
    trainable = list(params)
    if not trainable:
        raise ConfigError("no parameters to train")
    if any(not param.requires_grad for param in trainable):
        raise FrozenWeightsError("frozen weights cannot be registered as trainable")
    if optimizer == OPTIMIZER_GD:
        return torch.optim.SGD(trainable, lr=learning_rate)
    if optimizer == OPTIMIZER_ADAM:
        return torch.optim.Adam(trainable, lr=learning_rate, betas=betas, eps=eps)
    raise ConfigError(f"unknown optimizer {optimizer!r}")


def gradient_step(
    optimizer: torch.optim.Optimizer,
    loss_fn: Callable[[], LossReport | torch.Tensor],
) -> LossReport | torch.Tensor:
    """Run one update; a non-finite loss or gradient aborts it before any weight changes."""
    optimizer.zero_grad(set_to_none=True)
    result = loss_fn()
    total = result.total if isinstance(result, LossReport) else result
    if not bool(torch.isfinite(total.detach()).all()):
        _LOGGER.warning("Aborting step: loss is %s", float(total.detach()))
        raise NonFiniteGradientError(f"loss is not finite ({float(total.detach())})")
    total.backward()
    for group in optimizer.param_groups:
        for param in group["params"]:
            if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
                optimizer.zero_grad(set_to_none=True)
                _LOGGER.warning("Aborting step: non-finite gradient")
                raise NonFiniteGradientError("gradient contains NaN or infinite values")
    optimizer.step()
    return result


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def epoch_generator(seed: int, epoch: int, stream: int = 0) -> torch.Generator:
    """A torch generator seeded from (seed, epoch, stream)."""
    return torch.Generator().manual_seed(derive_seed(seed, epoch, stream))


def mixture_sampler(
    sizes: Sequence[int], weights: Sequence[float], seed: int, epoch: int
) -> Sampler[int]:
    """Epoch order over the concatenated sources.

    One source is a plain permutation. Several sources are drawn with
    replacement, each patch with probability proportional to its source's
    weight divided by the source size; the draw count is the total size.
    """
    generator = epoch_generator(seed, epoch)
    if len(sizes) == 1:
        return RandomSampler(range(sizes[0]), generator=generator)
    per_sample = torch.cat(
        [
            torch.full((size,), weight / size, dtype=torch.float64)
            for size, weight in zip(sizes, weights)
        ]
    )
    return WeightedRandomSampler(
        per_sample, num_samples=sum(sizes), replacement=True, generator=generator
    )


def load_stage_patches(cfg: StageConfig) -> list[list[ImagePair]]:
    """Patches of every configured manifest, one list per source."""
    if not cfg.sources:
        raise ManifestError(f"stage {cfg.stage} has no dataset manifest")
    expected_kind = STAGE_PAIR_KINDS[cfg.stage]
    patches: list[list[ImagePair]] = []
    for source in cfg.sources:
        manifest = load_manifest(source.path)
        if manifest.pair_kind != expected_kind:
            raise ManifestError(
                f"{source.path}: stage {cfg.stage} needs {expected_kind} pairs, "
                f"manifest declares {manifest.pair_kind}"
            )
        if not len(manifest):
            raise ManifestError(f"{source.path}: manifest has no records")
        cut: list[ImagePair] = []
        for pair in load_pairs(manifest, cfg.workers):
            cut.extend(extract_patches(pair, cfg.patch_width, cfg.patch_height, cfg.stride))
        patches.append(cut)
        _LOGGER.info("Loaded %d patches from %s", len(cut), source.path)
    return patches


def _in_memory_patches(cfg: StageConfig, pairs: Sequence[ImagePair]) -> list[list[ImagePair]]:
    expected_kind = STAGE_PAIR_KINDS[cfg.stage]
    cut: list[ImagePair] = []
    for pair in pairs:
        if pair.pair_kind != expected_kind:
            raise ManifestError(f"stage {cfg.stage} needs {expected_kind} pairs, got {pair.pair_kind}")
        cut.extend(extract_patches(pair, cfg.patch_width, cfg.patch_height, cfg.stride))
    if not cut:
        raise ManifestError(f"stage {cfg.stage} received no pairs")
    return [cut]


def stage_dataset(
    cfg: StageConfig, patches: Sequence[Sequence[ImagePair]]
) -> ConcatDataset[dict[str, torch.Tensor]]:
    """One :class:`PatchDataset` per source, concatenated in source order."""
    with_gt = cfg.stage == STAGE_SUBTASK2
    return ConcatDataset(
        [
            PatchDataset(group, cfg.augment, derive_seed(cfg.seed, position), with_gt)
            for position, group in enumerate(patches)
        ]
    )


def epoch_loader(
    cfg: StageConfig, dataset: ConcatDataset[dict[str, torch.Tensor]], epoch: int
) -> DataLoader[dict[str, torch.Tensor]]:
    """Batches of one epoch; a pure function of (patches, seed, epoch)."""
    sizes = []
    for part in dataset.datasets:
        assert isinstance(part, PatchDataset)
        part.set_epoch(epoch)
        sizes.append(len(part))
    weights = [source.weight for source in cfg.sources] or [1.0] * len(sizes)
    return DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        sampler=mixture_sampler(sizes, weights, cfg.seed, epoch),
        num_workers=worker_count(cfg.workers),
        generator=epoch_generator(cfg.seed, epoch, 1),
    )


# ---------------------------------------------------------------------------
# Stage runners
# ---------------------------------------------------------------------------


def _priors_by_stage(
    stage: str,
    prior: Sequence[Checkpoint | FrozenCheckpoint],
    options: NetworkOptions | None = None,
) -> dict[str, FrozenCheckpoint]:
    needed_stages = required_priors(stage, options)
    frozen: dict[str, FrozenCheckpoint] = {}
    for item in prior:
        handle = freeze(item)
        source_stage = _KIND_STAGES.get(handle.kind)
        if source_stage is None:
            raise MissingPrerequisiteError(f"{handle.kind} checkpoints cannot serve as a prior")
        if handle.stage == STAGE_UNTRAINED:
            _LOGGER.warning("Prior %s checkpoint was never trained", source_stage)
        if stage == STAGE_MAIN and source_stage not in needed_stages:
            _LOGGER.info("Ignoring %s prior: its lateral connection is disabled", source_stage)
            continue
        frozen[source_stage] = handle
    for needed in needed_stages:
        if needed not in frozen:
            raise MissingPrerequisiteError(
                f"stage {stage} requires a trained {needed} checkpoint"
            )
    return frozen


@dataclass
class _StageModel:
    """Trainable network, its loss closure inputs and the frozen pieces it reads."""

    network: ReconstructionNetwork | FusionNetwork
    laterals: LateralConnections
    extractor: DenseEncoder | None
    watched: list[tuple[FrozenCheckpoint, ReconstructionNetwork | FusionNetwork]]
    start_epoch: int = 0

    def loss(self, cfg: StageConfig, batch: dict[str, torch.Tensor]) -> LossReport:
        a = batch["a"]
        b = batch["b"]
        lw = cfg.loss_weights
        tag = STAGE_TASK_TAGS[cfg.stage]
        if isinstance(self.network, ReconstructionNetwork):
            output = self.network(a)
            return combined_loss(
                output, b, lw, None, cap_db=cfg.cap_db, window=cfg.ssim_window, tag=tag
            )
        if cfg.stage == STAGE_SUBTASK2:
            truth = batch["gt"]
            fused = self.network.run(a, b).fused
            return combined_loss(
                fused, truth, lw, self.extractor, cap_db=cfg.cap_db, window=cfg.ssim_window, tag=tag
            )
        fused = FusionModel(self.network, self.laterals).run(a, b).fused
        return fusion_task_loss(
            fused, a, b, lw, self.extractor, cap_db=cfg.cap_db, window=cfg.ssim_window
        )


def _frozen_network(handle: FrozenCheckpoint) -> ReconstructionNetwork | FusionNetwork:
    return freeze_network(network_from_checkpoint(handle.checkpoint))


def _build_stage_model(
    cfg: StageConfig, frozen: dict[str, FrozenCheckpoint]
) -> _StageModel:
    start_epoch = 0
    network: ReconstructionNetwork | FusionNetwork
    if cfg.resume is not None:
        resumed = load_checkpoint(cfg.resume, cfg.criterion, cfg.kind)
        network = network_from_checkpoint(resumed)
        start_epoch = resumed.epoch
        _LOGGER.info("Resuming %s from %s (epoch %d)", cfg.stage, cfg.resume, resumed.epoch)
    else:
        network, _ = instantiate(cfg.kind, cfg.criterion, cfg.seed, cfg.options)
    watched: list[tuple[FrozenCheckpoint, ReconstructionNetwork | FusionNetwork]] = []
    recon = None
    multifocus = None
    if STAGE_SUBTASK1 in frozen:
        recon = _frozen_network(frozen[STAGE_SUBTASK1])
        watched.append((frozen[STAGE_SUBTASK1], recon))
    if STAGE_SUBTASK2 in frozen and cfg.stage == STAGE_MAIN:
        multifocus = _frozen_network(frozen[STAGE_SUBTASK2])
        watched.append((frozen[STAGE_SUBTASK2], multifocus))
    extractor = recon.encoder if isinstance(recon, ReconstructionNetwork) else None
    laterals = LateralConnections()
    if cfg.stage == STAGE_MAIN:
        options = network.options
        laterals = LateralConnections(
            recon if options.lateral_recon and isinstance(recon, ReconstructionNetwork) else None,
            multifocus
            if options.lateral_multifocus and isinstance(multifocus, FusionNetwork)
            else None,
        )
    return _StageModel(network, laterals, extractor, watched, start_epoch)


def _resumed_log(cfg: StageConfig, start_epoch: int) -> TrainLog:
    """The stage's earlier log up to ``start_epoch``, or an empty one."""
    previous = None if cfg.stage_dir is None else cfg.stage_dir / TRAIN_LOG_FILE
    if start_epoch == 0 or previous is None or not previous.is_file():
        return TrainLog(cfg.stage)
    log = TrainLog.read_csv(previous)
    if log.stage != cfg.stage:
        return TrainLog(cfg.stage)
    log.entries = [entry for entry in log.entries if entry.epoch <= start_epoch]
    _LOGGER.info("Continuing %s log from %s (%d entries)", cfg.stage, previous, len(log))
    return log


def _save(
    cfg: StageConfig, model: _StageModel, epoch: int, final: bool
) -> tuple[Checkpoint, Path | None]:
    ckpt = network_checkpoint(
        model.network, cfg.stage, cfg.seed, model.laterals if model.laterals else None, epoch
    )
    stage_dir = cfg.stage_dir
    if stage_dir is None:
        return ckpt, None
    path = save_checkpoint(ckpt, stage_dir / checkpoint_name(cfg.stage, None if final else epoch))
    if not final:
        purge_old_checkpoints(stage_dir, cfg.stage, cfg.keep_checkpoints)
    return ckpt, path


def train_stage(
    cfg: StageConfig,
    prior: Sequence[Checkpoint | FrozenCheckpoint] = (),
    pairs: Sequence[ImagePair] | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Train one stage and return its final checkpoint and loss log.

    ``pairs`` replaces the configured manifests with in-memory pairs. Frozen
    priors are verified unchanged after the run.
    """
    started = time.monotonic()
    frozen = _priors_by_stage(cfg.stage, prior, cfg.options)
    apply_thread_cap()
    seed_everything(cfg.seed)
    patches = _in_memory_patches(cfg, pairs) if pairs is not None else load_stage_patches(cfg)
    dataset = stage_dataset(cfg, patches)
    model = _build_stage_model(cfg, frozen)
    model.network.train()
    optimizer = build_optimizer(
        unique_parameters(model.network), cfg.optimizer, cfg.learning_rate, cfg.betas, cfg.adam_eps
    )
    start_epoch = model.start_epoch
    log = _resumed_log(cfg, start_epoch)
    _LOGGER.info(
        "Training %s: %d epochs, batch %d, lr %g, %d patches",
        cfg.stage,
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate,
        sum(len(group) for group in patches),
    )
    step = log.entries[-1].step if log.entries else 0
    completed = start_epoch
    for epoch in range(start_epoch, cfg.epochs):
        batches = epoch_loader(cfg, dataset, epoch)
        if step == 0 and epoch > 0:
            step = epoch * len(batches)
        for batch in batches:
            if cfg.max_steps is not None and len(log) >= cfg.max_steps:
                break
            step += 1
            report = gradient_step(optimizer, lambda batch=batch: model.loss(cfg, batch))
            assert isinstance(report, LossReport)
            log.record(step, epoch + 1, report)
        completed = epoch + 1
        epoch_totals = [entry.total for entry in log.entries if entry.epoch == completed]
        if epoch_totals:
            _LOGGER.info(
                "%s epoch %d/%d: mean loss %.6g",
                cfg.stage,
                completed,
                cfg.epochs,
                sum(epoch_totals) / len(epoch_totals),
            )
        _save(cfg, model, completed, final=False)
        if cfg.max_steps is not None and len(log) >= cfg.max_steps:
            break
    model.network.stage = cfg.stage
    ckpt, path = _save(cfg, model, completed, final=True)
    for handle, network in model.watched:
        handle.verify()
        handle.verify(network_checkpoint(network, handle.stage, handle.checkpoint.seed))
    log.wall_clock_seconds = time.monotonic() - started
    log.checkpoint_path = path
    if cfg.stage_dir is not None:
        log.write_csv(cfg.stage_dir / TRAIN_LOG_FILE)
    _LOGGER.info(
        "Finished %s after %d steps in %.1fs", cfg.stage, len(log), log.wall_clock_seconds
    )
    return ckpt, log
