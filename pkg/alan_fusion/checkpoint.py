"""Checkpoint container and on-disk retention.

File layout::

    ALANCKPT\\n
    {header JSON, sorted keys, one line}\\n
    <payload: little-endian float32 arrays back to back>

The header records the format version, network kind, fusion criterion,
training stage, seed, completed epochs, network options, a tensor table (name, shape, element
offset into the payload), embedded lateral-source sections with their own
tables, and the SHA-256 of the payload. Nothing time-dependent is stored, so
identical weights always serialise to identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .const import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC, CHECKPOINT_SUFFIX
from .exceptions import CheckpointCorruptError, CheckpointVersionError

_LOGGER = logging.getLogger(__name__)

_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    """Named float32 weight arrays plus the metadata needed to rebuild a network."""

    kind: str
    criterion: str | None
    stage: str
    seed: int
    options: dict[str, Any]
    arrays: dict[str, np.ndarray]
    laterals: dict[str, Checkpoint] = field(default_factory=dict)
    epoch: int = 0
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def shape_table(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(array.shape) for name, array in sorted(self.arrays.items())}

    def checksum(self) -> str:
        """SHA-256 over this checkpoint's own arrays (names and bytes, sorted)."""
        digest = hashlib.sha256()
        for name, array in sorted(self.arrays.items()):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(array, dtype=_DTYPE).tobytes())
        return digest.hexdigest()


def arrays_from_module(module: nn.Module) -> dict[str, np.ndarray]:
    """Copy a module's state dict as float32 arrays."""
    return {
        name: tensor.detach().cpu().to(torch.float32).numpy().astype(_DTYPE, copy=True)
        for name, tensor in module.state_dict().items()
    }


def load_arrays_into(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    """Copy arrays into a module's parameters, keeping the module's dtype."""
    reference = module.state_dict()
    state = {
        name: torch.from_numpy(np.array(array, dtype=np.float32)).to(reference[name].dtype)
        for name, array in arrays.items()
        if name in reference
    }
    module.load_state_dict(state, strict=True)


def _section(ckpt: Checkpoint, offset: int) -> tuple[dict[str, Any], list[bytes], int]:
    tensors = []
    chunks: list[bytes] = []
    for name, array in sorted(ckpt.arrays.items()):
        data = np.ascontiguousarray(array, dtype=_DTYPE)
        tensors.append([name, list(data.shape), offset])
        chunks.append(data.tobytes())
        offset += int(data.size)
    header = {
        "kind": ckpt.kind,
        "criterion": ckpt.criterion,
        "stage": ckpt.stage,
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "options": ckpt.options,
        "tensors": tensors,
    }
    return header, chunks, offset


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header, chunks, offset = _section(ckpt, 0)
    lateral_headers = {}
    for name, lateral in sorted(ckpt.laterals.items()):
        if lateral.laterals:
            raise ValueError("lateral sources cannot carry laterals of their own")
        lateral_header, lateral_chunks, offset = _section(lateral, offset)
        lateral_headers[name] = lateral_header
        chunks.extend(lateral_chunks)
    payload = b"".join(chunks)
    header["laterals"] = lateral_headers
    header["format_version"] = ckpt.format_version
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    header_line = json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n"
    return CHECKPOINT_MAGIC + header_line.encode("utf-8") + payload


def save_container(ckpt: Checkpoint, path: str | os.PathLike[str]) -> Path:
    """Write a checkpoint atomically (temp file then rename)."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    temp = target.with_suffix(target.suffix + ".tmp")
    temp.write_bytes(encode_checkpoint(ckpt))
    temp.replace(target)
    _LOGGER.info("Wrote checkpoint %s (%s, stage %s)", target, ckpt.kind, ckpt.stage)
    return target


def _arrays_from(section: dict[str, Any], payload: np.ndarray) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, shape, offset in section["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        if offset < 0 or offset + count > payload.size:
            raise CheckpointCorruptError(f"tensor {name} lies outside the payload")
        arrays[name] = payload[offset : offset + count].reshape(shape).copy()
    return arrays


def _from_section(section: dict[str, Any], payload: np.ndarray, version: int) -> Checkpoint:
    try:
        return Checkpoint(
            kind=section["kind"],
            criterion=section["criterion"],
            stage=section["stage"],
            seed=int(section["seed"]),
            epoch=int(section.get("epoch", 0)),
            options=dict(section["options"]),
            arrays=_arrays_from(section, payload),
            format_version=version,
        )
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointCorruptError(f"malformed checkpoint section: {err}") from err


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    body = blob[len(CHECKPOINT_MAGIC) :]
    newline = body.find(b"\n")
    if newline < 0:
        raise CheckpointCorruptError("checkpoint header is truncated")
    try:
        header = json.loads(body[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointCorruptError(f"unreadable checkpoint header: {err}") from err
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version!r} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    raw_payload = body[newline + 1 :]
    if hashlib.sha256(raw_payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointCorruptError("checkpoint payload is truncated or damaged")
    if len(raw_payload) % _DTYPE.itemsize:
        raise CheckpointCorruptError("checkpoint payload is not float32-aligned")
    payload = np.frombuffer(raw_payload, dtype=_DTYPE)
    ckpt = _from_section(header, payload, version)
    for name, section in sorted(header.get("laterals", {}).items()):
        ckpt.laterals[name] = _from_section(section, payload, version)
    return ckpt


def load_container(path: str | os.PathLike[str]) -> Checkpoint:
    source = Path(path)
    try:
        blob = source.read_bytes()
    except OSError as err:
        raise CheckpointCorruptError(f"cannot read checkpoint {source}: {err}") from err
    return decode_checkpoint(blob)


def checkpoint_name(stage: str, epoch: int | None = None) -> str:
    """``{stage}.alan`` for the final checkpoint, ``{stage}_epoch{NNN}.alan`` per epoch."""
    if epoch is None:
        return f"{stage}{CHECKPOINT_SUFFIX}"
    return f"{stage}_epoch{epoch:03d}{CHECKPOINT_SUFFIX}"


def purge_old_checkpoints(directory: str | os.PathLike[str], stage: str, keep: int) -> int:
    """Keep only the newest ``keep`` epoch checkpoints of ``stage``.

    Epoch checkpoints are ordered by their epoch number; the final
    ``{stage}.alan`` is never removed.

    Returns:
        Number of files deleted.
    """
    folder = Path(directory)
    if keep <= 0 or not folder.is_dir():
        return 0
    prefix = f"{stage}_epoch"
    numbered: list[tuple[int, Path]] = []
    for path in folder.iterdir():
        if not path.is_file() or path.suffix != CHECKPOINT_SUFFIX:
            continue
        digits = path.stem[len(prefix) :] if path.stem.startswith(prefix) else ""
        if digits.isdigit():
            numbered.append((int(digits), path))
    epoch_files = [path for _, path in sorted(numbered)]
    deleted = 0
    for path in epoch_files[: max(0, len(epoch_files) - keep)]:
        try:
            path.unlink()
            deleted += 1
            _LOGGER.debug("Purged old checkpoint %s", path)
        except OSError as err:
            _LOGGER.debug("Could not remove %s: %s", path, err)
    if deleted:
        _LOGGER.info("Purged %d checkpoint(s) from %s", deleted, folder)
    return deleted
