"""Per-step loss log of a training stage."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .const import STAGES
from .exceptions import DataError
from .losses import TERMS, LossReport

_LOGGER = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS: tuple[str, ...] = ("step", "stage", "epoch", *TERMS, "total")


@dataclass(frozen=True)
class TrainLogEntry:
    step: int
    stage: str
    epoch: int
    terms: dict[str, float]
    total: float

    def row(self) -> list[str]:
        return [
            str(self.step),
            self.stage,
            str(self.epoch),
            *(repr(self.terms[name]) for name in TERMS),
            repr(self.total),
        ]


@dataclass
class TrainLog:
    """Loss reports of one stage, in step order.

    Wall-clock time and the final checkpoint path are kept on the object but
    not written to the CSV, so equal-seed runs give identical files.
    """

    stage: str
    entries: list[TrainLogEntry] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    checkpoint_path: Path | None = None

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, step: int, epoch: int, report: LossReport) -> TrainLogEntry:
        if self.entries and step <= self.entries[-1].step:
            raise ValueError(f"step {step} does not follow step {self.entries[-1].step}")
        values = report.values()
        entry = TrainLogEntry(
            step=step,
            stage=self.stage,
            epoch=epoch,
            terms={name: values[name] for name in TERMS},
            total=values["total"],
        )
        self.entries.append(entry)
        _LOGGER.debug("%s step %d: total %.6g", self.stage, step, entry.total)
        return entry

    @property
    def totals(self) -> list[float]:
        return [entry.total for entry in self.entries]

    def write_csv(self, path: str | os.PathLike[str]) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(TRAIN_LOG_COLUMNS)
            for entry in self.entries:
                writer.writerow(entry.row())
        return target

    @classmethod
    def read_csv(cls, path: str | os.PathLike[str]) -> TrainLog:
        """Load a log written by :meth:`write_csv` (resumed runs continue it)."""
        source = Path(path)
        try:
            with source.open(newline="", encoding="utf-8") as handle:
                rows = list(csv.DictReader(handle))
        except OSError as err:
            raise DataError(f"cannot read train log {source}: {err}") from err
        if not rows:
            raise DataError(f"train log {source} has no entries")
        log = cls(rows[0]["stage"])
        try:
            for row in rows:
                log.entries.append(
                    TrainLogEntry(
                        step=int(row["step"]),
                        stage=row["stage"],
                        epoch=int(row["epoch"]),
                        terms={name: float(row[name]) for name in TERMS},
                        total=float(row["total"]),
                    )
                )
        except (KeyError, ValueError) as err:
            raise DataError(f"malformed train log {source}: {err}") from err
        return log
