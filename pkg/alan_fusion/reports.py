"""Evaluation over a set of pairs and the CSV / PNG artefacts it produces."""
from __future__ import annotations

import csv
import logging
import os
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from matplotlib.figure import Figure

from .const import DEFAULT_SSIM_WINDOW, METRIC_COLUMNS, RESERVED_METRIC_COLUMNS
from .data_pipeline import Image, ImagePair
from .exceptions import DataError
from .metrics import MetricReport, MetricRow, MosRecord, evaluate_pair
from .networks import FusionModel, forward_fuse

_LOGGER = logging.getLogger(__name__)

REPORT_ID_COLUMNS: tuple[str, ...] = ("pair", "method", "dataset")
SUMMARY_ID_COLUMNS: tuple[str, ...] = ("method", "dataset", "pairs")


def _cell(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def summary_path(report_path: str | os.PathLike[str]) -> Path:
    """``report.csv`` -> ``report.summary.csv``."""
    return Path(report_path).with_suffix(".summary.csv")


def evaluate_model(
    model: FusionModel,
    pairs: Sequence[ImagePair],
    method: str,
    dataset: str,
    labels: Sequence[str] | None = None,
    ssim_window: int = DEFAULT_SSIM_WINDOW,
) -> tuple[MetricReport, list[Image]]:
    """Fuse every pair with ``model`` and score the clipped results."""
    report = MetricReport(method, dataset)
    fused_images: list[Image] = []
    for index, pair in enumerate(pairs):
        fused, _ = forward_fuse(
            model, pair.a.to_tensor(torch.float32), pair.b.to_tensor(torch.float32)
        )
        image = Image.from_tensor(fused)
        fused_images.append(image)
        label = labels[index] if labels is not None else str(index + 1)
        report.add(evaluate_pair(image, pair.a, pair.b, ssim_window), label)
        _LOGGER.debug("Scored pair %s", label)
    return report, fused_images


def write_report_csv(report: MetricReport, path: str | os.PathLike[str]) -> Path:
    """One header line and one line per scored pair."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([*REPORT_ID_COLUMNS, *METRIC_COLUMNS])
        for label, row in zip(report.labels, report.rows):
            writer.writerow(
                [label, report.method, report.dataset, *(_cell(row[n]) for n in METRIC_COLUMNS)]
            )
    return target


def read_report_csv(path: str | os.PathLike[str]) -> MetricReport:
    source = Path(path)
    try:
        with source.open(newline="", encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
    except OSError as err:
        raise DataError(f"cannot read report {source}: {err}") from err
    if not rows:
        raise DataError(f"report {source} has no rows")
    report = MetricReport(rows[0]["method"], rows[0]["dataset"])
    try:
        for row in rows:
            values: MetricRow = {
                name: float(row[name]) if row.get(name) else None for name in METRIC_COLUMNS
            }
            report.add(values, row["pair"])
    except (KeyError, ValueError) as err:
        raise DataError(f"malformed report {source}: {err}") from err
    return report


def write_summary_csv(reports: Sequence[MetricReport], path: str | os.PathLike[str]) -> Path:
    """Column means, one line per (method, dataset) report."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([*SUMMARY_ID_COLUMNS, *METRIC_COLUMNS])
        for report in reports:
            means = report.means()
            writer.writerow(
                [
                    report.method,
                    report.dataset,
                    len(report),
                    *(_cell(means[n]) for n in METRIC_COLUMNS),
                ]
            )
    return target


def merge_external_metrics(report: MetricReport, path: str | os.PathLike[str]) -> list[str]:
    """Fill empty reserved columns from an external CSV keyed by ``pair``.

    Values already present in the report are never overwritten.

    Returns:
        ``"<pair>:<column>"`` for every value copied.
    """
    source = Path(path)
    try:
        with source.open(newline="", encoding="utf-8") as handle:
            external = {row["pair"]: row for row in csv.DictReader(handle)}
    except (OSError, KeyError) as err:
        raise DataError(f"cannot read external metrics {source}: {err}") from err
    copied: list[str] = []
    for label, row in zip(report.labels, report.rows):
        fallback = external.get(label)
        if fallback is None:
            continue
        for name in RESERVED_METRIC_COLUMNS:
            value = fallback.get(name)
            if not value or row.get(name) is not None:
                continue
            try:
                row[name] = float(value)
            except ValueError as err:
                raise DataError(f"{source}: {name} of pair {label} is not a number") from err
            copied.append(f"{label}:{name}")
    if copied:
        _LOGGER.info("Merged %d external metric value(s) from %s", len(copied), source)
    return copied


def plotted_columns(reports: Sequence[MetricReport]) -> list[str]:
    """Metric columns holding at least one value in any report."""
    return [name for name in METRIC_COLUMNS if any(report.column(name) for report in reports)]


def write_plots(reports: Sequence[MetricReport], out_dir: str | os.PathLike[str]) -> list[Path]:
    """One bar chart per metric: datasets on the x axis, one bar per method."""
    folder = Path(out_dir)
    folder.mkdir(parents=True, exist_ok=True)
    datasets = sorted({report.dataset for report in reports})
    methods = sorted({report.method for report in reports})
    width = 0.8 / max(1, len(methods))
    written: list[Path] = []
    for name in plotted_columns(reports):
        fig = Figure(figsize=(6.4, 4.0), dpi=100)
        ax = fig.subplots()
        positions = np.arange(len(datasets))
        for offset, method in enumerate(methods):
            heights = []
            for dataset in datasets:
                mean = next(
                    (
                        r.means()[name]
                        for r in reports
                        if r.method == method and r.dataset == dataset
                    ),
                    None,
                )
                heights.append(np.nan if mean is None else mean)
            ax.bar(positions + offset * width, heights, width, label=method)
        ax.set_xticks(positions + width * (len(methods) - 1) / 2.0)
        ax.set_xticklabels(datasets)
        ax.set_ylabel(name.upper())
        ax.legend(fontsize="small")
        fig.tight_layout()
        path = folder / f"{name}.png"
        fig.savefig(path, metadata={"Software": None})
        written.append(path)
    _LOGGER.info("Wrote %d plot(s) to %s", len(written), folder)
    return written


def read_mos_csv(path: str | os.PathLike[str]) -> list[MosRecord]:
    """Rater scores, one ``method,dataset,score,score,...`` line per record.

    A first line starting with ``method`` is treated as a header.
    """
    source = Path(path)
    try:
        with source.open(newline="", encoding="utf-8") as handle:
            rows = [row for row in csv.reader(handle) if row and any(cell.strip() for cell in row)]
    except OSError as err:
        raise DataError(f"cannot read scores {source}: {err}") from err
    if rows and rows[0][0].strip().lower() == "method":
        rows = rows[1:]
    records: list[MosRecord] = []
    for line_no, row in enumerate(rows, 1):
        if len(row) < 3:
            raise DataError(f"{source}: record {line_no} has no scores")
        try:
            scores = tuple(float(cell) for cell in row[2:] if cell.strip())
            records.append(MosRecord(scores, row[0].strip(), row[1].strip()))
        except ValueError as err:
            raise DataError(f"{source}: record {line_no}: {err}") from err
    return records
