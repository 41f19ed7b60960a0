"""Report emission: structured JSON, flat CSV and a text table."""
from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path
from typing import Iterable, List, Tuple, Union

from pydantic import ValidationError

from ..errors import ConfigError, FormatError
from .schemas import EvalReport

_LOGGER = logging.getLogger(__name__)

REPORT_FILE = "report.json"
CSV_FILE = "report.csv"
CSV_HEADER = ("arm", "norm", "eps", "metric", "value")

Row = Tuple[str, str, str, str, str]


def csv_rows(report: EvalReport) -> List[Row]:
    """One row per measured fraction; timing never enters the CSV."""

    rows: List[Row] = []
    for result in report.arms:
        for metric, value in result.metrics():
            rows.append((result.label, result.norm, f"{result.epsilon:.6f}", metric, f"{value:.6f}"))
    return rows


def render_csv(report: EvalReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(csv_rows(report))
    return buffer.getvalue()


def render_table(report: EvalReport) -> str:
    rows: Iterable[Row] = csv_rows(report)
    table = [CSV_HEADER, *rows]
    widths = [max(len(row[column]) for row in table) for column in range(len(CSV_HEADER))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "  ".join("-" * width for width in widths))
    footer = [f"manifest {report.manifest_hash}", report.note]
    if report.partial:
        footer.insert(0, f"PARTIAL: stage '{report.failed_stage}' failed: {report.error}")
    return "\n".join(lines + [""] + footer) + "\n"


def write_report(report: EvalReport, target: Union[str, Path]) -> Tuple[Path, Path]:
    """Write JSON and CSV into directory ``target``, or beside ``target`` when it ends in ``.json``."""

    target = Path(target)
    if target.suffix == ".json":
        json_path, csv_path = target, target.with_suffix(".csv")
    else:
        json_path, csv_path = target / REPORT_FILE, target / CSV_FILE
    json_path.parent.mkdir(parents=True, exist_ok=True)
    with json_path.open("w", encoding="utf-8") as handle:
        json.dump(report.model_dump(mode="json"), handle, indent=2)
        handle.write("\n")
    csv_path.write_text(render_csv(report), encoding="utf-8")
    _LOGGER.info("Report written to %s and %s%s", json_path, csv_path, " (partial)" if report.partial else "")
    return json_path, csv_path


def load_report(path: Union[str, Path]) -> EvalReport:
    source = Path(path)
    if source.is_dir():
        source = source / REPORT_FILE
    try:
        with source.open("r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except OSError as exc:
        raise FormatError(f"Cannot read report {source}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"Report {source} is not valid JSON: {exc}") from exc
    try:
        return EvalReport.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(f"Report {source} is invalid: {exc}") from exc


__all__ = [
    "CSV_FILE",
    "CSV_HEADER",
    "REPORT_FILE",
    "csv_rows",
    "load_report",
    "render_csv",
    "render_table",
    "write_report",
]
