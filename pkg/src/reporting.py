"""
Result Tables and Output Writers

Sweep, bench, estimate and verify results are turned into ResultTables and
rendered as csv, json or markdown. Files are written atomically: a partially
written result never replaces (or appears as) an output file.
"""

import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from analysis import SweepResult
from bench import BenchResult, CatalogEntry
from error_handling import ConfigurationError, OutputError

logger = logging.getLogger("linprobit.reporting")

FORMATS = ("csv", "json", "markdown")

SWEEP_COLUMNS = [
    "m",
    "n",
    "snr_db",
    "estimator",
    "mse_emp_mean",
    "mse_emp_stderr",
    "mse_closed_form",
    "trials",
    "failures",
]
BENCH_COLUMNS = [
    "dataset",
    "estimator",
    "acc_mean",
    "acc_std",
    "auc_mean",
    "auc_std",
    "sigma_x_sq_mode",
]
BENCH_DIGITS = 3


@dataclass
class ResultTable:
    """Ordered columns and rows; `digits` fixes the csv/markdown float precision."""

    name: str
    columns: List[str]
    rows: List[Dict[str, Any]]
    digits: Optional[int] = None

    def format_value(self, value: Any) -> str:
        if value is None:
            return ""
        if isinstance(value, bool):
            return str(value).lower()
        if isinstance(value, float):
            if not math.isfinite(value):
                raise OutputError(f"non-finite value in table '{self.name}'")
            return f"{value:.{self.digits}f}" if self.digits is not None else repr(value)
        return str(value)


def sweep_table(results: Sequence[SweepResult], timing: bool = False) -> ResultTable:
    """One row per (m, n, snr, estimator); absent values stay None."""
    columns = SWEEP_COLUMNS + (["elapsed_s"] if timing else [])
    rows = []
    for r in results:
        row = {
            "m": r.m,
            "n": r.n,
            "snr_db": float(r.snr_db),
            "estimator": r.estimator_id.value,
            "mse_emp_mean": r.mse_empirical_mean,
            "mse_emp_stderr": r.mse_empirical_stderr,
            "mse_closed_form": r.mse_closed_form,
            "trials": r.trials,
            "failures": r.failures,
        }
        if timing:
            row["elapsed_s"] = r.elapsed_s
        rows.append(row)
    return ResultTable(name="sweep", columns=columns, rows=rows)


def _rounded(value: Optional[float], digits: int) -> Optional[float]:
    return None if value is None else round(float(value), digits)


def bench_table(
    results: Sequence[BenchResult],
    catalog: Optional[Dict[str, CatalogEntry]] = None,
    digits: int = BENCH_DIGITS,
) -> ResultTable:
    """
    One row per (dataset, estimator), rounded to `digits` decimals.

    With a catalog, reference ACC/AUC means and the deviation from them are
    appended for datasets that have reference values.
    """
    columns = list(BENCH_COLUMNS)
    if catalog:
        columns += ["acc_ref", "acc_delta", "auc_ref", "auc_delta"]
    rows = []
    for r in results:
        row = {
            "dataset": r.dataset,
            "estimator": r.estimator_id.value,
            "acc_mean": _rounded(r.acc_mean, digits),
            "acc_std": _rounded(r.acc_std, digits),
            "auc_mean": _rounded(r.auc_mean, digits),
            "auc_std": _rounded(r.auc_std, digits),
            "sigma_x_sq_mode": _rounded(r.sigma_x_sq_mode, digits),
        }
        if catalog:
            entry = catalog.get(r.dataset)
            for metric in ("acc", "auc"):
                reference = entry.reference_for(r.estimator_id, metric) if entry else None
                ours = row[f"{metric}_mean"]
                row[f"{metric}_ref"] = _rounded(reference, digits)
                row[f"{metric}_delta"] = (
                    _rounded(ours - reference, digits)
                    if ours is not None and reference is not None
                    else None
                )
        rows.append(row)
    return ResultTable(name="bench", columns=columns, rows=rows, digits=digits)


def render_csv(table: ResultTable) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([table.format_value(row.get(c)) for c in table.columns])
    return buffer.getvalue()


def render_json(table: ResultTable) -> str:
    rows = [{c: row.get(c) for c in table.columns} for row in table.rows]
    for row in rows:
        for value in row.values():
            if isinstance(value, float) and not math.isfinite(value):
                raise OutputError(f"non-finite value in table '{table.name}'")
    return json.dumps({table.name: rows}, indent=2) + "\n"


def generate_markdown_table(table: ResultTable, title: Optional[str] = None) -> str:
    """
    Generate a markdown table from a ResultTable.

    Args:
        table: The rows to render
        title: Optional heading placed above the table

    Returns:
        Markdown formatted table
    """
    markdown = []
    if title:
        markdown.append(f"### {title}")
        markdown.append("")
    markdown.append("| " + " | ".join(table.columns) + " |")
    markdown.append("| " + " | ".join(["---"] * len(table.columns)) + " |")
    for row in table.rows:
        cells = [table.format_value(row.get(c)) or "-" for c in table.columns]
        markdown.append("| " + " | ".join(cells) + " |")
    markdown.append("")
    return "\n".join(markdown)


def render(table: ResultTable, fmt: str) -> str:
    if fmt == "csv":
        return render_csv(table)
    if fmt == "json":
        return render_json(table)
    if fmt == "markdown":
        return generate_markdown_table(table)
    raise ConfigurationError(
        f"Unknown output format: {fmt} (expected one of {', '.join(FORMATS)})",
        details={"format": fmt},
    )


def write_text(text: str, output: Optional[Union[str, Path]]) -> Optional[Path]:
    """
    Write `text` to `output` atomically, or to stdout when output is None or "-".

    Returns:
        The path written, or None for stdout

    Raises:
        OutputError: the file could not be written; no partial file is left
    """
    if output is None or str(output) == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
        return None

    path = Path(output)
    temp_name = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(
            "w", encoding="utf-8", newline="", dir=path.parent, prefix=f".{path.name}.",
            delete=False,
        ) as handle:
            temp_name = handle.name
            handle.write(text)
        os.replace(temp_name, path)
    except OSError as e:
        if temp_name and os.path.exists(temp_name):
            os.remove(temp_name)
        raise OutputError(
            f"Failed to write results to {path}: {e}", details={"path": str(path)}
        )
    logger.info(f"Results written to {path}")
    return path


def write_results(
    table: ResultTable, output: Optional[Union[str, Path]], fmt: str = "csv"
) -> Optional[Path]:
    """Render `table` in `fmt` and write it to `output`."""
    return write_text(render(table, fmt), output)


def write_json_document(document: Dict[str, Any], output: Optional[Union[str, Path]]) -> None:
    """Write an arbitrary JSON document (used by `estimate`)."""
    try:
        text = json.dumps(document, indent=2, allow_nan=False)
    except ValueError as e:
        raise OutputError(f"Result document is not serializable: {e}")
    write_text(text + "\n", output)
