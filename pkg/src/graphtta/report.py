"""Report files for adaptation runs.

A run writes ``<stem>.csv`` (one row per batch) and ``<stem>.json`` (summary,
config echo, seed and wall-times). The CSV leaves out wall-clock columns so
that repeating a run with the same seed reproduces it byte for byte; the
per-batch latencies live in the JSON file.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, fields
from pathlib import Path

from .engine import AdaptationReport, BatchRecord

CSV_FIELDS = [f.name for f in fields(BatchRecord) if f.name != "seconds"]
SUMMARY_KEYS = ("mae", "mre", "mape", "n_entries", "n_batches", "n_errors", "mean_abs_delta", "mean_batch_seconds")


class ReportError(ValueError):
    pass


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(report: AdaptationReport, stem, echo: dict) -> tuple[Path, Path]:
    """Write the CSV/JSON pair for ``report`` and return their paths."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = _pair(stem)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for rec in report.records:
            row = asdict(rec)
            w.writerow([_cell(row[k]) for k in CSV_FIELDS])
    doc = {
        "summary": report.summary,
        "config": echo,
        "seed": echo.get("seed"),
        "batch_seconds": [r.seconds for r in report.records],
    }
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    return csv_path, json_path


def _pair(stem: Path) -> tuple[Path, Path]:
    # stems such as "alpha0.9_lambda1" contain dots, so append rather than replace
    return stem.with_name(stem.name + ".csv"), stem.with_name(stem.name + ".json")


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def read_report(path) -> tuple[list[dict], dict]:
    """Load a report given either of its two files (or the shared stem)."""
    stem = Path(path)
    if stem.suffix in (".csv", ".json"):
        stem = stem.with_suffix("")
    csv_path, json_path = _pair(stem)
    if not csv_path.exists():
        raise ReportError(f"{csv_path}: no such report")
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_FIELDS:
            raise ReportError(f"{csv_path}: unexpected columns {reader.fieldnames}")
        rows = []
        for r in reader:
            rows.append({k: (v if k == "status" else float(v)) for k, v in r.items()})
    meta = {}
    if json_path.exists():
        try:
            meta = json.loads(json_path.read_text())
        except json.JSONDecodeError as exc:
            raise ReportError(f"{json_path}: corrupt summary ({exc})") from exc
    return rows, meta


def metrics_table(named: dict[str, dict]) -> str:
    """Markdown table of summary metrics, one row per report."""
    head = "| report | " + " | ".join(SUMMARY_KEYS) + " |"
    lines = [head, "|" + "---|" * (len(SUMMARY_KEYS) + 1)]
    for name, summary in named.items():
        vals = []
        for k in SUMMARY_KEYS:
            v = summary.get(k, float("nan"))
            vals.append(f"{v:.4f}" if isinstance(v, float) and not math.isnan(v) else str(v))
        lines.append(f"| {name} | " + " | ".join(vals) + " |")
    return "\n".join(lines)


def plot_reports(named_rows: dict[str, list[dict]], path, metric: str = "mae") -> Path:
    """Line plot of a per-batch metric against batch index."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for name, rows in named_rows.items():
        ax.plot([r["batch_index"] for r in rows], [r[metric] for r in rows], label=name, lw=1)
    ax.set_xlabel("batch index")
    ax.set_ylabel(metric.upper())
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
