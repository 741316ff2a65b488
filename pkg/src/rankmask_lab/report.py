"""Machine-readable analysis reports: tables, csv/json emission, svg plots.

Emission is deterministic: identical reports produce byte-identical
files. Timing measurements therefore never enter a report; they live in
the per-run logs and the timing sidecar written by the harness.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field


@dataclass
class Table:
    name: str
    columns: list
    rows: list = field(default_factory=list)

    def add_row(self, **entries) -> None:
        missing = [c for c in self.columns if c not in entries]
        if missing:
            raise ValueError(f"table {self.name}: row missing columns {missing}")
        self.rows.append({c: entries[c] for c in self.columns})


@dataclass
class Report:
    name: str
    metadata: dict = field(default_factory=dict)
    tables: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)

    def table(self, name: str, columns) -> Table:
        t = Table(name=name, columns=list(columns))
        self.tables.append(t)
        return t


def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def report_to_csv(report: Report) -> str:
    buf = io.StringIO()
    buf.write(f"# report: {report.name}\n")
    if "config_hash" in report.metadata:
        buf.write(f"# config_hash: {report.metadata['config_hash']}\n")
    writer = csv.writer(buf, lineterminator="\n")
    for table in report.tables:
        buf.write(f"# table: {table.name}\n")
        writer.writerow(table.columns)
        for row in table.rows:
            writer.writerow([_cell(row[c]) for c in table.columns])
    return buf.getvalue()


def _parse_cell(text: str):
    if text == "":
        return None
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_report_csv(text: str) -> dict:
    """Parse tables back out of the csv emission; values get native types."""
    tables: dict[str, list] = {}
    current = None
    columns: list[str] = []
    for record in csv.reader(io.StringIO(text)):
        if not record:
            continue
        if record[0].startswith("# table: "):
            current = record[0][len("# table: "):]
            tables[current] = []
            columns = []
            continue
        if record[0].startswith("#"):
            continue
        if current is None:
            continue
        if not columns:
            columns = record
            continue
        tables[current].append({c: _parse_cell(v) for c, v in zip(columns, record)})
    return tables


def report_to_json(report: Report) -> str:
    payload = {
        "schema_version": 1,
        "report": report.name,
        "metadata": report.metadata,
        "tables": [
            {"name": t.name, "columns": t.columns, "rows": t.rows} for t in report.tables
        ],
        "artifacts": report.artifacts,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _plot_table(table: Table, path: str) -> bool:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "rankmask-lab"
    import matplotlib.pyplot as plt

    numeric = [
        c for c in table.columns
        if any(isinstance(r[c], (int, float)) and not isinstance(r[c], bool) for r in table.rows)
    ]
    labels_col = next((c for c in table.columns if c not in numeric), None)
    if not numeric or not table.rows:
        return False
    labels = [str(r[labels_col]) if labels_col else str(i) for i, r in enumerate(table.rows)]

    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(labels)), 3.2))
    width = 0.8 / len(numeric)
    for j, col in enumerate(numeric):
        xs = [i + j * width for i in range(len(labels))]
        ys = [r[col] if isinstance(r[col], (int, float)) else 0.0 for r in table.rows]
        ax.bar(xs, ys, width=width, label=col)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(labels))])
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_title(table.name, fontsize=9)
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return True


def emit_report(report: Report, out_dir, formats=("csv", "json", "svg")) -> list:
    """Write report files; returns the paths written.

    Same report and formats produce byte-identical csv/json and stable
    svg output.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IOError(f"cannot create output directory {out_dir}: {exc}") from exc
    written = []
    if "csv" in formats:
        path = os.path.join(out_dir, "report.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(report_to_csv(report))
        written.append(path)
    if "json" in formats:
        path = os.path.join(out_dir, "report.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report_to_json(report))
        written.append(path)
    if "svg" in formats:
        plot_dir = os.path.join(out_dir, "plots")
        os.makedirs(plot_dir, exist_ok=True)
        for table in report.tables:
            path = os.path.join(plot_dir, f"{table.name}.svg")
            if _plot_table(table, path):
                written.append(path)
    return written
