"""Metric CSV artifacts and merged comparison tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from .metrics import MetricReport

METRICS_FILE = "metrics.csv"
KEY_COLUMNS = ("dataset", "model", "loss", "mode", "variant")
CLASS_COLUMNS = ("acc", "cls_pr", "cls_re")
SEG_COLUMNS = ("ds", "ji", "ssim", "f1", "hd", "sn", "sp", "pr", "rc")
CSV_COLUMNS = KEY_COLUMNS + CLASS_COLUMNS + SEG_COLUMNS + ("n",)

# header labels of the two published table layouts
SEG_ONLY_HEADER = ("Dataset", "Model", "DS", "JS", "SSIM", "F1", "HD", "SN", "SP", "PR", "RC")
MULTI_TASK_HEADER = ("Dataset", "Model", "Acc", "PR", "RE", "DS", "JI", "SSIM", "F1", "HD", "SN", "SP", "PR", "RE")

# best value per dataset: column -> larger is better
BEST_RULES = {"ds": True, "hd": False, "acc": True}


class ReportError(RuntimeError):
    pass


def _fmt(v) -> str:
    return "" if v is None else f"{float(v):.6f}"


def metrics_row(report: MetricReport, dataset: str, model: str, loss: str, mode: str, variant: str) -> dict:
    row = dict(dataset=dataset, model=model, loss=loss, mode=mode, variant=variant)
    row.update(acc=_fmt(report.accuracy), cls_pr=_fmt(report.precision), cls_re=_fmt(report.recall))
    row.update({k: _fmt(getattr(report, k)) for k in SEG_COLUMNS})
    row["n"] = str(report.n_samples)
    return row


def write_rows(path: Union[str, Path], rows: Iterable[dict], columns=CSV_COLUMNS) -> Path:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def read_rows(path: Union[str, Path]) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class ReportTable:
    rows: list
    best: set = field(default_factory=set)   # (row index, column)

    @property
    def multi_task(self) -> bool:
        return any(r["mode"] == "multi-task" for r in self.rows)

    def header(self) -> tuple:
        return MULTI_TASK_HEADER if self.multi_task else SEG_ONLY_HEADER

    def value_columns(self) -> tuple:
        return (CLASS_COLUMNS if self.multi_task else ()) + SEG_COLUMNS

    def flagged(self, i: int) -> list:
        return [c for c in BEST_RULES if (i, c) in self.best]

    def to_csv(self, path) -> Path:
        rows = [dict(r, best=";".join(self.flagged(i))) for i, r in enumerate(self.rows)]
        return write_rows(path, rows, CSV_COLUMNS + ("best",))

    def to_markdown(self) -> str:
        header = self.header()
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for i, r in enumerate(self.rows):
            cells = [r["dataset"], r["model"]]
            for col in self.value_columns():
                v = r.get(col, "")
                text = f"{float(v):.3f}" if v != "" else "-"
                if (i, col) in self.best:
                    text = f"**{text}**"
                cells.append(text)
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def build_table(rows: list) -> ReportTable:
    if not rows:
        raise ReportError("no metric rows to report")
    rows = sorted(rows, key=lambda r: tuple(r[k] for k in KEY_COLUMNS))
    best = set()
    for dataset in sorted({r["dataset"] for r in rows}):
        idx = [i for i, r in enumerate(rows) if r["dataset"] == dataset]
        for col, larger in BEST_RULES.items():
            vals = [(float(rows[i][col]), i) for i in idx if rows[i].get(col, "") != ""]
            if not vals:
                continue
            target = max(vals)[0] if larger else min(vals)[0]
            best.update((i, col) for v, i in vals if v == target)
    return ReportTable(rows, best)


def report(run_dirs: Iterable[Union[str, Path]]) -> ReportTable:
    """Merge the metric artifacts of several run directories into one table."""
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ReportError("no run directories given")
    missing = [str(d) for d in run_dirs if not (d / METRICS_FILE).is_file()]
    if missing:
        raise ReportError("missing " + METRICS_FILE + " in: " + ", ".join(missing))
    rows = []
    for d in run_dirs:
        rows.extend(read_rows(d / METRICS_FILE))
    return build_table(rows)


def write_report(table: ReportTable, out_dir: Union[str, Path], name: str = "report", figure: bool = True) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = dict(csv=table.to_csv(out_dir / f"{name}.csv"))
    md = out_dir / f"{name}.md"
    md.write_text(table.to_markdown())
    paths["md"] = md
    if figure:
        from .plotting import report_figure

        paths["figure"] = report_figure(table.rows, out_dir / f"{name}_ds.png")
    return paths
