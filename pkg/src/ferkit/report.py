"""Leaderboards and confusion-matrix artifacts (markdown, JSON, CSV, SVG)."""

from __future__ import annotations

import csv
import io
import json
from html import escape
from pathlib import Path
from typing import Iterable, Sequence

from .core import DatasetId, union_labels
from .errors import NoResults
from .metrics import ConfusionMatrix, EvalReport

OVERFLOW_HEADER = "(failed)"


def rank_reports(reports: Iterable[EvalReport]) -> list[EvalReport]:
    """Overall accuracy descending, then macro-F1 descending, then model name."""
    return sorted(reports, key=lambda r: (-r.accuracy, -r.macro_f1, r.model))


def load_reports(results_dir: str | Path) -> list[EvalReport]:
    paths = sorted(Path(results_dir).rglob("report.json"))
    if not paths:
        raise NoResults(f"no report.json found under {results_dir}")
    return [EvalReport.from_dict(json.loads(p.read_text(encoding="utf-8"))) for p in paths]


def pooled_confusion(report: EvalReport) -> ConfusionMatrix:
    """The overall matrix over the union label set.

    Reports written before the overall matrix was stored fall back to summing
    per-dataset matrices, which keeps out-of-set predictions in overflow.
    """
    if report.confusion is not None:
        return report.confusion
    reps = list(report.per_dataset.values())
    labels = union_labels(rep.labels for rep in reps)
    idx = {l: i for i, l in enumerate(labels)}
    counts = [[0] * len(labels) for _ in labels]
    overflow = [0] * len(labels)
    for rep in reps:
        cm = rep.confusion
        for i, gi in enumerate(cm.labels):
            overflow[idx[gi]] += cm.overflow[i]
            for j, pj in enumerate(cm.labels):
                counts[idx[gi]][idx[pj]] += cm.counts[i][j]
    return ConfusionMatrix(labels, counts, overflow)


def leaderboard_rows(reports: Sequence[EvalReport]) -> list[dict]:
    rows = []
    for rank, rep in enumerate(rank_reports(reports), 1):
        row = {
            "rank": rank,
            "model": rep.model,
            "records": rep.record_count,
            "overall": {"accuracy": rep.accuracy, "macro_f1": rep.macro_f1},
            "datasets": {
                ds.value: {"accuracy": d.accuracy, "macro_f1": d.macro_f1, "count": d.count}
                for ds, d in rep.per_dataset.items()
            },
        }
        rows.append(row)
    return rows


def leaderboard_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps({"leaderboard": leaderboard_rows(reports)}, indent=2) + "\n"


def _pct(x: float | None) -> str:
    return "-" if x is None else f"{100 * x:.2f}"


def leaderboard_markdown(reports: Sequence[EvalReport]) -> str:
    rows = leaderboard_rows(reports)
    present = [ds for ds in DatasetId if any(ds.value in r["datasets"] for r in rows)]
    head = ["#", "Model"]
    for ds in present:
        head += [f"{ds.value} Acc", f"{ds.value} F1"]
    head += ["Overall Acc", "Overall F1"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [str(r["rank"]), r["model"]]
        for ds in present:
            d = r["datasets"].get(ds.value)
            cells += [_pct(d and d["accuracy"]), _pct(d and d["macro_f1"])]
        cells += [_pct(r["overall"]["accuracy"]), _pct(r["overall"]["macro_f1"])]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gt\\pred", *(l.value for l in cm.labels), OVERFLOW_HEADER])
    for label, row, extra in zip(cm.labels, cm.counts, cm.overflow):
        w.writerow([label.value, *row, extra])
    return buf.getvalue()


def confusion_svg(cm: ConfusionMatrix, title: str = "") -> str:
    """Row-normalized heatmap; the last column is the failed-extraction share."""
    cols = [l.value for l in cm.labels] + [OVERFLOW_HEADER]
    norm = cm.row_normalized()
    cell, left, top = 56, 90, 90
    width = left + cell * len(cols) + 10
    height = top + cell * len(cm.labels) + 10
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="{left}" y="16" font-size="13">{escape(title)}</text>',
    ]
    for j, name in enumerate(cols):
        x = left + j * cell + cell / 2
        parts.append(
            f'<text x="{x:.1f}" y="{top - 6}" text-anchor="start" '
            f'transform="rotate(-45 {x:.1f} {top - 6})">{escape(name)}</text>'
        )
    for i, label in enumerate(cm.labels):
        y = top + i * cell
        parts.append(f'<text x="{left - 6}" y="{y + cell / 2 + 4:.1f}" text-anchor="end">{label.value}</text>')
        for j, v in enumerate(norm[i]):
            x = left + j * cell
            shade = int(round(255 * (1 - v)))
            fill = f"rgb({shade},{shade},255)"
            ink = "white" if v > 0.5 else "black"
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#ccc"/>')
            parts.append(
                f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 4:.1f}" text-anchor="middle" '
                f'fill="{ink}">{100 * v:.1f}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def model_slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name) or "model"


def confusion_artifacts(report: EvalReport, fmt: str) -> dict[str, str]:
    """File name -> content for every per-dataset and pooled confusion matrix of one model."""
    if fmt not in ("csv", "svg"):
        raise ValueError(f"unsupported confusion format {fmt!r}")
    out = {}
    mats = [(ds.value, rep.confusion) for ds, rep in report.per_dataset.items()]
    mats.append(("overall", pooled_confusion(report)))
    for name, cm in mats:
        fname = f"{model_slug(report.model)}.{name}.confusion.{fmt}"
        out[fname] = confusion_csv(cm) if fmt == "csv" else confusion_svg(cm, f"{report.model} / {name}")
    return out
