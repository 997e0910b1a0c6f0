"""Merge evaluation reports into clean/adversarial tables and a bar chart."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import EvalReport  # noqa: E402

CONDITION_ORDER = ("clean", "fgsm", "pgd", "rosa")


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def _condition_key(c: str):
    return (CONDITION_ORDER.index(c) if c in CONDITION_ORDER else len(CONDITION_ORDER), c)


def collect(reports) -> tuple[list[str], list[str], dict]:
    """Return (models, conditions, {(model, condition): aggregate})."""
    cells, models, conds = {}, [], set()
    for rep in reports:
        model = rep.meta.get("model", "model")
        cond = rep.meta.get("condition", "clean")
        if model not in models:
            models.append(model)
        conds.add(cond)
        cells[(model, cond)] = rep.aggregate
    return models, sorted(conds, key=_condition_key), cells


def _fmt(v, digits=4):
    return "-" if v is None else f"{v:.{digits}f}"


def rows(reports) -> tuple[list[str], list[list[str]]]:
    models, conds, cells = collect(reports)
    header = ["model"] + [f"{metric} {c}" for c in conds for metric in ("F_beta", "MAE")]
    body = []
    for m in models:
        row = [m]
        for c in conds:
            agg = cells.get((m, c), {})
            row += [_fmt(agg.get("f_beta")), _fmt(agg.get("mae"))]
        body.append(row)
    return header, body


def markdown_table(reports) -> str:
    header, body = rows(reports)
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] * len(header)) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines) + "\n"


def write_csv(reports, path) -> None:
    header, body = rows(reports)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(body)


def plot_scores(reports, path) -> None:
    """Grouped bars of F-beta per model, one bar per condition."""
    models, conds, cells = collect(reports)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(models) * len(conds) / 2 + 2), 3.2))
    width = 0.8 / max(1, len(conds))
    for j, c in enumerate(conds):
        vals = [(cells.get((m, c)) or {}).get("f_beta") or 0.0 for m in models]
        xs = [i + (j - (len(conds) - 1) / 2) * width for i in range(len(models))]
        ax.bar(xs, vals, width, label=c)
    ax.set_xticks(range(len(models)))
    ax.set_xticklabels(models, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel(r"$F_\beta$")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(reports, table_path) -> list[Path]:
    """Write the markdown table plus sibling ``.csv`` and ``.png`` files."""
    table_path = Path(table_path)
    table_path.parent.mkdir(parents=True, exist_ok=True)
    table_path.write_text(markdown_table(reports))
    csv_path = table_path.with_suffix(".csv")
    png_path = table_path.with_suffix(".png")
    write_csv(reports, csv_path)
    plot_scores(reports, png_path)
    return [table_path, csv_path, png_path]
