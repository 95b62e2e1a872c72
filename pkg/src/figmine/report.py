"""Render cohort comparisons as JSON and as grouped horizontal bar charts in SVG.

The SVG writer formats every number with a fixed precision so identical
inputs always produce identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence
from xml.sax.saxutils import escape

from figmine.stats import TermComparison

COLOURS = ("#c0392b", "#2e86c1")
ROW_HEIGHT = 26
BAR_HEIGHT = 10
LABEL_WIDTH = 190
PLOT_WIDTH = 360
STAR_WIDTH = 50


def _f(v: float) -> str:
    return f"{v:.2f}"


def render_svg(
    rows: Sequence[TermComparison],
    title: str,
    labels: tuple[str, str],
    single_cohort: bool = False,
) -> str:
    """Two bars per term (cohort A above cohort B) with significance stars."""
    top = 56
    height = top + ROW_HEIGHT * max(1, len(rows)) + 40
    width = LABEL_WIDTH + PLOT_WIDTH + STAR_WIDTH + 20
    scale_max = max([r.prop_a for r in rows] + ([r.prop_b for r in rows] if not single_cohort else []) + [0.0])
    scale_max = 1.0 if scale_max <= 0 else min(1.0, (int(scale_max * 10) + 1) / 10)
    x0 = LABEL_WIDTH
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="Helvetica, Arial, sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="10" y="20" font-size="14" font-weight="bold">{escape(title)}</text>',
    ]
    cohorts = labels[:1] if single_cohort else labels
    for i, label in enumerate(cohorts):
        lx = x0 + i * 150
        out.append(f'<rect x="{lx}" y="30" width="12" height="12" fill="{COLOURS[i]}"/>')
        out.append(f'<text x="{lx + 18}" y="40">{escape(label)}</text>')
    for i, r in enumerate(rows):
        y = top + i * ROW_HEIGHT
        out.append(f'<text x="{x0 - 8}" y="{y + BAR_HEIGHT + 4}" text-anchor="end">{escape(r.term)}</text>')
        props = [r.prop_a] if single_cohort else [r.prop_a, r.prop_b]
        for j, prop in enumerate(props):
            w = PLOT_WIDTH * prop / scale_max
            out.append(
                f'<rect x="{x0}" y="{_f(y + j * (BAR_HEIGHT + 1))}" width="{_f(w)}" '
                f'height="{BAR_HEIGHT}" fill="{COLOURS[j]}"><title>{escape(labels[j])}: {prop:.3f}</title></rect>'
            )
        if r.stars and not single_cohort:
            out.append(f'<text x="{x0 + PLOT_WIDTH + 6}" y="{y + BAR_HEIGHT + 4}">{r.stars}</text>')
    axis_y = top + ROW_HEIGHT * max(1, len(rows))
    out.append(f'<line x1="{x0}" y1="{axis_y}" x2="{x0 + PLOT_WIDTH}" y2="{axis_y}" stroke="#000000"/>')
    for k in range(6):
        tx = x0 + PLOT_WIDTH * k / 5
        out.append(f'<line x1="{_f(tx)}" y1="{axis_y}" x2="{_f(tx)}" y2="{axis_y + 4}" stroke="#000000"/>')
        out.append(f'<text x="{_f(tx)}" y="{axis_y + 16}" text-anchor="middle">{scale_max * k / 5:.2f}</text>')
    out.append(f'<text x="{x0 + PLOT_WIDTH / 2:.0f}" y="{axis_y + 32}" text-anchor="middle">Proportion</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def build_report(
    comparisons: Sequence[TermComparison],
    labels: tuple[str, str],
    classifier: dict[str, Any] | None = None,
    single_cohort: bool = False,
) -> dict[str, Any]:
    first = comparisons[0] if comparisons else None
    report: dict[str, Any] = {
        "unit": "article",
        "test": "fisher_exact_two_sided",
        "cohorts": {
            "A": {"label": labels[0], "n": first.n_a if first else 0},
        },
        "terms": [c.as_dict() for c in comparisons],
    }
    if not single_cohort:
        report["cohorts"]["B"] = {"label": labels[1], "n": first.n_b if first else 0}
    else:
        for row in report["terms"]:
            for key in ("count_b", "n_b", "prop_b", "p_value", "stars", "enriched_in"):
                row.pop(key)
    if classifier is not None:
        report["classifier"] = classifier
    return report


def write_report(
    out_dir: str | Path,
    comparisons: Sequence[TermComparison],
    labels: tuple[str, str],
    classifier: dict[str, Any] | None = None,
    single_cohort: bool = False,
) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(comparisons, labels, classifier, single_cohort)
    paths = {
        "report": out / "report.json",
        "symptoms": out / "report_symptoms.svg",
        "findings": out / "report_findings.svg",
    }
    paths["report"].write_text(json.dumps(report, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    for category, key, title in (
        ("symptom", "symptoms", "Symptoms"),
        ("finding", "findings", "Clinical findings"),
    ):
        rows = [c for c in comparisons if c.category == category]
        paths[key].write_text(render_svg(rows, title, labels, single_cohort), encoding="utf-8")
    return paths
