"""Report files for a study directory: tables, CSV and SVG cost curves.

Everything written here is a pure function of the stored results, so
re-running a report reproduces the same bytes.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .sim import STRATEGY_ORDER, CompetitionType
from .study import COST_SCALE, StudyResults, summarize

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _table_rows(table, averages, scale: float):
    rows = [["p2", "p1", "mean", "half_ci", "n"]]
    for r, row in enumerate(table):
        for c, s in enumerate(row):
            rows.append([STRATEGY_ORDER[r].value, STRATEGY_ORDER[c].value,
                         repr(s.mean * scale), repr(s.half * scale), s.n])
    for c, s in enumerate(averages):
        rows.append(["Average", STRATEGY_ORDER[c].value, repr(s.mean * scale),
                     repr(s.half * scale), s.n])
    return rows


def _write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def cost_curve_svg(results: StudyResults, p1, width: int = 480, height: int = 300) -> str:
    """Mean P1 stage cost per step for one P1 strategy, one line per opponent."""
    curves = results.cost_curves()
    series = [(p2, curves[CompetitionType(p1, p2).label][0] * COST_SCALE) for p2 in STRATEGY_ORDER]
    vals = np.concatenate([y[np.isfinite(y)] for _, y in series] + [np.zeros(1)])
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-12:
        hi = lo + 1.0
    ml, mr, mt, mb = 60, 110, 30, 40
    pw, ph = width - ml - mr, height - mt - mb
    n = max(results.horizon - 1, 1)
    sx = lambda k: ml + pw * k / n
    sy = lambda v: mt + ph * (hi - v) / (hi - lo)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
           f'<text x="{ml}" y="{mt - 10}">P1 {p1.long_name}: mean stage cost (x{COST_SCALE:g})</text>',
           f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">step</text>',
           f'<text x="{ml - 6}" y="{sy(hi) + 4:.1f}" text-anchor="end">{hi:.3g}</text>',
           f'<text x="{ml - 6}" y="{sy(lo) + 4:.1f}" text-anchor="end">{lo:.3g}</text>',
           f'<text x="{ml}" y="{mt + ph + 14}" text-anchor="middle">0</text>',
           f'<text x="{ml + pw}" y="{mt + ph + 14}" text-anchor="middle">{n}</text>']
    if lo < 0 < hi:
        out.append(f'<line x1="{ml}" x2="{ml + pw}" y1="{sy(0):.1f}" y2="{sy(0):.1f}" '
                   f'stroke="#ccc" stroke-dasharray="3,3"/>')
    for j, (p2, y) in enumerate(series):
        pts = " ".join(f"{sx(k):.1f},{sy(v):.1f}" for k, v in enumerate(y) if math.isfinite(v))
        if pts:
            out.append(f'<polyline fill="none" stroke="{PALETTE[j]}" stroke-width="1.5" points="{pts}"/>')
        ly = mt + 14 * (j + 1)
        out.append(f'<line x1="{ml + pw + 10}" x2="{ml + pw + 28}" y1="{ly - 4}" y2="{ly - 4}" '
                   f'stroke="{PALETTE[j]}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 32}" y="{ly}">P2 {p2.long_name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(results: StudyResults, out_dir) -> Path:
    """Write tables.txt, steps.csv, costs.csv, curves.csv and one SVG per P1 strategy."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tables.txt").write_text(summarize(results))
    _write_csv(out / "steps.csv", _table_rows(results.steps_table, results.steps_averages, 1.0))
    _write_csv(out / "costs.csv", _table_rows(results.cost_table, results.cost_averages, COST_SCALE))
    rows = [["cell", "step", "mean_stage_cost_p1", "running"]]
    for label, (mean, cnt) in results.cost_curves().items():
        rows += [[label, k, repr(float(m)), int(c)] for k, (m, c) in enumerate(zip(mean, cnt))]
    _write_csv(out / "curves.csv", rows)
    meta = sorted(c.label for c in results.meta_equilibria) if results.complete else []
    (out / "meta_game.txt").write_text(
        "# pure equilibria of the empirical cost bimatrix game, as P1-P2\n"
        + "".join(m + "\n" for m in meta))
    for p1 in STRATEGY_ORDER:
        (out / f"cost_curve_{p1.value}.svg").write_text(cost_curve_svg(results, p1))
    return out
