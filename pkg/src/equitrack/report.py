"""Deterministic result emission: long-format metric tables as CSV/JSON and
self-contained SVG line plots and heatmaps (no plotting dependency)."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

SCHEMA_VERSION = 1
COLUMNS = ("experiment", "condition", "metric", "value", "n", "seed")


@dataclass
class MetricsTable:
    """Append-only long-format results: one row per (condition, metric)."""

    rows: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def add(self, experiment, condition, metric, value, n=1, seed=0):
        self.rows.append(
            {"experiment": experiment, "condition": condition, "metric": metric,
             "value": float(value), "n": int(n), "seed": int(seed)}
        )

    def values(self, metric=None, condition=None):
        out = []
        for r in self.rows:
            if metric is not None and r["metric"] != metric:
                continue
            if condition is not None and r["condition"] != condition:
                continue
            out.append(r["value"])
        return out

    def value(self, metric, condition=None):
        vals = self.values(metric, condition)
        if len(vals) != 1:
            raise KeyError(f"expected one row for {metric}/{condition}, got {len(vals)}")
        return vals[0]

    def sorted_rows(self):
        return sorted(
            self.rows,
            key=lambda r: (r["experiment"], r["condition"], r["metric"], r["seed"]),
        )

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(COLUMNS)
            for r in self.sorted_rows():
                writer.writerow(
                    [r["experiment"], r["condition"], r["metric"],
                     fmt(r["value"]), r["n"], r["seed"]]
                )

    def write_json(self, path):
        doc = {"schema_version": self.schema_version, "rows": self.sorted_rows()}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def fmt(x):
    """Stable shortest-repr float formatting."""
    return format(float(x), ".10g")


def write_rows_csv(path, header, rows):
    """Plain CSV with stable float formatting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) if isinstance(v, float) else v for v in row])


# -- minimal SVG -------------------------------------------------------------

_W, _H = 480, 320
_ML, _MR, _MT, _MB = 60, 20, 30, 45
_COLORS = ("#1f77b4", "#7f7f7f", "#8c564b", "#2ca02c", "#d62728", "#9467bd")


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    return [lo + span * i / (n - 1) for i in range(n)]


def svg_line_plot(series, title="", xlabel="", ylabel="", logy=False):
    """series: ordered dict name -> (xs, ys). Returns SVG text."""
    import math

    allx = [x for xs, _ in series.values() for x in xs]
    ally = [y for _, ys in series.values() for y in ys]
    if logy:
        ally = [math.log10(max(y, 1e-12)) for y in ally]
    x0, x1 = min(allx), max(allx)
    y0, y1 = min(ally), max(ally)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def px(x):
        return _ML + pw * (x - x0) / (x1 - x0)

    def py(y):
        if logy:
            y = math.log10(max(y, 1e-12))
        return _MT + ph * (1.0 - (y - y0) / (y1 - y0))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<text x="{_W / 2}" y="{_H - 8}" text-anchor="middle" font-size="11">{xlabel}</text>',
        f'<text x="14" y="{_H / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {_H / 2})">{ylabel}</text>',
        f'<rect x="{_ML}" y="{_MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for tx in _ticks(x0, x1):
        parts.append(
            f'<text x="{fmt(px(tx))}" y="{_H - _MB + 15}" text-anchor="middle" '
            f'font-size="10">{fmt(round(tx, 6))}</text>'
        )
    for ty in _ticks(y0, y1):
        label = 10**ty if logy else ty
        yy = _MT + ph * (1.0 - (ty - y0) / (y1 - y0))
        parts.append(
            f'<text x="{_ML - 6}" y="{fmt(yy + 3)}" text-anchor="end" '
            f'font-size="10">{fmt(round(label, 6))}</text>'
        )
    for idx, (name, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[idx % len(_COLORS)]
        pts = " ".join(f"{fmt(px(x))},{fmt(py(y))}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        for x, y in zip(xs, ys):
            parts.append(
                f'<circle cx="{fmt(px(x))}" cy="{fmt(py(y))}" r="3" fill="{color}"/>'
            )
        ly = _MT + 14 + 14 * idx
        parts.append(
            f'<rect x="{_ML + 8}" y="{ly - 8}" width="10" height="10" fill="{color}"/>'
        )
        parts.append(f'<text x="{_ML + 22}" y="{ly}" font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_heatmap(matrix, row_labels, col_labels, title="", log=False):
    """Annotated heatmap of a small 2D list-of-lists."""
    import math

    nr, nc = len(matrix), len(matrix[0])
    cell = 60
    w = _ML + nc * cell + _MR
    h = _MT + nr * cell + _MB
    vals = [math.log10(max(v, 1e-12)) if log else v for row in matrix for v in row]
    lo, hi = min(vals), max(vals)
    if hi == lo:
        hi = lo + 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>',
    ]
    for i, row in enumerate(matrix):
        for j, v in enumerate(row):
            t = math.log10(max(v, 1e-12)) if log else v
            frac = (t - lo) / (hi - lo)
            shade = int(round(255 * (1.0 - frac)))
            color = f"rgb({shade},{shade},255)"
            x, y = _ML + j * cell, _MT + i * cell
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="{color}" stroke="black"/>'
            )
            parts.append(
                f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" '
                f'font-size="10">{fmt(round(v, 4))}</text>'
            )
    for j, lab in enumerate(col_labels):
        parts.append(
            f'<text x="{_ML + j * cell + cell / 2}" y="{_MT - 6}" '
            f'text-anchor="middle" font-size="10">{lab}</text>'
        )
    for i, lab in enumerate(row_labels):
        parts.append(
            f'<text x="{_ML - 6}" y="{_MT + i * cell + cell / 2 + 3}" '
            f'text-anchor="end" font-size="10">{lab}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(tables, out_dir, plots=None):
    """Write each named table as CSV + JSON and optional SVG plots.

    tables: dict name -> MetricsTable; plots: dict filename -> svg text.
    Deterministic file names and byte content."""
    os.makedirs(out_dir, exist_ok=True)
    for name in sorted(tables):
        tables[name].write_csv(os.path.join(out_dir, f"{name}.csv"))
        tables[name].write_json(os.path.join(out_dir, f"{name}.json"))
    for fname in sorted(plots or {}):
        with open(os.path.join(out_dir, fname), "w") as fh:
            fh.write(plots[fname])
