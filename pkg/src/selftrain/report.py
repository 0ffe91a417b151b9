"""Stage-curve CSV/SVG emission and ablation tables."""
from __future__ import annotations

import csv
import math
import os
from collections import OrderedDict

CURVE_HEADER = ("strategy", "stage", "devel_miou", "val_miou", "dominant_frac")
ABLATION_HEADER = ("addons", "rist_miou", "gist_miou")

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _num(v):
    return repr(float(v)) if v is not None else "nan"


def curve_rows(series):
    """Flatten ``{label: records}`` into CSV rows (label, stage, ...)."""
    rows = []
    for label, records in series.items():
        for r in records:
            rows.append((label, int(r.stage), r.devel_miou, r.val_miou, r.dominant_frac))
    return rows


def read_curve_csv(path):
    series = OrderedDict()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CURVE_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            series.setdefault(row["strategy"], []).append(
                (int(row["stage"]), float(row["devel_miou"]), float(row["val_miou"]), float(row["dominant_frac"]))
            )
    return series


def write_curve_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for label, stage, dev, val, dom in rows:
            w.writerow([label, stage, _num(dev), _num(val), _num(dom)])


def svg_line_chart(series, title="validation mIoU vs refinement stage", width=640, height=400):
    """Self-contained SVG line chart; ``series`` maps label -> [(x, y), ...].

    NaN points are skipped. Output is a pure function of the input, so the
    same data always produces the same bytes.
    """
    pts = [(x, y) for s in series.values() for x, y in s if not math.isnan(y)]
    left, right, top, bottom = 60, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    else:
        x0, x1, y0, y1 = 0, 1, 0, 1
    if x1 == x0:
        x1 = x0 + 1
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.01, y1 + 0.01
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(x):
        return left + pw * (x - x0) / (x1 - x0)

    def sy(y):
        return top + ph * (1.0 - (y - y0) / (y1 - y0))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{_esc(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for k in range(int(math.floor(x0)), int(math.ceil(x1)) + 1):
        out.append(
            f'<text x="{sx(k):.2f}" y="{top + ph + 16}" text-anchor="middle">{k}</text>'
        )
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        out.append(
            f'<text x="{left - 6}" y="{sy(yv) + 4:.2f}" text-anchor="end">{yv:.3f}</text>'
        )
        out.append(
            f'<line x1="{left}" y1="{sy(yv):.2f}" x2="{left + pw}" y2="{sy(yv):.2f}" '
            'stroke="#dddddd" stroke-width="0.5"/>'
        )
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">stage</text>')
    for i, (label, data) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        good = [(x, y) for x, y in data if not math.isnan(y)]
        if good:
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in good)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
            for x, y in good:
                out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2" fill="{color}"/>')
        ly = top + 14 * i + 6
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly + 4}">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_stage_curve(series, out_dir, stem="stage_curve"):
    """Write ``<stem>.csv`` and ``<stem>.svg`` for ``{label: records}``.

    The SVG is rendered from the CSV text (not the in-memory floats) so that
    re-rendering a stored CSV gives identical bytes.
    """
    if not series:
        raise ValueError("need at least one run")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    write_curve_csv(curve_rows(series), csv_path)
    return csv_path, render_svg_from_csv(csv_path, os.path.join(out_dir, f"{stem}.svg"))


def render_svg_from_csv(csv_path, svg_path):
    data = read_curve_csv(csv_path)
    series = OrderedDict((k, [(s, val) for s, _d, val, _f in v]) for k, v in data.items())
    with open(svg_path, "w") as fh:
        fh.write(svg_line_chart(series))
    return svg_path


def write_ablation_csv(table, path):
    """``table``: list of (addons label, rist mIoU, gist mIoU)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for label, rist, gist in table:
            w.writerow([label, _num(rist), _num(gist)])
