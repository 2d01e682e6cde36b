"""Static SVG line charts of metrics.csv columns."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import DataError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def read_columns(path, cols, x_col="step"):
    path = Path(path)
    if not path.exists():
        raise DataError(f"csv not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in [x_col, *cols] if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        xs, ys = [], {c: [] for c in cols}
        for lineno, row in enumerate(reader, start=2):
            try:
                xs.append(float(row[x_col]))
                for c in cols:
                    ys[c].append(float(row[c]))
            except (TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: malformed value ({e})") from e
    return xs, ys


def render_svg(xs, series: dict, width=720, height=360, log_y=False, title="") -> str:
    pad_l, pad_r, pad_t, pad_b = 60, 20, 30, 40
    finite = [v for vals in series.values() for v in vals if math.isfinite(v) and (v > 0 or not log_y)]
    tf = (lambda v: math.log10(v)) if log_y else (lambda v: v)
    y_lo, y_hi = (min(map(tf, finite)), max(map(tf, finite))) if finite else (0.0, 1.0)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    x_lo, x_hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0

    def px(x):
        return pad_l + (x - x_lo) / (x_hi - x_lo) * (width - pad_l - pad_r)

    def py(y):
        return height - pad_b - (tf(y) - y_lo) / (y_hi - y_lo) * (height - pad_t - pad_b)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>',
           f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>',
           f'<text x="{pad_l}" y="{height - 10}" font-size="11">{x_lo:g}</text>',
           f'<text x="{width - pad_r - 40}" y="{height - 10}" font-size="11">{x_hi:g}</text>',
           f'<text x="4" y="{height - pad_b}" font-size="11">{(10 ** y_lo if log_y else y_lo):.3g}</text>',
           f'<text x="4" y="{pad_t + 4}" font-size="11">{(10 ** y_hi if log_y else y_hi):.3g}</text>']
    if title:
        out.append(f'<text x="{width / 2}" y="18" font-size="13" text-anchor="middle">{escape(title)}</text>')
    for i, (name, vals) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, vals)
                       if math.isfinite(y) and (y > 0 or not log_y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}">'
                   f'<title>{escape(name)}</title></polyline>')
        out.append(f'<text x="{width - pad_r - 150}" y="{pad_t + 14 * (i + 1)}" font-size="11" '
                   f'fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(csv_path, cols, out_svg, log_y=False) -> Path:
    xs, ys = read_columns(csv_path, cols)
    out = Path(out_svg)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_svg(xs, ys, log_y=log_y, title=Path(csv_path).name))
    return out
