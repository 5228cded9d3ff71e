"""Minimal dependency-free SVG charts for run reports."""

from __future__ import annotations

WIDTH, HEIGHT = 640, 420
MARGIN = 56
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _scale(vals, lo, hi, out_lo, out_hi):
    span = hi - lo or 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in vals]


def _ticks(lo, hi, n=5):
    span = hi - lo or 1.0
    return [lo + span * i / (n - 1) for i in range(n)]


def _fmt(v):
    if abs(v) >= 1e5 or (abs(v) < 1e-2 and v != 0):
        return f"{v:.1e}"
    return f"{v:.3g}"


def line_chart(series, title, xlabel, ylabel, path, markers=False):
    """Write a labeled multi-series line/scatter chart.

    series: list of (label, xs, ys).
    """
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        raise ValueError("no data to plot")
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if y_lo == y_hi:
        y_lo, y_hi = y_lo - 1, y_hi + 1

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH/2}" y="20" text-anchor="middle" font-size="15">{title}</text>',
        f'<text x="{WIDTH/2}" y="{HEIGHT-8}" text-anchor="middle">{xlabel}</text>',
        f'<text x="14" y="{HEIGHT/2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {HEIGHT/2})">{ylabel}</text>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH-2*MARGIN}" '
        f'height="{HEIGHT-2*MARGIN}" fill="none" stroke="#333"/>',
    ]
    for tx in _ticks(x_lo, x_hi):
        px = _scale([tx], x_lo, x_hi, MARGIN, WIDTH - MARGIN)[0]
        parts.append(f'<line x1="{px:.1f}" y1="{HEIGHT-MARGIN}" x2="{px:.1f}" '
                     f'y2="{HEIGHT-MARGIN+4}" stroke="#333"/>')
        parts.append(f'<text x="{px:.1f}" y="{HEIGHT-MARGIN+18}" '
                     f'text-anchor="middle">{_fmt(tx)}</text>')
    for ty in _ticks(y_lo, y_hi):
        py = _scale([ty], y_lo, y_hi, HEIGHT - MARGIN, MARGIN)[0]
        parts.append(f'<line x1="{MARGIN-4}" y1="{py:.1f}" x2="{MARGIN}" '
                     f'y2="{py:.1f}" stroke="#333"/>')
        parts.append(f'<text x="{MARGIN-8}" y="{py+4:.1f}" '
                     f'text-anchor="end">{_fmt(ty)}</text>')

    for i, (label, xs, ys) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        px = _scale(xs, x_lo, x_hi, MARGIN, WIDTH - MARGIN)
        py = _scale(ys, y_lo, y_hi, HEIGHT - MARGIN, MARGIN)
        points = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(px, py))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        if markers:
            for x, y in zip(px, py):
                parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3.2" '
                             f'fill="{color}"/>')
        ly = MARGIN + 16 + 16 * i
        parts.append(f'<line x1="{WIDTH-MARGIN-130}" y1="{ly-4}" '
                     f'x2="{WIDTH-MARGIN-110}" y2="{ly-4}" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{WIDTH-MARGIN-104}" y="{ly}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
    return path
