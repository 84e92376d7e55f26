"""Standalone SVG emission for sweep results.

Hand-built markup (inline polylines, rects and text, no external
assets or libraries) so the artifacts render anywhere and diff
cleanly.  Layout constants are fixed; data placement is deterministic.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

WIDTH = 640
HEIGHT = 420
MARGIN_LEFT = 70
MARGIN_RIGHT = 30
MARGIN_TOP = 40
MARGIN_BOTTOM = 60

LINE_COLORS = ("#1f6f8b", "#c1502e", "#4c8a4c", "#7b5aa6", "#a8893c", "#555555")


def _header(title: str) -> list:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        f'<text x="{WIDTH / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{escape(title)}</text>',
    ]


def _axis_box() -> tuple:
    x0, x1 = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
    y0, y1 = HEIGHT - MARGIN_BOTTOM, MARGIN_TOP
    return x0, x1, y0, y1


def line_plot_svg(title: str, x_label: str, y_label: str, x_values,
                  series: dict) -> str:
    """Line plot: series maps a name to one y per x value (None = gap)."""
    if not x_values or not series:
        raise ValueError("line plot needs at least one x value and one series")
    x0, x1, y0, y1 = _axis_box()
    ys = [y for values in series.values() for y in values if y is not None]
    if not ys:
        raise ValueError("line plot has no finite points")
    lo, hi = min(ys), max(ys)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.05, hi + 0.05
    pad = 0.08 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def sx(i: int) -> float:
        if len(x_values) == 1:
            return (x0 + x1) / 2.0
        return x0 + (x1 - x0) * i / (len(x_values) - 1)

    def sy(v: float) -> float:
        return y0 - (y0 - y1) * (v - lo) / (hi - lo)

    parts = _header(title)
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="#333"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#333"/>')
    for i, x in enumerate(x_values):
        parts.append(f'<text x="{sx(i):.1f}" y="{y0 + 20}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="12">{escape(str(x))}</text>')
    for frac in (0.0, 0.5, 1.0):
        v = lo + frac * (hi - lo)
        parts.append(f'<text x="{x0 - 8}" y="{sy(v) + 4:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="12">{v:.3f}</text>')
    parts.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 18}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13">{escape(x_label)}</text>')
    parts.append(f'<text x="18" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 18 {(y0 + y1) / 2:.1f})">{escape(y_label)}</text>')
    for k, (name, values) in enumerate(series.items()):
        color = LINE_COLORS[k % len(LINE_COLORS)]
        points = " ".join(f"{sx(i):.1f},{sy(v):.1f}"
                          for i, v in enumerate(values) if v is not None)
        if points:
            parts.append(f'<polyline points="{points}" fill="none" '
                         f'stroke="{color}" stroke-width="2"/>')
        for i, v in enumerate(values):
            if v is not None:
                parts.append(f'<circle cx="{sx(i):.1f}" cy="{sy(v):.1f}" r="3" '
                             f'fill="{color}"/>')
        ly = MARGIN_TOP + 16 * k
        parts.append(f'<line x1="{x1 - 130}" y1="{ly}" x2="{x1 - 106}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{x1 - 100}" y="{ly + 4}" font-family="sans-serif" '
                     f'font-size="12">{escape(str(name))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def heat_grid_svg(title: str, row_label: str, col_label: str, row_values,
                  col_values, cells: dict) -> str:
    """Value grid: cells maps (row value, col value) to a float or None."""
    if not row_values or not col_values:
        raise ValueError("heat grid needs nonempty axes")
    x0, x1, y0, y1 = _axis_box()
    known = [v for v in cells.values() if v is not None]
    lo = min(known) if known else 0.0
    hi = max(known) if known else 1.0
    if hi - lo < 1e-12:
        hi = lo + 1.0
    cw = (x1 - x0) / len(col_values)
    ch = (y0 - y1) / len(row_values)

    def shade(v: float) -> str:
        t = (v - lo) / (hi - lo)
        r = int(round(247 - t * (247 - 31)))
        g = int(round(251 - t * (251 - 111)))
        b = int(round(255 - t * (255 - 139)))
        return f"#{r:02x}{g:02x}{b:02x}"

    parts = _header(title)
    for i, rv in enumerate(row_values):
        for j, cv in enumerate(col_values):
            cx = x0 + j * cw
            cy = y1 + i * ch
            value = cells.get((rv, cv))
            fill = "#dddddd" if value is None else shade(value)
            parts.append(f'<rect x="{cx:.1f}" y="{cy:.1f}" width="{cw:.1f}" '
                         f'height="{ch:.1f}" fill="{fill}" stroke="#ffffff"/>')
            label = "n/a" if value is None else f"{value:.3f}"
            dark = value is not None and (value - lo) / (hi - lo) > 0.6
            color = "#ffffff" if dark else "#222222"
            parts.append(f'<text x="{cx + cw / 2:.1f}" y="{cy + ch / 2 + 4:.1f}" '
                         f'text-anchor="middle" font-family="sans-serif" '
                         f'font-size="10" fill="{color}">{label}</text>')
    for j, cv in enumerate(col_values):
        parts.append(f'<text x="{x0 + (j + 0.5) * cw:.1f}" y="{y0 + 18}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{escape(str(cv))}</text>')
    for i, rv in enumerate(row_values):
        parts.append(f'<text x="{x0 - 8}" y="{y1 + (i + 0.5) * ch + 4:.1f}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="11">{escape(str(rv))}</text>')
    parts.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 18}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13">{escape(col_label)}</text>')
    parts.append(f'<text x="18" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 18 {(y0 + y1) / 2:.1f})">{escape(row_label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
