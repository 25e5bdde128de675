"""Minimal SVG line charts for ROC / precision-recall convenience plots."""

from __future__ import annotations

from typing import Dict, Sequence, Tuple
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def line_chart(series: Dict[str, Tuple[Sequence[float], Sequence[float]]], title: str = "",
               xlabel: str = "", ylabel: str = "", log_x: bool = False, width: int = 480,
               height: int = 360) -> str:
    """Render ``{name: (xs, ys)}`` on shared axes; log_x drops non-positive x."""
    import math

    pad_l, pad_r, pad_t, pad_b = 56, 120, 30, 44
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def tx(v):
        return math.log10(v) if log_x else v

    pts = {k: [(tx(x), y) for x, y in zip(xs, ys) if y is not None and (x > 0 or not log_x)]
           for k, (xs, ys) in series.items()}
    allx = [p[0] for v in pts.values() for p in v] or [0.0, 1.0]
    ally = [p[1] for v in pts.values() for p in v] or [0.0, 1.0]
    x0, x1 = min(allx), max(allx)
    y0, y1 = min(0.0, min(ally)), max(1.0, max(ally))
    if x1 == x0:
        x1 = x0 + 1.0

    def sx(v):
        return pad_l + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return pad_t + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{pad_t + ph / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {pad_t + ph / 2:.1f})">{escape(ylabel)}</text>']
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        lab = f"{10 ** xv:.2g}" if log_x else f"{xv:.2g}"
        out.append(f'<text x="{sx(xv):.1f}" y="{pad_t + ph + 14}" text-anchor="middle">{lab}</text>')
        out.append(f'<text x="{pad_l - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.2g}</text>')
    for i, (name, p) in enumerate(pts.items()):
        color = PALETTE[i % len(PALETTE)]
        if p:
            path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in p)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
        ly = pad_t + 12 + 16 * i
        out.append(f'<line x1="{pad_l + pw + 8}" y1="{ly}" x2="{pad_l + pw + 24}" y2="{ly}" stroke="{color}"/>')
        out.append(f'<text x="{pad_l + pw + 28}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
