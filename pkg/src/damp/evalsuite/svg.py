"""Minimal standalone SVG scatter plots."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, MARGIN = 640, 480, 60


def _scale(values, lo_px, hi_px):
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    return lambda x: lo_px + (x - lo) / (hi - lo) * (hi_px - lo_px), (lo, hi)


def scatter_svg(series: Sequence[dict], title: str, xlabel: str, ylabel: str) -> str:
    """``series``: dicts with keys x, y, color, label and optional names."""
    xs = np.concatenate([np.asarray(s["x"], float) for s in series])
    ys = np.concatenate([np.asarray(s["y"], float) for s in series])
    fx, (x0, x1) = _scale(xs, MARGIN, WIDTH - MARGIN)
    fy, (y0, y1) = _scale(ys, HEIGHT - MARGIN, MARGIN)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
           f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
           f'<text x="{WIDTH / 2}" y="{HEIGHT - 20}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="18" y="{HEIGHT / 2}" text-anchor="middle" '
           f'transform="rotate(-90 18 {HEIGHT / 2})">{escape(ylabel)}</text>',
           f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 16}">{x0:.3g}</text>',
           f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - MARGIN + 16}" text-anchor="end">{x1:.3g}</text>',
           f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{MARGIN - 4}" y="{MARGIN + 4}" text-anchor="end">{y1:.3g}</text>']
    for i, s in enumerate(series):
        color = s.get("color", "black")
        names = s.get("names") or [None] * len(s["x"])
        for x, y, name in zip(s["x"], s["y"], names):
            out.append(f'<circle cx="{fx(x):.2f}" cy="{fy(y):.2f}" r="3" fill="{color}" fill-opacity="0.7"/>')
            if name:
                out.append(f'<text x="{fx(x) + 4:.2f}" y="{fy(y) - 4:.2f}" font-size="8" '
                           f'fill="{color}">{escape(name)}</text>')
        ly = MARGIN + 14 * i
        out.append(f'<circle cx="{WIDTH - MARGIN - 90}" cy="{ly}" r="4" fill="{color}"/>')
        out.append(f'<text x="{WIDTH - MARGIN - 82}" y="{ly + 4}">{escape(s.get("label", ""))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def neighbor_plot(before, after, title="projection vs male-neighbor fraction") -> str:
    series = [{"x": before.projections, "y": before.neighbor_fractions, "color": "#c0392b",
               "label": f"before (rho={before.correlation:.2f})", "names": before.words}]
    if after is not None:
        series.append({"x": after.projections, "y": after.neighbor_fractions, "color": "#2471a3",
                       "label": f"after (rho={after.correlation:.2f})", "names": after.words})
    return scatter_svg(series, title, "projection on gender direction", "fraction of male-leaning neighbors")


def plane_plot(words, before_xy, after_xy=None, title="gender plane") -> str:
    series = [{"x": before_xy[:, 0], "y": before_xy[:, 1], "color": "#c0392b",
               "label": "before", "names": list(words)}]
    if after_xy is not None:
        series.append({"x": after_xy[:, 0], "y": after_xy[:, 1], "color": "#2471a3",
                       "label": "after", "names": list(words)})
    return scatter_svg(series, title, "first gender component", "second gender component")
