"""Minimal standalone SVG heatmap writer."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np


def _diverging(t: float) -> str:
    """Blue (t=0) through white (0.5) to red (1)."""
    t = min(max(t, 0.0), 1.0)
    if t < 0.5:
        k = t / 0.5
        rgb = (int(59 + (255 - 59) * k), int(76 + (255 - 76) * k), int(192 + (255 - 192) * k))
    else:
        k = (t - 0.5) / 0.5
        rgb = (int(255 - (255 - 180) * k), int(255 - 255 * k), int(255 - (255 - 38) * k))
    return "#%02x%02x%02x" % rgb


def heatmap_svg(xs, ys, values, title: str = "", cell: int = 12) -> str:
    """Row ``i`` of ``values`` is drawn at ``ys[i]``, with larger y at the top."""
    values = np.asarray(values, dtype=float)
    ny, nx = values.shape
    finite = values[np.isfinite(values)]
    bound = float(np.max(np.abs(finite))) if finite.size else 1.0
    bound = bound or 1.0
    margin, bar = 40, 16
    width = margin * 2 + nx * cell + bar + 50
    height = margin * 2 + ny * cell
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{margin}" y="{margin - 14}" font-family="sans-serif" font-size="13">'
                   f'{escape(title)}</text>')
    for i in range(ny):
        y = margin + (ny - 1 - i) * cell
        for j in range(nx):
            v = values[i, j]
            color = _diverging(0.5 + 0.5 * v / bound) if np.isfinite(v) else "#808080"
            out.append(f'<rect x="{margin + j * cell}" y="{y}" width="{cell}" height="{cell}" fill="{color}"/>')
    axis_y = margin + ny * cell + 14
    out.append(f'<text x="{margin}" y="{axis_y}" font-family="sans-serif" font-size="10">{xs[0]:.2f}</text>')
    out.append(f'<text x="{margin + nx * cell}" y="{axis_y}" font-family="sans-serif" font-size="10" '
               f'text-anchor="end">{xs[-1]:.2f}</text>')
    out.append(f'<text x="{margin - 4}" y="{margin + ny * cell}" font-family="sans-serif" font-size="10" '
               f'text-anchor="end">{ys[0]:.2f}</text>')
    out.append(f'<text x="{margin - 4}" y="{margin + 8}" font-family="sans-serif" font-size="10" '
               f'text-anchor="end">{ys[-1]:.2f}</text>')
    bx = margin + nx * cell + 12
    steps = 20
    for k in range(steps):
        h = ny * cell / steps
        out.append(f'<rect x="{bx}" y="{margin + k * h:.2f}" width="{bar}" height="{h + 0.5:.2f}" '
                   f'fill="{_diverging(1.0 - k / (steps - 1))}"/>')
    out.append(f'<text x="{bx + bar + 3}" y="{margin + 8}" font-family="sans-serif" font-size="10">{bound:.3g}</text>')
    out.append(f'<text x="{bx + bar + 3}" y="{margin + ny * cell}" font-family="sans-serif" '
               f'font-size="10">{-bound:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_heatmap_svg(path: str | Path, xs, ys, values, title: str = "") -> None:
    Path(path).write_text(heatmap_svg(xs, ys, values, title))
