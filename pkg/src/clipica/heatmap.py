"""Minimal SVG heatmap for connectivity matrices."""
from __future__ import annotations

import logging
import math
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["diverging_color", "heatmap_svg"]

log = logging.getLogger(__name__)

_NEG = (0x21, 0x66, 0xAC)
_MID = (0xF7, 0xF7, 0xF7)
_POS = (0xB2, 0x18, 0x2B)
NAN_COLOR = "#808080"


def diverging_color(value: float, vmax: float) -> str:
    """Blue-white-red color for ``value`` on the symmetric range ``[-vmax, vmax]``."""
    if not math.isfinite(value):
        return NAN_COLOR
    f = 0.0 if vmax <= 0 else max(-1.0, min(1.0, value / vmax))
    end = _POS if f > 0 else _NEG
    a = abs(f)
    rgb = (round(m + (e - m) * a) for m, e in zip(_MID, end))
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def heatmap_svg(matrix, color_range: float | None = None, labels=None, cell: int = 20,
                title: str | None = None) -> str:
    """Render ``matrix`` as an SVG 1.1 document.

    ``color_range=None`` scales colors to the largest finite ``|value|``.
    NaN cells are drawn gray and counted in a logged warning.
    """
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    rows, cols = m.shape
    finite = np.isfinite(m)
    n_nan = int((~finite).sum())
    if n_nan:
        log.warning("heatmap: %d non-finite cell(s) drawn gray", n_nan)
    mode = "fixed" if color_range is not None else "auto"
    if color_range is None:
        vmax = float(np.abs(m[finite]).max()) if finite.any() else 1.0
    else:
        vmax = float(color_range)
        if not vmax > 0:
            raise ValueError("color_range must be positive")
    if labels is not None and len(labels) != rows:
        raise ValueError("one label per row required")

    margin = 60 if labels is not None else 10
    top = 30 if title else 10
    bar_x = margin + cols * cell + 20
    bar_w = 15
    width = bar_x + bar_w + 60
    height = top + max(rows * cell, 100) + 20
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<metadata>color_range={vmax:.6g} mode={mode} nan_cells={n_nan}</metadata>',
    ]
    if title:
        out.append(f'<text x="{margin}" y="20" font-size="14">{escape(title)}</text>')
    out.append('<g class="cells">')
    for i in range(rows):
        for j in range(cols):
            v = m[i, j]
            out.append(
                f'<rect x="{margin + j * cell}" y="{top + i * cell}" width="{cell}" '
                f'height="{cell}" fill="{diverging_color(v, vmax)}">'
                f'<title>{i},{j}: {v:.4g}</title></rect>'
            )
    out.append("</g>")
    if labels is not None:
        out.append('<g class="labels" font-size="10">')
        for i, lab in enumerate(labels):
            y = top + i * cell + cell * 0.7
            out.append(f'<text x="{margin - 4}" y="{y:.1f}" text-anchor="end">{escape(str(lab))}</text>')
        out.append("</g>")
    # color bar: 50 stripes from +vmax (top) to -vmax (bottom)
    n_steps = 50
    bar_h = max(rows * cell, 100)
    step = bar_h / n_steps
    out.append('<g class="colorbar">')
    for k in range(n_steps):
        v = vmax * (1.0 - 2.0 * (k + 0.5) / n_steps)
        out.append(f'<rect x="{bar_x}" y="{top + k * step:.3f}" width="{bar_w}" '
                   f'height="{step:.3f}" fill="{diverging_color(v, vmax)}"/>')
    for frac, v in ((0.0, vmax), (0.5, 0.0), (1.0, -vmax)):
        out.append(f'<text x="{bar_x + bar_w + 4}" y="{top + frac * bar_h + 4:.1f}" '
                   f'font-size="10">{v:.3g}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"

