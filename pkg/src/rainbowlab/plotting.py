"""Tiny static plotter: polylines over axes, rasterized to a PNG."""

from __future__ import annotations

import numpy as np
from PIL import Image

COLORS = [(214, 39, 40), (31, 119, 180), (44, 160, 44), (148, 103, 189)]


def _draw_line(canvas, x0, y0, x1, y1, color):
    n = int(max(abs(x1 - x0), abs(y1 - y0), 1)) * 2
    xs = np.linspace(x0, x1, n).round().astype(int)
    ys = np.linspace(y0, y1, n).round().astype(int)
    h, w, _ = canvas.shape
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    canvas[ys[ok], xs[ok]] = color


def plot_series(path, series, width=480, height=320, margin=40):
    """series: list of (label, y-values); x is the 1-based step index.
    Labels are drawn as color swatches in the top-left corner."""
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    _draw_line(canvas, margin, height - margin, width - 10, height - margin, (0, 0, 0))
    _draw_line(canvas, margin, height - margin, margin, 10, (0, 0, 0))

    ys_all = [v for _, vals in series for v in vals if v is not None]
    if ys_all:
        lo, hi = min(ys_all), max(ys_all)
        if hi == lo:
            hi = lo + 1.0
        n_max = max(len(vals) for _, vals in series)

        def to_px(i, v):
            x = margin + (width - margin - 20) * (i / max(n_max - 1, 1))
            y = (height - margin) - (height - margin - 20) * ((v - lo) / (hi - lo))
            return x, y

        for si, (_, vals) in enumerate(series):
            color = COLORS[si % len(COLORS)]
            pts = [(i, v) for i, v in enumerate(vals) if v is not None]
            for (i0, v0), (i1, v1) in zip(pts, pts[1:]):
                x0, y0 = to_px(i0, v0)
                x1, y1 = to_px(i1, v1)
                _draw_line(canvas, x0, y0, x1, y1, color)
            # legend swatch
            canvas[8 + 10 * si : 14 + 10 * si, 8:28] = color

    Image.fromarray(canvas).save(path)
