"""Static SVG rendering for traces and attention grids.

Plain string assembly, no plotting dependency.  Output is deterministic
for identical inputs so chart files can be diffed between runs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InputError

_W, _H = 640, 360
_ML, _MR, _MT, _MB = 58, 16, 34, 42
_PALETTE = ("#1f6fb2", "#c23b22", "#2e8b57", "#8a2be2", "#b8860b",
            "#555555", "#d02090")


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _scale(lo: float, hi: float) -> tuple[float, float]:
    if hi == lo:
        pad = 1.0 if hi == 0 else abs(hi) * 0.1
        return lo - pad, hi + pad
    return lo, hi


def line_chart(series: dict, title: str, path, x_label: str = "step",
               y_label: str = "value") -> None:
    """series maps a legend label to a list of (x, y) pairs."""
    if not series or all(len(pts) == 0 for pts in series.values()):
        raise InputError("no data")
    xs = [float(x) for pts in series.values() for x, _ in pts]
    ys = [float(y) for pts in series.values() for _, y in pts]
    x0, x1 = _scale(min(xs), max(xs))
    y0, y1 = _scale(min(ys), max(ys))
    iw = _W - _ML - _MR
    ih = _H - _MT - _MB

    def px(x):
        return _ML + (float(x) - x0) / (x1 - x0) * iw

    def py(y):
        return _MT + (1.0 - (float(y) - y0) / (y1 - y0)) * ih

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" '
           f'height="{_H}" viewBox="0 0 {_W} {_H}">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W // 2}" y="20" text-anchor="middle" '
           f'font-size="14" font-family="sans-serif">{title}</text>']
    # frame and min/max ticks on both axes
    out.append(f'<rect x="{_ML}" y="{_MT}" width="{iw}" height="{ih}" '
               f'fill="none" stroke="#999"/>')
    for val, anchor_x, anchor_y, align in (
            (y1, _ML - 6, _MT + 5, "end"),
            (y0, _ML - 6, _MT + ih, "end")):
        out.append(f'<text x="{anchor_x}" y="{anchor_y}" text-anchor='
                   f'"{align}" font-size="11" font-family="sans-serif">'
                   f'{_fmt(val)}</text>')
    out.append(f'<text x="{_ML}" y="{_H - 14}" font-size="11" '
               f'font-family="sans-serif">{_fmt(x0)}</text>')
    out.append(f'<text x="{_ML + iw}" y="{_H - 14}" text-anchor="end" '
               f'font-size="11" font-family="sans-serif">{_fmt(x1)}</text>')
    out.append(f'<text x="{_ML + iw // 2}" y="{_H - 14}" text-anchor='
               f'"middle" font-size="11" font-family="sans-serif">'
               f'{x_label}</text>')
    out.append(f'<text x="14" y="{_MT + ih // 2}" font-size="11" '
               f'font-family="sans-serif" transform="rotate(-90 14 '
               f'{_MT + ih // 2})" text-anchor="middle">{y_label}</text>')

    for k, (label, pts) in enumerate(sorted(series.items())):
        if not pts:
            continue
        color = _PALETTE[k % len(_PALETTE)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        if len(pts) == 1:
            x, y = pts[0]
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" '
                       f'fill="{color}"/>')
        else:
            out.append(f'<polyline points="{coords}" fill="none" '
                       f'stroke="{color}" stroke-width="1.5"/>')
        ly = _MT + 14 + 14 * k
        out.append(f'<rect x="{_ML + iw - 130}" y="{ly - 9}" width="18" '
                   f'height="4" fill="{color}"/>')
        out.append(f'<text x="{_ML + iw - 106}" y="{ly - 3}" font-size="11" '
                   f'font-family="sans-serif">{label}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def heatmap(grid, title: str, path) -> None:
    """Grayscale-to-blue cell map of a 2-D nonnegative array."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2 or g.size == 0:
        raise InputError(f"heatmap needs a nonempty 2-D grid, got {g.shape}")
    lo, hi = float(g.min()), float(g.max())
    span = hi - lo if hi > lo else 1.0
    rows, cols = g.shape
    cell = max(8, min(48, 480 // max(rows, cols)))
    w = cols * cell + 80
    h = rows * cell + 60
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" '
           f'height="{h}" viewBox="0 0 {w} {h}">',
           f'<rect width="{w}" height="{h}" fill="white"/>',
           f'<text x="{w // 2}" y="18" text-anchor="middle" font-size="13" '
           f'font-family="sans-serif">{title}</text>']
    for i in range(rows):
        for j in range(cols):
            t = (g[i, j] - lo) / span
            r = int(255 * (1.0 - t))
            gb = int(255 * (1.0 - 0.55 * t))
            out.append(f'<rect x="{20 + j * cell}" y="{30 + i * cell}" '
                       f'width="{cell}" height="{cell}" '
                       f'fill="rgb({r},{gb},255)" stroke="#ccc"/>')
    out.append(f'<text x="20" y="{h - 12}" font-size="11" '
               f'font-family="sans-serif">min {_fmt(lo)}</text>')
    out.append(f'<text x="{w - 20}" y="{h - 12}" text-anchor="end" '
               f'font-size="11" font-family="sans-serif">max {_fmt(hi)}'
               f'</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def bar_chart(labels, values, title: str, path,
              y_label: str = "percent") -> None:
    vals = [float(v) for v in values]
    if len(labels) != len(vals):
        raise InputError("labels and values differ in length")
    if not vals:
        raise InputError("no data")
    y0, y1 = _scale(min(0.0, min(vals)), max(vals))
    iw = _W - _ML - _MR
    ih = _H - _MT - _MB
    slot = iw / len(vals)
    bw = slot * 0.6
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" '
           f'height="{_H}" viewBox="0 0 {_W} {_H}">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W // 2}" y="20" text-anchor="middle" '
           f'font-size="14" font-family="sans-serif">{title}</text>',
           f'<rect x="{_ML}" y="{_MT}" width="{iw}" height="{ih}" '
           f'fill="none" stroke="#999"/>']
    for k, (label, v) in enumerate(zip(labels, vals)):
        frac = (v - y0) / (y1 - y0)
        bh = frac * ih
        x = _ML + slot * k + (slot - bw) / 2
        y = _MT + ih - bh
        color = _PALETTE[k % len(_PALETTE)]
        out.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{bw:.2f}" '
                   f'height="{bh:.2f}" fill="{color}"/>')
        out.append(f'<text x="{x + bw / 2:.2f}" y="{y - 4:.2f}" '
                   f'text-anchor="middle" font-size="10" '
                   f'font-family="sans-serif">{_fmt(v)}</text>')
        out.append(f'<text x="{x + bw / 2:.2f}" y="{_H - 24}" '
                   f'text-anchor="middle" font-size="10" '
                   f'font-family="sans-serif">{label}</text>')
    out.append(f'<text x="14" y="{_MT + ih // 2}" font-size="11" '
               f'font-family="sans-serif" transform="rotate(-90 14 '
               f'{_MT + ih // 2})" text-anchor="middle">{y_label}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
