"""Standalone SVG 1.1 line charts and heat maps, no plotting library needed."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
_HEAD = ('<?xml version="1.0" encoding="UTF-8"?>\n'
         '<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" '
         'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">\n')


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n)


def line_chart(series, title="", xlabel="", ylabel="", logy=False, hlines=(),
               width=520, height=340) -> str:
    """``series`` is a list of (label, xs, ys); ``hlines`` a list of (label, y)."""
    ml, mr, mt, mb = 64, 16, 28, 44
    pw, ph = width - ml - mr, height - mt - mb
    pts = []
    for _, xs, ys in series:
        xs, ys = np.asarray(xs, float), np.asarray(ys, float)
        ok = np.isfinite(xs) & np.isfinite(ys) & ((ys > 0) if logy else True)
        pts.append((xs[ok], np.log10(ys[ok]) if logy else ys[ok]))
    hv = [(lab, np.log10(y) if logy else y) for lab, y in hlines if (y > 0 or not logy)]
    allx = np.concatenate([p[0] for p in pts] + [np.zeros(0)])
    ally = np.concatenate([p[1] for p in pts] + [np.array([v for _, v in hv])])
    x0, x1 = (allx.min(), allx.max()) if allx.size else (0.0, 1.0)
    y0, y1 = (ally.min(), ally.max()) if ally.size else (0.0, 1.0)
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def X(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def Y(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [_HEAD.format(w=width, h=height),
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n',
           f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">'
           f'{escape(title)}</text>\n',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>\n']
    for v in _ticks(x0, x1):
        out.append(f'<line x1="{X(v):.2f}" y1="{mt + ph}" x2="{X(v):.2f}" y2="{mt + ph + 4}" '
                   f'stroke="black"/><text x="{X(v):.2f}" y="{mt + ph + 16}" '
                   f'text-anchor="middle">{v:.4g}</text>\n')
    for v in _ticks(y0, y1):
        lab = f"1e{v:.2g}" if logy else f"{v:.3g}"
        out.append(f'<line x1="{ml - 4}" y1="{Y(v):.2f}" x2="{ml}" y2="{Y(v):.2f}" '
                   f'stroke="black"/><text x="{ml - 6}" y="{Y(v) + 4:.2f}" '
                   f'text-anchor="end">{lab}</text>\n')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">'
               f'{escape(xlabel)}</text>\n')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{escape(ylabel)}</text>\n')
    for k, (lab, v) in enumerate(hv):
        out.append(f'<line x1="{ml}" y1="{Y(v):.2f}" x2="{ml + pw}" y2="{Y(v):.2f}" '
                   f'stroke="gray" stroke-dasharray="5,4"/><text x="{ml + pw - 4}" '
                   f'y="{Y(v) - 4:.2f}" text-anchor="end" fill="gray">{escape(lab)}</text>\n')
    for k, ((lab, _, _), (xs, ys)) in enumerate(zip(series, pts)):
        color = PALETTE[k % len(PALETTE)]
        if xs.size:
            path = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(xs, ys))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                       f'points="{path}"/>\n')
        out.append(f'<text x="{ml + 8}" y="{mt + 14 + 13 * k}" fill="{color}">'
                   f'{escape(lab)}</text>\n')
    out.append("</svg>\n")
    return "".join(out)


def _diverging(v):
    """Blue-white-red colour for v in [-1, 1]."""
    v = float(np.clip(v, -1.0, 1.0))
    if v >= 0:
        r, g, b = 255, int(255 * (1 - v)), int(255 * (1 - v))
    else:
        r, g, b = int(255 * (1 + v)), int(255 * (1 + v)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap(M, title="", cell=12) -> str:
    """Colour-mapped rects, symmetric scale around zero."""
    M = np.atleast_2d(np.asarray(M, float))
    rows, cols = M.shape
    scale = float(np.abs(M).max()) or 1.0
    top = 28
    width, height = cols * cell + 20, rows * cell + top + 24
    out = [_HEAD.format(w=width, h=height),
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n',
           f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="12">'
           f'{escape(title)}</text>\n']
    for i in range(rows):
        for j in range(cols):
            out.append(f'<rect x="{10 + j * cell}" y="{top + i * cell}" width="{cell}" '
                       f'height="{cell}" fill="{_diverging(M[i, j] / scale)}"/>\n')
    out.append(f'<text x="10" y="{height - 8}">max |entry| = {scale:.4g}</text>\n')
    out.append("</svg>\n")
    return "".join(out)


def save(path, svg: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg)
