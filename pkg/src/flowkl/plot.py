"""Minimal SVG line charts with no plotting dependency."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 40, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    dashed: bool = False


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, log: bool, count: int = 5) -> list:
    if log:
        a, b = math.floor(lo), math.ceil(hi)
        return [float(k) for k in range(a, b + 1)] if b > a else [lo, hi]
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * k / (count - 1) for k in range(count)]


def line_chart(series: Sequence[Series], *, title: str, xlabel: str, ylabel: str,
               log_x: bool = False, log_y: bool = False, checksum: str = "") -> str:
    """Render the series as an SVG document; non-finite or non-positive (on log axes) points are dropped."""

    def tx(v):
        return math.log10(v) if log_x else v

    def ty(v):
        return math.log10(v) if log_y else v

    pts = []
    for s in series:
        keep = []
        for x, y in zip(s.x, s.y):
            x, y = float(x), float(y)
            if not (math.isfinite(x) and math.isfinite(y)):
                continue
            if (log_x and x <= 0) or (log_y and y <= 0):
                continue
            keep.append((tx(x), ty(y)))
        pts.append(keep)
    allx = [p[0] for ps in pts for p in ps] or [0.0, 1.0]
    ally = [p[1] for ps in pts for p in ps] or [0.0, 1.0]
    x0, x1 = min(allx), max(allx)
    y0, y1 = min(ally), max(ally)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = WIDTH - MARGIN_L - MARGIN_R, HEIGHT - MARGIN_T - MARGIN_B

    def px(v):
        return MARGIN_L + (v - x0) / (x1 - x0) * pw

    def py(v):
        return MARGIN_T + ph - (v - y0) / (y1 - y0) * ph

    out = ['<?xml version="1.0" encoding="UTF-8"?>']
    if checksum:
        out.append(f"<!-- csv-sha256: {checksum} -->")
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
               f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">')
    out.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
    out.append(f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    out.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for v in _ticks(x0, x1, log_x):
        if x0 - 1e-12 <= v <= x1 + 1e-12:
            label = f"1e{int(v)}" if log_x else _fmt(v)
            out.append(f'<text x="{_fmt(px(v))}" y="{MARGIN_T + ph + 18}" text-anchor="middle">{label}</text>')
    for v in _ticks(y0, y1, log_y):
        if y0 - 1e-12 <= v <= y1 + 1e-12:
            label = f"1e{int(v)}" if log_y else _fmt(v)
            out.append(f'<text x="{MARGIN_L - 6}" y="{_fmt(py(v) + 4)}" text-anchor="end">{label}</text>')
    out.append(f'<text x="{MARGIN_L + pw / 2}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{MARGIN_T + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN_T + ph / 2})">{escape(ylabel)}</text>')
    for k, (s, ps) in enumerate(zip(series, pts)):
        color = COLORS[k % len(COLORS)]
        dash = ' stroke-dasharray="6 4"' if s.dashed else ""
        coords = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in ps)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8"{dash} points="{coords}"/>')
        ly = MARGIN_T + 16 + 16 * k
        out.append(f'<line x1="{MARGIN_L + 10}" y1="{ly - 4}" x2="{MARGIN_L + 34}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="1.8"{dash}/>')
        out.append(f'<text x="{MARGIN_L + 40}" y="{ly}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
