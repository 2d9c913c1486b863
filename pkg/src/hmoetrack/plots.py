"""Dependency-free SVG bar charts. Every chart is written next to a CSV holding its numbers."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c")


def grouped_bars_svg(groups: Sequence[str], series: Sequence[str], values: Sequence[Sequence[float]],
                     title: str = "", ylabel: str = "", width: int = 720, height: int = 360) -> str:
    """``values[g][s]`` is the height of series ``s`` in group ``g``."""
    left, right, top, bottom = 60, 150, 40, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    vmax = max((v for row in values for v in row), default=0.0) or 1.0
    n_g, n_s = max(len(groups), 1), max(len(series), 1)
    slot = plot_w / n_g
    bar = slot * 0.8 / n_s
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>']
    for k in range(5):
        v = vmax * k / 4
        y = top + plot_h - plot_h * k / 4
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    out.append(f'<text x="14" y="{top + plot_h / 2:.1f}" transform="rotate(-90 14 {top + plot_h / 2:.1f})" '
               f'text-anchor="middle">{escape(ylabel)}</text>')
    for g, name in enumerate(groups):
        x0 = left + g * slot + slot * 0.1
        for s in range(len(series)):
            v = values[g][s]
            h = plot_h * v / vmax
            out.append(f'<rect x="{x0 + s * bar:.2f}" y="{top + plot_h - h:.2f}" width="{bar:.2f}" '
                       f'height="{h:.2f}" fill="{PALETTE[s % len(PALETTE)]}" data-value="{v:.6g}"/>')
        out.append(f'<text x="{left + (g + 0.5) * slot:.1f}" y="{top + plot_h + 18}" '
                   f'text-anchor="middle">{escape(name)}</text>')
    for s, name in enumerate(series):
        y = top + 14 * s
        out.append(f'<rect x="{left + plot_w + 16}" y="{y}" width="10" height="10" '
                   f'fill="{PALETTE[s % len(PALETTE)]}"/>')
        out.append(f'<text x="{left + plot_w + 32}" y="{y + 9}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: str | Path, svg: str) -> None:
    Path(path).write_text(svg)
