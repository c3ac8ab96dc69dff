"""Minimal static SVG renderers for scatter and Bland-Altman plots."""

from __future__ import annotations

from html import escape
from typing import Sequence

W, H, PAD = 480, 360, 48


def _scale(values: Sequence[float], lo_px: float, hi_px: float):
    lo, hi = min(values), max(values)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lambda v: lo_px + (v - lo) / span * (hi_px - lo_px), lo, hi


def _frame(title: str, xlabel: str, ylabel: str, body: list[str]) -> str:
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
        f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="#444"/>',
    ]
    return "\n".join(head + body + ["</svg>", ""])


def _ticks(sx, sy, xlo, xhi, ylo, yhi) -> list[str]:
    out = []
    for v, px in ((xlo, sx(xlo)), (xhi, sx(xhi))):
        out.append(f'<text x="{px:.1f}" y="{H - PAD + 14}" text-anchor="middle" font-size="10">{v:.3g}</text>')
    for v, py in ((ylo, sy(ylo)), (yhi, sy(yhi))):
        out.append(f'<text x="{PAD - 4}" y="{py:.1f}" text-anchor="end" font-size="10">{v:.3g}</text>')
    return out


def scatter_svg(x: Sequence[float], y: Sequence[float], title: str, xlabel: str, ylabel: str) -> str:
    sx, xlo, xhi = _scale(x, PAD, W - PAD)
    sy, ylo, yhi = _scale(y, H - PAD, PAD)
    body = _ticks(sx, sy, xlo, xhi, ylo, yhi)
    body += [f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.5" fill="#2e7d32" fill-opacity="0.6"/>' for a, b in zip(x, y)]
    lo, hi = max(xlo, ylo), min(xhi, yhi)
    if lo < hi:
        body.append(
            f'<line x1="{sx(lo):.2f}" y1="{sy(lo):.2f}" x2="{sx(hi):.2f}" y2="{sy(hi):.2f}" '
            'stroke="red" stroke-dasharray="4 3"/>'
        )
    return _frame(title, xlabel, ylabel, body)


def bland_altman_svg(
    means: Sequence[float], diffs: Sequence[float], mean_diff: float, loa_low: float, loa_high: float, title: str
) -> str:
    sx, xlo, xhi = _scale(means, PAD, W - PAD)
    sy, ylo, yhi = _scale(list(diffs) + [loa_low, loa_high, 0.0], H - PAD, PAD)
    body = _ticks(sx, sy, xlo, xhi, ylo, yhi)
    body += [f'<circle cx="{sx(m):.2f}" cy="{sy(d):.2f}" r="2.5" fill="#2e7d32" fill-opacity="0.6"/>' for m, d in zip(means, diffs)]
    for level, style in ((0.0, 'stroke="#888" stroke-dasharray="1 3"'), (mean_diff, 'stroke="#1565c0"'),
                         (loa_low, 'stroke="#ef6c00" stroke-dasharray="6 3"'), (loa_high, 'stroke="#ef6c00" stroke-dasharray="6 3"')):
        body.append(f'<line x1="{PAD}" y1="{sy(level):.2f}" x2="{W - PAD}" y2="{sy(level):.2f}" {style}/>')
    return _frame(title, "mean of measures", "difference", body)
