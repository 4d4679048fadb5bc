"""Static SVG figures written as plain text.

Coordinates are printed with fixed precision so identical data always gives
byte-identical files.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _f(x: float) -> str:
    return f"{x:.2f}"


class _Frame:
    """Maps data coordinates into a plot rectangle."""

    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim = _padded(xlim)
        self.ylim = _padded(ylim)

    def px(self, x):
        lo, hi = self.xlim
        return self.x0 + (np.asarray(x, dtype=float) - lo) / (hi - lo) * self.w

    def py(self, y):
        lo, hi = self.ylim
        return self.y0 + self.h - (np.asarray(y, dtype=float) - lo) / (hi - lo) * self.h

    def axes(self, xlabel="", ylabel="") -> list[str]:
        out = [f'<rect x="{_f(self.x0)}" y="{_f(self.y0)}" width="{_f(self.w)}" height="{_f(self.h)}" '
               f'fill="none" stroke="#444" stroke-width="1"/>']
        for v in np.linspace(*self.ylim, 5):
            y = self.py(v)
            out.append(f'<text x="{_f(self.x0 - 4)}" y="{_f(y + 3)}" font-size="9" text-anchor="end">{v:.3g}</text>')
        if xlabel:
            out.append(f'<text x="{_f(self.x0 + self.w / 2)}" y="{_f(self.y0 + self.h + 28)}" font-size="11" '
                       f'text-anchor="middle">{escape(xlabel)}</text>')
        if ylabel:
            cx, cy = self.x0 - 40, self.y0 + self.h / 2
            out.append(f'<text x="{_f(cx)}" y="{_f(cy)}" font-size="11" text-anchor="middle" '
                       f'transform="rotate(-90 {_f(cx)} {_f(cy)})">{escape(ylabel)}</text>')
        return out


def _padded(lim):
    lo, hi = float(lim[0]), float(lim[1])
    if not np.isfinite(lo) or not np.isfinite(hi):
        return (0.0, 1.0)
    if hi - lo < 1e-12:
        return (lo - 0.5, hi + 0.5)
    pad = 0.05 * (hi - lo)
    return (lo - pad, hi + pad)


def _document(width, height, body: list[str], title: str = "") -> str:
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
            f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        head.append(f'<text x="{width / 2:.1f}" y="18" font-size="13" text-anchor="middle">{escape(title)}</text>')
    return "\n".join(head + body + ["</svg>", ""])


def polyline_panels(panels: list[tuple[str, list[np.ndarray]]], title: str = "",
                    panel_size: int = 240) -> str:
    """One square panel per entry, each drawing a set of 2-D polylines."""
    n = max(len(panels), 1)
    margin = 30
    width = n * (panel_size + margin) + margin
    height = panel_size + 2 * margin + 20
    body = []
    for i, (name, lines) in enumerate(panels):
        pts = np.concatenate(lines) if lines else np.zeros((1, 2))
        fr = _Frame(margin + i * (panel_size + margin), 40, panel_size, panel_size,
                    (pts[:, 0].min(), pts[:, 0].max()), (pts[:, 1].min(), pts[:, 1].max()))
        body.append(f'<rect x="{_f(fr.x0)}" y="{_f(fr.y0)}" width="{panel_size}" height="{panel_size}" '
                    f'fill="none" stroke="#444"/>')
        body.append(f'<text x="{_f(fr.x0 + panel_size / 2)}" y="{_f(fr.y0 + panel_size + 16)}" '
                    f'font-size="11" text-anchor="middle">{escape(name)}</text>')
        for j, line in enumerate(lines):
            xs, ys = fr.px(line[:, 0]), fr.py(line[:, 1])
            coords = " ".join(f"{_f(x)},{_f(y)}" for x, y in zip(xs, ys))
            body.append(f'<polyline points="{coords}" fill="none" stroke="{PALETTE[j % len(PALETTE)]}" '
                        f'stroke-width="1" stroke-opacity="0.8"/>')
    return _document(width, height, body, title)


def bar_chart(categories: list[str], series: dict[str, list[float]], title: str = "",
              ylabel: str = "", errors: dict[str, list[float]] | None = None) -> str:
    """Grouped bars: one group per category, one bar per series."""
    width, height = max(360, 90 * len(categories) + 140), 320
    values = np.array([v for vals in series.values() for v in vals], dtype=float)
    finite = values[np.isfinite(values)]
    top = float(finite.max()) if finite.size else 1.0
    if errors:
        top += max((max(e) for e in errors.values() if e), default=0.0)
    fr = _Frame(70, 40, width - 170, height - 90, (0.0, top), (0.0, top))
    fr.ylim = (0.0, fr.ylim[1])
    body = fr.axes(ylabel=ylabel)
    group_w = fr.w / max(len(categories), 1)
    bar_w = 0.8 * group_w / max(len(series), 1)
    for c, cat in enumerate(categories):
        gx = fr.x0 + c * group_w + 0.1 * group_w
        body.append(f'<text x="{_f(fr.x0 + (c + 0.5) * group_w)}" y="{_f(fr.y0 + fr.h + 14)}" font-size="10" '
                    f'text-anchor="middle">{escape(str(cat))}</text>')
        for s, (name, vals) in enumerate(series.items()):
            v = vals[c]
            if not np.isfinite(v):
                continue
            x = gx + s * bar_w
            y = float(fr.py(v))
            body.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(bar_w)}" height="{_f(fr.y0 + fr.h - y)}" '
                        f'fill="{PALETTE[s % len(PALETTE)]}"/>')
            if errors and name in errors:
                e = errors[name][c]
                cx = x + bar_w / 2
                body.append(f'<line x1="{_f(cx)}" x2="{_f(cx)}" y1="{_f(fr.py(v - e))}" y2="{_f(fr.py(v + e))}" '
                            f'stroke="#000"/>')
    for s, name in enumerate(series):
        ly = fr.y0 + 12 + 16 * s
        body.append(f'<rect x="{_f(width - 92)}" y="{_f(ly - 9)}" width="10" height="10" '
                    f'fill="{PALETTE[s % len(PALETTE)]}"/>')
        body.append(f'<text x="{_f(width - 78)}" y="{_f(ly)}" font-size="10">{escape(name)}</text>')
    return _document(width, height, body, title)


def scatter(points: list[tuple[str, float, float]], title: str = "", xlabel: str = "",
            ylabel: str = "") -> str:
    """Labelled points ``(label, x, y)``; non-finite points are skipped."""
    width, height = 420, 340
    pts = [(lab, x, y) for lab, x, y in points if np.isfinite(x) and np.isfinite(y)]
    xs = np.array([p[1] for p in pts]) if pts else np.zeros(1)
    ys = np.array([p[2] for p in pts]) if pts else np.zeros(1)
    fr = _Frame(70, 40, width - 110, height - 90, (xs.min(), xs.max()), (ys.min(), ys.max()))
    body = fr.axes(xlabel, ylabel)
    for i, (lab, x, y) in enumerate(pts):
        cx, cy = float(fr.px(x)), float(fr.py(y))
        body.append(f'<circle cx="{_f(cx)}" cy="{_f(cy)}" r="4" fill="{PALETTE[i % len(PALETTE)]}"/>')
        body.append(f'<text x="{_f(cx + 6)}" y="{_f(cy - 6)}" font-size="10">{escape(lab)}</text>')
    return _document(width, height, body, title)
