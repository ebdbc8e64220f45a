"""Minimal static SVG line plots.

Output depends only on the input numbers (fixed formatting, no
timestamps), so identical data gives byte-identical files.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
WIDTH, HEIGHT = 640, 240
MARGIN = (60, 20, 30, 40)  # left, right, top, bottom


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    step = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(step))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= step), default=step)
    return np.arange(np.ceil(lo / step) * step, hi + 0.5 * step, step)


def _limits(values, equal_pad: float = 0.05):
    v = np.concatenate([np.asarray(a, dtype=float).ravel() for a in values])
    v = v[np.isfinite(v)]
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    pad = equal_pad * (hi - lo)
    return lo - pad, hi + pad


def _panel(series, title, xlabel, ylabel, y0: float, height: float, equal: bool = False) -> list[str]:
    left, right, top, bottom = MARGIN
    w = WIDTH - left - right
    h = height - top - bottom
    xlo, xhi = _limits([s[1] for s in series])
    ylo, yhi = _limits([s[2] for s in series])
    if equal:
        # same metres per pixel on both axes
        scale = max((xhi - xlo) / w, (yhi - ylo) / h)
        cx, cy = 0.5 * (xlo + xhi), 0.5 * (ylo + yhi)
        xlo, xhi = cx - 0.5 * w * scale, cx + 0.5 * w * scale
        ylo, yhi = cy - 0.5 * h * scale, cy + 0.5 * h * scale

    def px(x):
        return left + (x - xlo) / (xhi - xlo) * w

    def py(y):
        return y0 + top + (yhi - y) / (yhi - ylo) * h

    out = [
        f'<rect x="{left}" y="{y0 + top:.1f}" width="{w}" height="{h}" fill="none" stroke="#444"/>',
        f'<text x="{left + w / 2:.1f}" y="{y0 + top - 8:.1f}" text-anchor="middle">{escape(title)}</text>',
        f'<text x="{left + w / 2:.1f}" y="{y0 + height - 6:.1f}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{y0 + top + h / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {y0 + top + h / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for t in _ticks(xlo, xhi):
        out.append(f'<text x="{px(t):.1f}" y="{y0 + top + h + 14:.1f}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(ylo, yhi):
        out.append(f'<text x="{left - 4}" y="{py(t) + 4:.1f}" text-anchor="end">{t:g}</text>')
    for k, (label, x, y) in enumerate(series):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[ok], y[ok]))
        color = COLORS[k % len(COLORS)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        ly = y0 + top + 14 + 14 * k
        out.append(f'<text x="{left + w - 6}" y="{ly:.1f}" text-anchor="end" fill="{color}">{escape(label)}</text>')
    return out


def line_plot_svg(panels) -> str:
    """Stack of panels; each panel is ``(series, title, xlabel, ylabel[, equal_axes])``
    with ``series`` a list of ``(label, x, y)``."""
    body = []
    for i, p in enumerate(panels):
        series, title, xlabel, ylabel = p[:4]
        equal = bool(p[4]) if len(p) > 4 else False
        body += _panel(series, title, xlabel, ylabel, i * HEIGHT, HEIGHT, equal)
    total = HEIGHT * len(panels)
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{total}" '
        f'viewBox="0 0 {WIDTH} {total}" font-family="sans-serif" font-size="11">'
    )
    return "\n".join([head, f'<rect width="{WIDTH}" height="{total}" fill="white"/>', *body, "</svg>"]) + "\n"


def trajectory_svg(est_xy: np.ndarray, gt_xy: np.ndarray) -> str:
    """Top-down view of estimated and true vehicle positions."""
    return line_plot_svg(
        [
            (
                [("ground truth", gt_xy[:, 0], gt_xy[:, 1]), ("estimate", est_xy[:, 0], est_xy[:, 1])],
                "trajectory",
                "x (m)",
                "y (m)",
                True,
            )
        ]
    )


def drift_svg(distance: np.ndarray, z: np.ndarray, roll: np.ndarray, pitch: np.ndarray) -> str:
    return line_plot_svg(
        [
            ([("z", distance, z)], "height error", "distance (m)", "m"),
            ([("roll", distance, roll)], "roll error", "distance (m)", "deg"),
            ([("pitch", distance, pitch)], "pitch error", "distance (m)", "deg"),
        ]
    )
