"""Minimal native SVG line and scatter plots for diagnostic figures."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

W, H = 640, 400
ML, MR, MT, MB = 70, 20, 36, 50
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    step = 10 ** np.floor(np.log10((hi - lo) / n))
    for m in (1, 2, 5, 10):
        if (hi - lo) / (m * step) <= n:
            step *= m
            break
    return np.arange(np.ceil(lo / step) * step, hi + 1e-12 * abs(hi), step)


class _Frame:
    def __init__(self, xs, ys, logx=False, logy=False):
        self.logx, self.logy = logx, logy
        x = self._tx(np.concatenate([np.ravel(v) for v in xs]))
        y = self._ty(np.concatenate([np.ravel(v) for v in ys]))
        x, y = x[np.isfinite(x)], y[np.isfinite(y)]
        self.x0, self.x1 = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
        self.y0, self.y1 = (float(y.min()), float(y.max())) if y.size else (0.0, 1.0)
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x1 + 0.5
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        pad = 0.04 * (self.y1 - self.y0)
        self.y0 -= pad
        self.y1 += pad

    def _tx(self, x):
        x = np.asarray(x, dtype=float)
        return np.log10(np.where(x > 0, x, np.nan)) if self.logx else x

    def _ty(self, y):
        y = np.asarray(y, dtype=float)
        return np.log10(np.where(y > 0, y, np.nan)) if self.logy else y

    def px(self, x):
        return ML + (self._tx(x) - self.x0) / (self.x1 - self.x0) * (W - ML - MR)

    def py(self, y):
        return H - MB - (self._ty(y) - self.y0) / (self.y1 - self.y0) * (H - MT - MB)

    def axes(self, title, xlabel, ylabel) -> list[str]:
        out = [f'<rect x="{ML}" y="{MT}" width="{W - ML - MR}" height="{H - MT - MB}" '
               'fill="none" stroke="#444"/>',
               f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
               f'<text x="{(W + ML - MR) / 2}" y="{H - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
               f'<text x="16" y="{(H + MT - MB) / 2}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {(H + MT - MB) / 2})">{escape(ylabel)}</text>']
        for t in _ticks(self.x0, self.x1):
            x = ML + (t - self.x0) / (self.x1 - self.x0) * (W - ML - MR)
            lab = f"{10 ** t:.3g}" if self.logx else f"{t:.3g}"
            out.append(f'<line x1="{x:.1f}" y1="{H - MB}" x2="{x:.1f}" y2="{H - MB + 5}" stroke="#444"/>')
            out.append(f'<text x="{x:.1f}" y="{H - MB + 18}" text-anchor="middle" font-size="11">{lab}</text>')
        for t in _ticks(self.y0, self.y1):
            y = H - MB - (t - self.y0) / (self.y1 - self.y0) * (H - MT - MB)
            lab = f"{10 ** t:.3g}" if self.logy else f"{t:.3g}"
            out.append(f'<line x1="{ML - 5}" y1="{y:.1f}" x2="{ML}" y2="{y:.1f}" stroke="#444"/>')
            out.append(f'<text x="{ML - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{lab}</text>')
        return out


def _doc(body: list[str]) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}">\n<rect width="100%" height="100%" fill="white"/>\n'
            + "\n".join(body) + "\n</svg>\n")


def line_plot(series, title: str = "", xlabel: str = "", ylabel: str = "",
              logx: bool = False, logy: bool = False, width: float = 1.0,
              labels=None, markers: bool = False) -> str:
    """``series`` is a list of (xs, ys) pairs, drawn as polylines."""
    fr = _Frame([s[0] for s in series], [s[1] for s in series], logx, logy)
    body = fr.axes(title, xlabel, ylabel)
    for j, (xs, ys) in enumerate(series):
        px, py = fr.px(xs), fr.py(ys)
        ok = np.isfinite(px) & np.isfinite(py)
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px[ok], py[ok]))
        color = PALETTE[j % len(PALETTE)]
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="{width}" '
                    f'stroke-opacity="0.8" points="{pts}"/>')
        if markers:
            body.extend(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="{color}"/>'
                        for a, b in zip(px[ok], py[ok]))
    if labels:
        for j, lab in enumerate(labels):
            y = MT + 14 + 15 * j
            body.append(f'<text x="{W - MR - 8}" y="{y}" text-anchor="end" font-size="11" '
                        f'fill="{PALETTE[j % len(PALETTE)]}">{escape(str(lab))}</text>')
    return _doc(body)


def scatter_plot(xs, ys, title: str = "", xlabel: str = "", ylabel: str = "", r: float = 1.2) -> str:
    fr = _Frame([xs], [ys])
    body = fr.axes(title, xlabel, ylabel)
    px, py = fr.px(xs), fr.py(ys)
    body.extend(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="{r}" fill="#222"/>' for a, b in zip(px, py))
    return _doc(body)


def write(path, text: str) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
