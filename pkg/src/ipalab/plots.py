"""Minimal SVG line charts.

Plots are pure functions of CSV text, so a figure can always be regenerated
from the telemetry it shows. Numbers are written with fixed precision and
the output is byte-stable.
"""

from __future__ import annotations

import csv
import io
import math

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=50)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    first = math.ceil(lo / step) * step
    return [first + k * step for k in range(int((hi - first) / step + 1e-9) + 1)]


def line_chart(series, title="", xlabel="", ylabel="", log_y=False):
    """Render ``{label: (x, y)}`` as an SVG document string.

    Non-finite points are dropped. With ``log_y`` non-positive values are
    dropped as well and the axis shows log10 of the data.
    """
    clean = {}
    for label, (x, y) in series.items():
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ok = np.isfinite(x) & np.isfinite(y)
        if log_y:
            ok &= y > 0
        x, y = x[ok], y[ok]
        clean[label] = (x, np.log10(y) if log_y else y)

    xs = np.concatenate([v[0] for v in clean.values()] or [np.zeros(0)])
    ys = np.concatenate([v[1] for v in clean.values()] or [np.zeros(0)])
    if xs.size == 0:
        xs, ys = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    left, top = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - left - MARGIN["right"]
    ph = HEIGHT - top - MARGIN["bottom"]
    px = lambda v: left + (v - x0) / (x1 - x0) * pw
    py = lambda v: top + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.1f}" y="24" text-anchor="middle" font-size="15" '
           f'font-family="sans-serif">{_esc(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for tx in _ticks(x0, x1):
        out.append(f'<line x1="{px(tx):.2f}" y1="{top + ph}" x2="{px(tx):.2f}" y2="{top + ph + 5}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{px(tx):.2f}" y="{top + ph + 18}" text-anchor="middle" '
                   f'font-size="11" font-family="sans-serif">{tx:g}</text>')
    for ty in _ticks(y0, y1):
        label = f"1e{ty:g}" if log_y else f"{ty:.4g}"
        out.append(f'<line x1="{left - 5}" y1="{py(ty):.2f}" x2="{left}" y2="{py(ty):.2f}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(ty) + 4:.2f}" text-anchor="end" font-size="11" '
                   f'font-family="sans-serif">{label}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle" '
               f'font-size="12" font-family="sans-serif">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'font-family="sans-serif" transform="rotate(-90 16 {top + ph / 2:.1f})">'
               f'{_esc(ylabel)}</text>')
    for i, (label, (x, y)) in enumerate(clean.items()):
        color = COLORS[i % len(COLORS)]
        if x.size:
            pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
            if x.size <= 12:
                out.extend(f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="3" fill="{color}"/>'
                           for a, b in zip(x, y))
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly}" font-size="11" '
                   f'font-family="sans-serif">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_csv_columns(text):
    """CSV text to ``{column: list of str}``."""
    rows = list(csv.reader(io.StringIO(text)))
    head, body = rows[0], rows[1:]
    return {h: [r[i] for r in body] for i, h in enumerate(head)}


def _floats(col):
    return np.array([float(v) if v not in ("", "nan") else np.nan for v in col])


def run_plots(run_csv, label="run"):
    """Loss, Δ and gradient-norm charts from one RunRecord CSV."""
    cols = read_csv_columns(run_csv)
    step = _floats(cols["step"])
    return {
        "loss.svg": line_chart({label: (step, _floats(cols["loss"]))}, "Training loss", "step", "loss"),
        "delta.svg": line_chart({label: (step, _floats(cols["delta"]))}, "KL-gap estimate", "step",
                                "delta"),
        "grad_norm.svg": line_chart({label: (step, _floats(cols["grad_norm"]))}, "Gradient norm",
                                    "step", "|grad|", log_y=True),
    }


def overlay_plots(run_csvs):
    """Loss and Δ curves of several runs (``{label: csv text}``) on shared axes."""
    loss, delta = {}, {}
    for label, text in run_csvs.items():
        cols = read_csv_columns(text)
        step = _floats(cols["step"])
        loss[label] = (step, _floats(cols["loss"]))
        delta[label] = (step, _floats(cols["delta"]))
    return {
        "loss_curves.svg": line_chart(loss, "Training loss", "step", "loss", log_y=True),
        "delta_curves.svg": line_chart(delta, "KL-gap estimate", "step", "delta"),
    }


def sweep_plot(sweep_csv, param, metrics=("alignment", "retention", "hand_err")):
    """Metric-vs-parameter trend chart from a sweep table CSV."""
    cols = read_csv_columns(sweep_csv)
    x = _floats(cols[param])
    if param == "beta":
        x = np.log10(x)
        param = "log10 beta"
    series = {m: (x, _floats(cols[m])) for m in metrics}
    series["final_param_dev"] = (x, _floats(cols["final_param_dev"]))
    return line_chart(series, f"Sweep over {param}", param, "metric")
