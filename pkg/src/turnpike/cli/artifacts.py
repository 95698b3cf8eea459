"""Artifact writers: trajectory CSVs, JSON reports and static SVG charts.

All writers are deterministic: floats are written with 17 significant
digits (enough to round-trip an IEEE double), JSON keys keep insertion
order, and the SVG output carries no timestamps or random identifiers.
"""

from __future__ import annotations

import csv
import json
import math
import os
from typing import Sequence

import numpy as np

from ..certificate import distance_profile

FLOAT_FORMAT = "%.17g"


def fmt(v) -> str:
    return FLOAT_FORMAT % float(v)


def trajectory_table(sol, opt, grid):
    """Header and rows ``t, x*, p*, u*, dist_to_steady, hamiltonian``."""
    n, m = sol.n, sol.spec.field.problem.m
    t = np.linspace(0.0, sol.T, int(grid))
    y = sol.trajectory(t)
    u = sol.control(t).reshape(len(t), m)
    d = distance_profile(sol, opt, grid).d
    H = np.array([sol.spec.field.hamiltonian(row) for row in y])
    header = (["t"] + [f"x{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)]
              + [f"u{k + 1}" for k in range(m)] + ["dist_to_steady", "hamiltonian"])
    rows = np.column_stack([t, y, u, d, H])
    return header, rows


def write_csv(path, header: Sequence[str], rows) -> str:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in np.asarray(rows, dtype=float):
            w.writerow([fmt(v) for v in r])
    return path


def jsonable(obj):
    """Recursively convert numpy values; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def write_json(path, payload) -> str:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(jsonable(payload), fh, indent=2, allow_nan=False)
        fh.write("\n")
    return path


def horizon_tag(T) -> str:
    return f"T{float(T):g}"


# --------------------------------------------------------------------------
# SVG

_W, _H, _PAD = 640, 400, 56
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b")


def _ticks(lo, hi, count=5):
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def line_chart(series, title, xlabel, ylabel, log_y=False, points=None) -> str:
    """SVG markup for ``series``: a list of ``(label, xs, ys)`` polylines.

    ``points`` optionally lists ``(label, x, y)`` markers.  With ``log_y``
    values are plotted as ``log10(max(y, 1e-16))``.
    """
    def ty(v):
        v = np.asarray(v, dtype=float)
        return np.log10(np.maximum(v, 1e-16)) if log_y else v

    xs_all = np.concatenate([np.asarray(s[1], float) for s in series]
                            + [np.array([p[1] for p in points or []], float)])
    ys_all = np.concatenate([ty(s[2]) for s in series]
                            + [ty(np.array([p[2] for p in points or []], float))])
    finite = np.isfinite(xs_all) & np.isfinite(ys_all)
    x0, x1 = float(xs_all[finite].min()), float(xs_all[finite].max())
    y0, y1 = float(ys_all[finite].min()), float(ys_all[finite].max())
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1

    def px(x):
        return _PAD + (x - x0) / (x1 - x0) * (_W - 2 * _PAD)

    def py(y):
        return _H - _PAD - (y - y0) / (y1 - y0) * (_H - 2 * _PAD)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
           f'<rect x="{_PAD}" y="{_PAD}" width="{_W - 2 * _PAD}" height="{_H - 2 * _PAD}" '
           'fill="none" stroke="#444"/>']
    for xv in _ticks(x0, x1):
        out.append(f'<text x="{px(xv):.1f}" y="{_H - _PAD + 16}" text-anchor="middle">{xv:.3g}</text>')
    for yv in _ticks(y0, y1):
        lab = f"1e{yv:.1f}" if log_y else f"{yv:.3g}"
        out.append(f'<text x="{_PAD - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{lab}</text>')
    out.append(f'<text x="{_W / 2:.1f}" y="{_H - 12}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="14" y="{_H / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {_H / 2:.1f})">{_esc(ylabel)}</text>')
    for i, (label, xs, ys) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        xs = np.asarray(xs, float)
        yv = ty(ys)
        ok = np.isfinite(xs) & np.isfinite(yv)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs[ok], yv[ok]))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{_W - _PAD - 4}" y="{_PAD + 14 + 14 * i}" text-anchor="end" '
                   f'fill="{color}">{_esc(label)}</text>')
    for label, x, y in points or []:
        out.append(f'<circle cx="{px(x):.2f}" cy="{py(float(ty(y))):.2f}" r="3" fill="black"/>')
        out.append(f'<text x="{px(x) + 5:.2f}" y="{py(float(ty(y))) - 5:.2f}">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s) -> str:
    return (str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))


def write_text(path, text) -> str:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
