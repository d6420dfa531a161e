"""Static SVG line charts from result CSVs.

The SVG is written by hand (no plotting library) so that identical CSV input
gives byte-identical files. Chart families:

* ``mse-vs-<axis>``: slot-mode rows, mean symbol MSE in dB per estimator
* ``accuracy-vs-<axis>``: feel-mode rows, mean final-round accuracy
* ``accuracy-vs-round``: feel-mode rows, one chart per sweep point
"""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict

from .errors import SchemaMismatch
from .experiments import RESULT_FIELDS, SWEEP_AXES

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=40, bottom=55)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
MSE_FLOOR_DB = -200.0


def read_rows(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch(f"{path} is empty") from None
        if tuple(header) != RESULT_FIELDS:
            raise SchemaMismatch(f"{path} header {header} does not match {list(RESULT_FIELDS)}")
        rows = []
        for n, cells in enumerate(reader, 2):
            if len(cells) != len(header):
                raise SchemaMismatch(f"{path} line {n}: expected {len(header)} cells, got {len(cells)}")
            rows.append(dict(zip(header, cells)))
    if not rows:
        raise SchemaMismatch(f"{path} has no data rows")
    return rows


def _num(text):
    return math.nan if text == "" else float(text)


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.6g}"


def _ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step - 1e-9) * step
    out, v = [], start
    while v <= hi + 1e-9 * step:
        out.append(round(v, 12))
        v += step
    return out


def _esc(text) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def render_svg(series: dict, *, title: str, xlabel: str, ylabel: str) -> str:
    """One polyline with circle markers per series; ``x = inf`` is drawn one step past the last finite x."""
    xs_all = sorted({x for pts in series.values() for x, _ in pts})
    finite = [x for x in xs_all if math.isfinite(x)]
    inf_pos = None
    if any(math.isinf(x) for x in xs_all):
        step = (finite[-1] - finite[0]) / max(len(finite) - 1, 1) if len(finite) > 1 else 1.0
        inf_pos = (finite[-1] + step) if finite else 0.0

    def xpos(x):
        return inf_pos if math.isinf(x) else x

    xv = [xpos(x) for x in xs_all]
    yv = [y for pts in series.values() for _, y in pts if math.isfinite(y)]
    x0, x1 = min(xv), max(xv)
    y0, y1 = (min(yv), max(yv)) if yv else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (xpos(x) - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (y1 - y) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="yes"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{_esc(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    xt = [x for x in _ticks(min(finite), max(finite)) if x0 <= x <= x1] if finite else []
    labels = [(x, _fmt(x)) for x in xt]
    if inf_pos is not None:
        labels.append((math.inf, "inf"))
    for x, lab in labels:
        X = px(x)
        out.append(f'<line x1="{X:.2f}" y1="{MARGIN["top"] + ph}" x2="{X:.2f}" y2="{MARGIN["top"] + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{X:.2f}" y="{MARGIN["top"] + ph + 19}" text-anchor="middle" font-family="sans-serif" font-size="11">{lab}</text>')
    for y in _ticks(y0, y1):
        Y = py(y)
        out.append(f'<line x1="{MARGIN["left"] - 5}" y1="{Y:.2f}" x2="{MARGIN["left"]}" y2="{Y:.2f}" stroke="black"/>')
        out.append(f'<text x="{MARGIN["left"] - 8}" y="{Y + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="11">{_fmt(y)}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" font-family="sans-serif" font-size="13">{_esc(xlabel)}</text>')
    out.append(f'<text x="18" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="13" '
               f'transform="rotate(-90 18 {MARGIN["top"] + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for n, (name, pts) in enumerate(sorted(series.items())):
        color = PALETTE[n % len(PALETTE)]
        pts = sorted((p for p in pts if math.isfinite(p[1])), key=lambda p: xpos(p[0]))
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<g class="series" data-name="{_esc(name)}">')
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        for x, y in pts:
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3.5" fill="{color}"/>')
        out.append("</g>")
        ly = MARGIN["top"] + 16 + 20 * n
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 28}" y="{ly + 4}" font-family="sans-serif" font-size="12">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _sweep_axis(rows) -> str:
    for axis in SWEEP_AXES:
        if len({r[axis] for r in rows}) > 1:
            return axis
    return "esn0_db"


def _axis_value(row, axis):
    v = row[axis]
    return 0.0 if v == "" else float(v)


def _mean(vals):
    vals = [v for v in vals if math.isfinite(v)]
    return sum(vals) / len(vals) if vals else math.nan


AXIS_LABELS = {
    "esn0_db": "EsN0 (dB)",
    "tau_max": "maximum time offset",
    "phi_max": "maximum phase offset (rad)",
    "amp_sigma": "Rayleigh sigma",
    "k_active": "active devices",
}


def plot_series(rows):
    """Group rows into ``(name, series, title, xlabel, ylabel)`` chart specs."""
    axis = _sweep_axis(rows)
    feel = any(r["test_accuracy"] != "" for r in rows)
    charts = []
    if not feel:
        acc = defaultdict(list)
        for r in rows:
            acc[(r["estimator"], _axis_value(r, axis))].append(_num(r["symbol_mse"]))
        series = defaultdict(list)
        for (est, x), vals in sorted(acc.items()):
            m = _mean(vals)
            db = 10 * math.log10(m) if m > 0 else MSE_FLOOR_DB
            series[est].append((x, max(db, MSE_FLOOR_DB)))
        charts.append((f"mse-vs-{axis}", dict(series), "Sum-estimate MSE", AXIS_LABELS[axis], "symbol MSE (dB)"))
        return charts
    last = {}
    for r in rows:
        key = (r["run_id"], r["seed"], r["estimator"])
        if key not in last or int(r["round"]) > int(last[key]["round"]):
            last[key] = r
    acc = defaultdict(list)
    for r in last.values():
        acc[(r["estimator"], _axis_value(r, axis))].append(_num(r["test_accuracy"]))
    series = defaultdict(list)
    for (est, x), vals in sorted(acc.items()):
        series[est].append((x, _mean(vals)))
    charts.append((f"accuracy-vs-{axis}", dict(series), "Final test accuracy", AXIS_LABELS[axis], "test accuracy"))
    per_point = defaultdict(lambda: defaultdict(list))
    for r in rows:
        per_point[r["run_id"]][(r["estimator"], int(r["round"]))].append(_num(r["test_accuracy"]))
    for run_id in sorted(per_point):
        series = defaultdict(list)
        for (est, rnd), vals in sorted(per_point[run_id].items()):
            series[est].append((float(rnd), _mean(vals)))
        charts.append((f"accuracy-vs-round-{run_id}", dict(series), f"Accuracy per round ({run_id})", "round", "test accuracy"))
    return charts


def emit_plots(csv_path, out_dir=None) -> list:
    """Render every chart family the CSV supports; returns the written paths.

    Nothing is written when the CSV is empty or its header does not match.
    """
    rows = read_rows(csv_path)
    out_dir = out_dir or os.path.dirname(os.path.abspath(csv_path))
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, series, title, xl, yl in plot_series(rows):
        path = os.path.join(out_dir, f"{name}.svg")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(render_svg(series, title=title, xlabel=xl, ylabel=yl))
        paths.append(path)
    return paths
