"""Report rendering: standalone SVG figures and small CSV/JSON readers.

Everything is plain-text SVG assembled by hand so reports build without
a display server or plotting dependency, and byte-identically for
identical inputs.
"""

from __future__ import annotations

import csv
import json
import os

from .errors import DataError
from .layout import AttentionMask, SegmentLayout, build_uga_mask, mask_to_text

EXPERT_COLORS = {"UND": "#4878cf", "GEN": "#6acc65", "ACT": "#d65f5f"}
SERIES_COLORS = {"loss_total": "#333333", "loss_gen": "#6acc65", "loss_act": "#d65f5f"}


# ---- svg primitives --------------------------------------------------------


def _svg(width: int, height: int, body: list) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">'
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>"]) + "\n"


def _rect(x, y, w, h, fill, extra: str = "") -> str:
    return f'<rect x="{x:.6g}" y="{y:.6g}" width="{w:.6g}" height="{h:.6g}" fill="{fill}"{extra}/>'


def _line(x1, y1, x2, y2, stroke="#888", width=1.0) -> str:
    return f'<line x1="{x1:.6g}" y1="{y1:.6g}" x2="{x2:.6g}" y2="{y2:.6g}" stroke="{stroke}" stroke-width="{width:.6g}"/>'


def _text(x, y, s, size=11, anchor="start", fill="#222") -> str:
    return f'<text x="{x:.6g}" y="{y:.6g}" font-size="{size}" font-family="sans-serif" text-anchor="{anchor}" fill="{fill}">{s}</text>'


def _circle(x, y, r, fill) -> str:
    return f'<circle cx="{x:.6g}" cy="{y:.6g}" r="{r:.6g}" fill="{fill}" fill-opacity="0.8"/>'


def _ticks(lo: float, hi: float, n: int = 5) -> list:
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    return [lo + span * i / (n - 1) for i in range(n)]


# ---- mask figure -----------------------------------------------------------


def mask_svg(layout: SegmentLayout, mask: AttentionMask = None, cell: int = 10) -> str:
    """Heat grid of the progressive mask, colored by the query's expert."""
    mask = mask or build_uga_mask(layout)
    n = layout.total_len
    tags = ("UND", "GEN", "ACT")
    experts = layout.token_experts()
    pad = 46
    body = []
    for q in range(n):
        for k in range(n):
            color = EXPERT_COLORS[tags[experts[q]]] if mask.allow[q, k] else "#1a1a2a"
            body.append(_rect(pad + k * cell, pad + q * cell, cell - 1, cell - 1, color))
    at = 0
    for seg in layout.segments:
        label = seg.expert if seg.scale_id is None else f"{seg.expert}{seg.scale_id}"
        mid = pad + (at + seg.length / 2) * cell
        body.append(_text(mid, pad - 8, label, anchor="middle"))
        body.append(_text(pad - 8, mid + 4, label, anchor="end"))
        if at:
            body.append(_line(pad + at * cell - 0.5, pad, pad + at * cell - 0.5, pad + n * cell, "#ffffff", 1.5))
            body.append(_line(pad, pad + at * cell - 0.5, pad + n * cell, pad + at * cell - 0.5, "#ffffff", 1.5))
        at += seg.length
    body.append(_text(pad, pad + n * cell + 18, "rows: queries, columns: keys; dark = blocked", size=10))
    return _svg(2 * pad + n * cell, 2 * pad + n * cell + 24, body)


def mask_text(layout: SegmentLayout) -> str:
    return mask_to_text(build_uga_mask(layout))


# ---- scatter panels --------------------------------------------------------


def correlation_svg(points_per_tau: dict, corr_per_tau: dict = None) -> str:
    """One scatter panel per tolerance; x is image token accuracy, y is
    chunk accuracy at that tolerance."""
    taus = sorted(points_per_tau)
    pw, ph, pad = 220, 200, 44
    width = pad + len(taus) * (pw + pad)
    height = ph + 2 * pad + 10
    body = []
    for i, tau in enumerate(taus):
        x0 = pad + i * (pw + pad)
        y0 = pad
        pts = points_per_tau[tau]
        body.append(f'<g class="panel" data-tau="{tau:g}">')
        body.append(_rect(x0, y0, pw, ph, "none", ' stroke="#333"'))
        xs = [p[0] for p in pts] or [0.0, 1.0]
        ys = [p[1] for p in pts] or [0.0, 1.0]
        lo_x, hi_x = min(xs), max(xs)
        lo_y, hi_y = min(ys), max(ys)
        if hi_x - lo_x < 1e-9:
            lo_x, hi_x = lo_x - 0.05, hi_x + 0.05
        if hi_y - lo_y < 1e-9:
            lo_y, hi_y = lo_y - 0.05, hi_y + 0.05
        sx = lambda v: x0 + (v - lo_x) / (hi_x - lo_x) * pw
        sy = lambda v: y0 + ph - (v - lo_y) / (hi_y - lo_y) * ph
        for tick in _ticks(lo_x, hi_x, 4):
            body.append(_line(sx(tick), y0 + ph, sx(tick), y0 + ph + 4, "#333"))
            body.append(_text(sx(tick), y0 + ph + 16, f"{tick:.2f}", size=9, anchor="middle"))
        for tick in _ticks(lo_y, hi_y, 4):
            body.append(_line(x0 - 4, sy(tick), x0, sy(tick), "#333"))
            body.append(_text(x0 - 6, sy(tick) + 3, f"{tick:.2f}", size=9, anchor="end"))
        for x, y in pts:
            body.append(_circle(sx(x), sy(y), 3.5, "#4878cf"))
        title = f"tau = {tau:g}"
        if corr_per_tau and tau in corr_per_tau:
            title += f"  (r = {corr_per_tau[tau][0]:.2f})"
        body.append(_text(x0 + pw / 2, y0 - 10, title, anchor="middle"))
        body.append(_text(x0 + pw / 2, y0 + ph + 32, "image token accuracy", size=10, anchor="middle"))
        body.append("</g>")
    return _svg(width, height, body)


# ---- curves and bars -------------------------------------------------------


def loss_curves_svg(rows_per_stage: dict) -> str:
    """Training curves; one panel per stage, series per loss column."""
    stages = sorted(rows_per_stage)
    pw, ph, pad = 260, 180, 44
    width = pad + max(1, len(stages)) * (pw + pad)
    height = ph + 2 * pad + 20
    body = []
    for i, stage in enumerate(stages):
        rows = rows_per_stage[stage]
        x0, y0 = pad + i * (pw + pad), pad
        body.append(f'<g class="stage" data-stage="{stage}">')
        body.append(_rect(x0, y0, pw, ph, "none", ' stroke="#333"'))
        steps = [r["step"] for r in rows] or [0, 1]
        lo_s, hi_s = min(steps), max(steps)
        if hi_s == lo_s:
            hi_s = lo_s + 1
        vals = [r[k] for r in rows for k in SERIES_COLORS if r.get(k) is not None]
        lo_v, hi_v = (min(vals), max(vals)) if vals else (0.0, 1.0)
        if hi_v - lo_v < 1e-12:
            hi_v = lo_v + 1.0
        sx = lambda v: x0 + (v - lo_s) / (hi_s - lo_s) * pw
        sy = lambda v: y0 + ph - (v - lo_v) / (hi_v - lo_v) * ph
        for name, color in SERIES_COLORS.items():
            pts = [(sx(r["step"]), sy(r[name])) for r in rows if r.get(name) is not None]
            if len(pts) >= 2:
                path = " ".join(f"{x:.6g},{y:.6g}" for x, y in pts)
                body.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        body.append(_text(x0 + pw / 2, y0 - 10, f"stage {stage}", anchor="middle"))
        for tick in _ticks(lo_v, hi_v, 4):
            body.append(_text(x0 - 6, sy(tick) + 3, f"{tick:.3g}", size=9, anchor="end"))
        body.append(_text(x0 + pw / 2, y0 + ph + 16, "step", size=10, anchor="middle"))
        body.append("</g>")
    legend_x = pad
    for j, (name, color) in enumerate(SERIES_COLORS.items()):
        body.append(_rect(legend_x + j * 110, height - 22, 10, 10, color))
        body.append(_text(legend_x + j * 110 + 14, height - 13, name, size=10))
    return _svg(width, height, body)


def ablation_bars_svg(rates: dict) -> str:
    """Bar chart of closed-loop success per variant."""
    names = list(rates)
    pw = max(240, 70 * len(names))
    ph, pad = 200, 50
    body = [_rect(pad, pad, pw, ph, "none", ' stroke="#333"')]
    for i, name in enumerate(names):
        v = rates[name]
        x = pad + (i + 0.5) * pw / len(names)
        h = v * ph
        body.append(_rect(x - 18, pad + ph - h, 36, h, "#4878cf", ' class="bar"'))
        body.append(_text(x, pad + ph + 14, name, size=10, anchor="middle"))
        body.append(_text(x, pad + ph - h - 5, f"{v:.2f}", size=10, anchor="middle"))
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = pad + ph - tick * ph
        body.append(_line(pad - 4, y, pad, y, "#333"))
        body.append(_text(pad - 6, y + 3, f"{tick:.2f}", size=9, anchor="end"))
    body.append(_text(pad + pw / 2, pad - 10, "closed-loop success rate", anchor="middle"))
    return _svg(pw + 2 * pad, ph + 2 * pad + 10, body)


def placeholder_svg(message: str) -> str:
    return _svg(420, 120, [_text(210, 64, message, size=14, anchor="middle", fill="#666")])


# ---- readers and orchestration ---------------------------------------------


def read_train_log(path) -> list:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append(
                {
                    "step": int(rec["step"]),
                    "lr": float(rec["lr"]),
                    "loss_total": float(rec["loss_total"]),
                    "loss_gen": float(rec["loss_gen"]),
                    "loss_act": float(rec["loss_act"]),
                    "wall_ms": float(rec["wall_ms"]),
                }
            )
    return rows


def read_eval_csv(path) -> list:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append({k: (int(v) if k == "step" else float(v)) for k, v in rec.items()})
    return rows


def render_report(out_dir, eval_csv=None, correlation_json=None, train_logs=None, ablation_rates=None) -> list:
    """Write the SVG bundle; returns the list of files written.

    Missing optional inputs degrade to placeholders; an explicitly given
    but absent file is an error listing the absent paths.
    """
    missing = [str(p) for p in (eval_csv, correlation_json, *(train_logs or {}).values()) if p and not os.path.exists(str(p))]
    if missing:
        raise DataError("missing report inputs: " + ", ".join(sorted(missing)))
    os.makedirs(str(out_dir), exist_ok=True)
    written = []

    def emit(name, svg):
        path = os.path.join(str(out_dir), name)
        with open(path, "w") as f:
            f.write(svg)
        written.append(path)

    if eval_csv:
        rows = read_eval_csv(eval_csv)
        corr = {}
        if correlation_json:
            with open(correlation_json) as f:
                doc = json.load(f)
            corr = {float(t): (v["pearson"], v["spearman"]) for t, v in doc.get("taus", {}).items()}
        if rows:
            points = {tau: [(r["image_token_acc"], r[f"acc_{tau:g}"]) for r in rows] for tau in (0.01, 0.02, 0.05)}
            emit("correlation.svg", correlation_svg(points, corr))
        else:
            emit("correlation.svg", placeholder_svg("no data: eval set is empty"))
    if train_logs:
        rows_per_stage = {stage: read_train_log(path) for stage, path in train_logs.items()}
        emit("loss_curves.svg", loss_curves_svg(rows_per_stage))
    if ablation_rates:
        emit("ablation.svg", ablation_bars_svg(ablation_rates))
    return written
