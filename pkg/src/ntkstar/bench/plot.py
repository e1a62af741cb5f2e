"""Dependency-free SVG chart of final loss against width."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from statistics import median

from .harness import CSV_COLUMNS, INF

WIDTH, HEIGHT = 800, 600
LEFT, RIGHT, TOP, BOTTOM = 80, 190, 50, 70
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


class CsvFormatError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def read_final_losses(csv_path) -> dict[str, dict[str, float]]:
    """``{model_kind: {width_label: median final loss over seeds}}``.

    Uses the eval loss when present, otherwise the train loss.
    """
    groups: dict[str, dict[str, list[float]]] = {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            raise CsvFormatError(1, f"expected header {','.join(CSV_COLUMNS)}")
        for row in reader:
            line = reader.line_num
            if len(row) != len(CSV_COLUMNS):
                raise CsvFormatError(line, f"expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            rec = dict(zip(CSV_COLUMNS, row))
            width = rec["width"]
            if width != INF:
                try:
                    if int(width) < 1:
                        raise ValueError
                except ValueError:
                    raise CsvFormatError(line, f"bad width {width!r}") from None
            raw = rec["eval_loss"] or rec["train_loss"]
            try:
                loss = float(raw)
            except ValueError:
                raise CsvFormatError(line, f"bad loss {raw!r}") from None
            groups.setdefault(rec["model_kind"], {}).setdefault(width, []).append(loss)
    return {k: {w: median(v) for w, v in ws.items()} for k, ws in groups.items()}


def _nice(v: float) -> str:
    return f"{v:.4g}"


def render_svg(series: dict[str, dict[str, float]]) -> str:
    finite = sorted({int(w) for s in series.values() for w in s if w != INF})
    has_inf = any(INF in s for s in series.values())
    xs = [math.log2(w) for w in finite]
    x_lo = min(xs) if xs else 0.0
    x_hi = max(xs) if xs else 0.0
    inf_x = x_hi + 1.0 if xs else 0.0
    if has_inf:
        x_hi = inf_x
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 1.0, x_hi + 1.0
    losses = [v for s in series.values() for v in s.values()]
    y_lo = min(losses) if losses else 0.0
    y_hi = max(losses) if losses else 1.0
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(xv):
        return LEFT + (xv - x_lo) / (x_hi - x_lo) * pw

    def py(yv):
        return TOP + (y_hi - yv) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="28" text-anchor="middle" font-family="sans-serif" '
        f'font-size="16">Final loss by width</text>',
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
    ]
    ticks = [(math.log2(w), str(w)) for w in finite]
    if has_inf:
        ticks.append((inf_x, "∞"))
    for xv, label in ticks:
        X = px(xv)
        out.append(f'<line x1="{X:.2f}" y1="{TOP + ph}" x2="{X:.2f}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(
            f'<text x="{X:.2f}" y="{TOP + ph + 20}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="12">{label}</text>'
        )
    for i in range(5):
        yv = y_lo + (y_hi - y_lo) * i / 4
        Y = py(yv)
        out.append(f'<line x1="{LEFT - 5}" y1="{Y:.2f}" x2="{LEFT}" y2="{Y:.2f}" stroke="black"/>')
        out.append(
            f'<text x="{LEFT - 8}" y="{Y + 4:.2f}" text-anchor="end" font-family="sans-serif" '
            f'font-size="12">{_nice(yv)}</text>'
        )
    out.append(
        f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 20}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="13">width (log2 scale)</text>'
    )
    out.append(
        f'<text x="20" y="{TOP + ph / 2:.2f}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="13" transform="rotate(-90 20 {TOP + ph / 2:.2f})">final loss</text>'
    )

    for i, kind in enumerate(sorted(series)):
        color = COLORS[i % len(COLORS)]
        pts = sorted(
            ((inf_x if w == INF else math.log2(int(w))), v) for w, v in series[kind].items()
        )
        coords = [(px(xv), py(yv)) for xv, yv in pts]
        if len(coords) > 1:
            path = " ".join(f"{X:.2f},{Y:.2f}" for X, Y in coords)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for X, Y in coords:
            out.append(f'<circle cx="{X:.2f}" cy="{Y:.2f}" r="4" fill="{color}"/>')
        ly = TOP + 10 + 22 * i
        lx = WIDTH - RIGHT + 20
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(
            f'<text x="{lx + 26}" y="{ly + 4}" font-family="sans-serif" font-size="12">{_escape(kind)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(csv_path, svg_path=None) -> str:
    """Render ``csv_path`` (run CSV schema) and write it to ``svg_path`` if given."""
    svg = render_svg(read_final_losses(csv_path))
    if svg_path is not None:
        Path(svg_path).write_text(svg, encoding="utf-8")
    return svg
