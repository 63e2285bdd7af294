"""Deterministic SVG charts (grouped bars and line charts with a shaded band).

Output is plain text built with fixed two-decimal coordinates, so identical
inputs give identical bytes.
"""

from __future__ import annotations

import logging
import os
from html import escape

log = logging.getLogger(__name__)

WIDTH, HEIGHT = 640, 360
MARGIN = dict(left=60, right=150, top=40, bottom=50)
PALETTE = ("#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f")


def _f(v: float) -> str:
    return f"{v:.2f}"


def _frame(title: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="14" y="{HEIGHT / 2:.2f}" transform="rotate(-90 14 {HEIGHT / 2:.2f})" '
        f'text-anchor="middle">{escape(ylabel)}</text>',
    ]


def _axes(lo: float, hi: float) -> tuple[list[str], callable]:
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    span = hi - lo if hi > lo else 1.0

    def ymap(v: float) -> float:
        return y0 - (v - lo) / span * (y0 - y1)

    parts = [f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
             f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>']
    for i in range(5):
        v = lo + span * i / 4
        y = ymap(v)
        parts.append(f'<line x1="{x0 - 4}" y1="{_f(y)}" x2="{x0}" y2="{_f(y)}" stroke="black"/>')
        parts.append(f'<text x="{x0 - 6}" y="{_f(y + 4)}" text-anchor="end">{v:.3g}</text>')
    return parts, ymap


def _legend(names: list[str]) -> list[str]:
    x = WIDTH - MARGIN["right"] + 12
    out = []
    for i, name in enumerate(names):
        y = MARGIN["top"] + 16 * i
        out.append(f'<rect x="{x}" y="{y}" width="10" height="10" fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{x + 14}" y="{y + 9}">{escape(name)}</text>')
    return out


def grouped_bars_svg(groups: list[str], series: list[str], values: dict, title: str = "",
                     ylabel: str = "") -> str:
    """One cluster per group, one bar per series; ``values[(group, series)]``."""
    present = [v for v in values.values()]
    lo = min(0.0, min(present, default=0.0))
    hi = max(present, default=1.0)
    parts = _frame(title, ylabel)
    axes, ymap = _axes(lo, hi if hi > lo else lo + 1.0)
    parts += axes
    plot_w = WIDTH - MARGIN["left"] - MARGIN["right"]
    slot = plot_w / max(len(groups), 1)
    bar_w = slot * 0.8 / max(len(series), 1)
    for gi, group in enumerate(groups):
        gx = MARGIN["left"] + gi * slot + slot * 0.1
        for si, name in enumerate(series):
            if (group, name) not in values:
                continue
            v = values[(group, name)]
            top, base = ymap(max(v, 0.0)), ymap(min(v, 0.0))
            parts.append(
                f'<rect x="{_f(gx + si * bar_w)}" y="{_f(top)}" width="{_f(bar_w)}" '
                f'height="{_f(base - top)}" fill="{PALETTE[si % len(PALETTE)]}"/>'
            )
        parts.append(f'<text x="{_f(gx + slot * 0.4)}" y="{HEIGHT - MARGIN["bottom"] + 16}" '
                     f'text-anchor="middle">{escape(group)}</text>')
    parts += _legend(series)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_chart_svg(xs: list[float], curves: dict[str, list[float]], band: tuple[str, str] | None = None,
                   title: str = "", ylabel: str = "", xlabel: str = "") -> str:
    """Line per curve over categorical x positions; ``band`` shades the area between two curves."""
    allv = [v for ys in curves.values() for v in ys]
    lo, hi = min(allv, default=0.0), max(allv, default=1.0)
    pad = (hi - lo) * 0.05 or 0.5
    lo, hi = lo - pad, hi + pad
    parts = _frame(title, ylabel)
    axes, ymap = _axes(lo, hi)
    parts += axes
    plot_w = WIDTH - MARGIN["left"] - MARGIN["right"]
    n = len(xs)

    def xmap(i: int) -> float:
        return MARGIN["left"] + (plot_w * (i + 0.5) / n if n else 0.0)

    if band is not None:
        upper, lower = curves[band[0]], curves[band[1]]
        pts = [(xmap(i), ymap(v)) for i, v in enumerate(upper)]
        pts += [(xmap(i), ymap(v)) for i, v in reversed(list(enumerate(lower)))]
        parts.append('<polygon class="band" fill="#bbbbbb" fill-opacity="0.5" points="'
                     + " ".join(f"{_f(x)},{_f(y)}" for x, y in pts) + '"/>')
    for ci, (name, ys) in enumerate(curves.items()):
        pts = " ".join(f"{_f(xmap(i))},{_f(ymap(v))}" for i, v in enumerate(ys))
        parts.append(f'<polyline class="curve" fill="none" stroke="{PALETTE[ci % len(PALETTE)]}" '
                     f'stroke-width="2" points="{pts}"/>')
    for i, x in enumerate(xs):
        parts.append(f'<text x="{_f(xmap(i))}" y="{HEIGHT - MARGIN["bottom"] + 16}" '
                     f'text-anchor="middle">{escape(str(x))}</text>')
    if xlabel:
        parts.append(f'<text x="{_f(MARGIN["left"] + plot_w / 2)}" y="{HEIGHT - 12}" '
                     f'text-anchor="middle">{escape(xlabel)}</text>')
    parts += _legend(list(curves))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write(path: str, text: str) -> str:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def emit_plots(report, out_dir: str, stem: str = "accuracy") -> list[str]:
    """Grouped accuracy bars (attack x defense) for an ``EvalReport``; empty report is a no-op."""
    if not report.rows:
        log.warning("empty report; no plot written")
        return []
    os.makedirs(out_dir, exist_ok=True)
    groups = list(dict.fromkeys(r.attack for r in report.rows))
    series = list(dict.fromkeys(r.defense for r in report.rows))
    values = {(r.attack, r.defense): r.adversarial_acc for r in report.rows}
    svg = grouped_bars_svg(groups, series, values, "Accuracy under attack", "accuracy (%)")
    return [_write(os.path.join(out_dir, f"{stem}.svg"), svg)]


def poc_svg(curves) -> str:
    named = {
        "I(x, h(x))": curves.mi_natural,
        "I(x~, h(x~))": curves.mi_adversarial,
        "I(x, h(x~))": curves.mi_cross,
    }
    return line_chart_svg(curves.steps, named, band=("I(x~, h(x~))", "I(x, h(x~))"),
                          title="Standard MI under attack", ylabel="offset MI (nats)", xlabel="PGD iterations")


def separation_svg(rows) -> str:
    groups = list(dict.fromkeys(f"{r.mode}/{r.estimator}" for r in rows))
    values = {(f"{r.mode}/{r.estimator}", f"{r.input} input"): r.normalized_mean for r in rows}
    return grouped_bars_svg(groups, ["natural input", "adversarial input"], values,
                            "Estimated MI by training mode", "offset MI (nats)")
