"""CMC curves as a standalone SVG. Output depends only on the input curves."""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

WIDTH = 640
HEIGHT = 420
MARGIN = {"left": 60, "right": 170, "top": 20, "bottom": 50}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class PlotError(ValueError):
    pass


def read_cmc_csv(path) -> list[float]:
    """Accuracies from a ``rank,accuracy`` CSV; ranks must run 1, 2, 3, ..."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise PlotError(f"cannot read {path}: {exc}") from None
    if not rows or [c.strip() for c in rows[0]] != ["rank", "accuracy"]:
        raise PlotError(f"{path}: expected header 'rank,accuracy'")
    acc = []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            rank, value = int(row[0]), float(row[1])
        except (ValueError, IndexError):
            raise PlotError(f"{path}:{n}: malformed row {row!r}") from None
        if rank != len(acc) + 1 or not 0.0 <= value <= 1.0:
            raise PlotError(f"{path}:{n}: bad rank or accuracy in {row!r}")
        acc.append(value)
    if not acc:
        raise PlotError(f"{path}: no data rows")
    return acc


def _num(v: float) -> str:
    return f"{v:.2f}"


def cmc_svg(curves: list[tuple[str, list[float]]], title: str = "CMC") -> str:
    """SVG text with one polyline and one legend entry per ``(label, accuracies)``."""
    if not curves:
        raise PlotError("need at least one curve")
    max_rank = max(len(acc) for _, acc in curves)
    x0, y0 = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(rank: int) -> float:
        return x0 + (pw * (rank - 1) / (max_rank - 1) if max_rank > 1 else pw / 2)

    def sy(acc: float) -> float:
        return y0 + ph * (1.0 - acc)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{x0 + pw / 2:.2f}" y="14" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for i in range(6):
        acc = i / 5
        y = sy(acc)
        out.append(f'<line x1="{x0}" y1="{_num(y)}" x2="{x0 + pw}" y2="{_num(y)}" stroke="#dddddd"/>')
        out.append(f'<text x="{x0 - 6}" y="{_num(y + 4)}" text-anchor="end" font-size="11">{acc:.1f}</text>')
    ticks = range(1, max_rank + 1) if max_rank <= 10 else [1] + list(range(5, max_rank + 1, 5))
    for rank in ticks:
        x = sx(rank)
        out.append(f'<text x="{_num(x)}" y="{y0 + ph + 16}" text-anchor="middle" font-size="11">{rank}</text>')
    out.append(f'<text x="{x0 + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12">rank</text>')
    out.append(
        f'<text x="16" y="{y0 + ph / 2:.2f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {y0 + ph / 2:.2f})">accuracy</text>'
    )
    for i, (label, acc) in enumerate(curves):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{_num(sx(r))},{_num(sy(a))}" for r, a in enumerate(acc, start=1))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = y0 + 10 + 18 * i
        lx = x0 + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_files(paths, out_path, labels: list[str] | None = None, title: str = "CMC") -> Path:
    paths = [Path(p) for p in paths]
    if labels is not None and len(labels) != len(paths):
        raise PlotError("need one label per CSV")
    names = labels or [p.stem for p in paths]
    svg = cmc_svg([(n, read_cmc_csv(p)) for n, p in zip(names, paths)], title)
    out_path = Path(out_path)
    out_path.write_text(svg)
    return out_path
