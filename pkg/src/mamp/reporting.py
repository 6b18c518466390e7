"""Text tables and static SVG plots from metrics and ablation CSVs.

Output depends only on the input files: numbers are formatted with fixed
precision and nothing time- or environment-dependent is written.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

from mamp.ablation import ABLATION_HEADER
from mamp.errors import DataError
from mamp.train import METRICS_HEADER

KINDS = ("loss-curve", "ratio-sweep", "schedule-sweep", "table")
SWEEP_AXIS = {"ratio-sweep": "mask_ratio", "schedule-sweep": "schedule"}
DEFAULT_LABELS = {
    "loss-curve": ("epoch", "pre-training loss"),
    "ratio-sweep": ("mask ratio", "probe top-1 (%)"),
    "schedule-sweep": ("pre-training epochs", "probe top-1 (%)"),
    "table": ("setting", "probe top-1 (%)"),
}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

WIDTH, HEIGHT = 480, 320
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 16, 16, 48


@dataclass
class ReportSpec:
    inputs: list[Path]
    kind: str
    out: Path
    x_label: str = ""
    y_label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown report kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if not self.inputs:
            raise ValueError("report needs at least one input CSV")
        self.inputs = [Path(p) for p in self.inputs]
        self.out = Path(self.out)
        default_x, default_y = DEFAULT_LABELS[self.kind]
        self.x_label = self.x_label or default_x
        self.y_label = self.y_label or default_y


@dataclass
class Series:
    name: str
    x: list[float] = field(default_factory=list)
    y: list[float] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# CSV parsing


def _read_rows(path: Path, header: list[str]) -> list[dict]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    reader = csv.reader(text.splitlines())
    first = next(reader, None)
    if first != header:
        raise DataError(f"{path}:1: expected header {','.join(header)}, got {','.join(first or [])}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        rows.append({"_line": lineno, **dict(zip(header, row))})
    return rows


def _number(path: Path, row: dict, key: str) -> float:
    try:
        return float(row[key])
    except ValueError:
        raise DataError(f"{path}:{row['_line']}: {key} {row[key]!r} is not a number") from None


def loss_series(path: Path, metric: str = "loss", split: str = "train") -> Series:
    s = Series(path.stem if path.stem != "metrics" else path.parent.name or path.stem)
    for row in _read_rows(path, METRICS_HEADER):
        epoch = _number(path, row, "epoch")
        value = _number(path, row, "value")
        if row["metric"] == metric and row["split"] == split:
            s.x.append(epoch)
            s.y.append(value)
    return s


def sweep_series(path: Path, axis: str | None) -> Series:
    s = Series(path.stem)
    points = []
    for row in _read_rows(path, ABLATION_HEADER):
        if axis is not None and row["axis"] != axis:
            continue
        x = _number(path, row, "setting") if axis is not None else float(len(points))
        label = row["setting"] if axis is not None else f"{row['axis']}={row['setting']}"
        points.append((x, _number(path, row, "probe_top1"), label))
    if axis is not None:
        points.sort(key=lambda p: p[0])
    for x, y, label in points:
        s.x.append(x)
        s.y.append(y)
        s.labels.append(label)
    return s


def load_series(request: ReportSpec) -> list[Series]:
    if request.kind == "loss-curve":
        series = [loss_series(p) for p in request.inputs]
    else:
        series = [sweep_series(p, SWEEP_AXIS.get(request.kind)) for p in request.inputs]
    if request.kind == "table":
        merged = Series("ablation")
        for s in series:
            merged.labels.extend(s.labels)
            merged.y.extend(s.y)
        merged.x = [float(i) for i in range(len(merged.y))]
        series = [merged]
    if not any(s.x for s in series):
        raise DataError("no data")
    return [s for s in series if s.x]


# ---------------------------------------------------------------------------
# text table


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def text_table(series: list[Series], request: ReportSpec) -> str:
    header = ["series", request.x_label, request.y_label]
    body = []
    for s in series:
        for i, (x, y) in enumerate(zip(s.x, s.y)):
            xs = s.labels[i] if s.labels and request.kind == "table" else _fmt(x).rstrip("0").rstrip(".")
            body.append([s.name, xs, _fmt(y)])
    widths = [max(len(r[c]) for r in [header] + body) for c in range(3)]
    lines = ["  ".join(cell.ljust(w) if c == 0 else cell.rjust(w)
                       for c, (cell, w) in enumerate(zip(r, widths))).rstrip()
             for r in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# SVG


def _range(values: list[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        pad = abs(lo) * 0.05 or 1.0
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


class _Frame:
    def __init__(self, xs: list[float], ys: list[float]):
        self.x0, self.x1 = _range(xs)
        self.y0, self.y1 = _range(ys)
        self.w = WIDTH - MARGIN_L - MARGIN_R
        self.h = HEIGHT - MARGIN_T - MARGIN_B

    def px(self, x: float) -> float:
        return MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * self.w

    def py(self, y: float) -> float:
        return MARGIN_T + (self.y1 - y) / (self.y1 - self.y0) * self.h


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _axes(f: _Frame, request: ReportSpec, xticks: list[tuple[float, str]] | None = None) -> list[str]:
    bottom, right = MARGIN_T + f.h, MARGIN_L + f.w
    out = [f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{f.w}" height="{f.h}" '
           f'fill="none" stroke="#333"/>']
    for y in _ticks(f.y0, f.y1):
        py = f.py(y)
        out.append(f'<line x1="{MARGIN_L - 4}" y1="{py:.2f}" x2="{MARGIN_L}" y2="{py:.2f}" stroke="#333"/>')
        out.append(f'<text x="{MARGIN_L - 6}" y="{py + 3:.2f}" text-anchor="end">{y:.3g}</text>')
    if xticks is None:
        xticks = [(x, f"{x:.3g}") for x in _ticks(f.x0, f.x1)]
    for x, label in xticks:
        px = f.px(x)
        out.append(f'<line x1="{px:.2f}" y1="{bottom}" x2="{px:.2f}" y2="{bottom + 4}" stroke="#333"/>')
        out.append(f'<text x="{px:.2f}" y="{bottom + 16}" text-anchor="middle">{escape(label)}</text>')
    out.append(f'<text x="{(MARGIN_L + right) / 2:.2f}" y="{HEIGHT - 10}" '
               f'text-anchor="middle">{escape(request.x_label)}</text>')
    out.append(f'<text x="14" y="{MARGIN_T + f.h / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {MARGIN_T + f.h / 2:.2f})">{escape(request.y_label)}</text>')
    return out


def _legend(series: list[Series]) -> list[str]:
    out = []
    for i, s in enumerate(series):
        y = MARGIN_T + 14 + 14 * i
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<line x1="{WIDTH - 150}" y1="{y - 4}" x2="{WIDTH - 134}" y2="{y - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - 130}" y="{y}">{escape(s.name)}</text>')
    return out


def line_plot(series: list[Series], request: ReportSpec, markers: bool) -> list[str]:
    f = _Frame([x for s in series for x in s.x], [y for s in series for y in s.y])
    xticks = None
    if markers:
        settings = sorted({x for s in series for x in s.x})
        xticks = [(x, f"{x:g}") for x in settings]
    out = _axes(f, request, xticks)
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{f.px(x):.2f},{f.py(y):.2f}" for x, y in zip(s.x, s.y))
        out.append(f'<polyline class="series" points="{pts}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')
        if markers:
            out.extend(f'<circle class="point" cx="{f.px(x):.2f}" cy="{f.py(y):.2f}" r="3" fill="{color}"/>'
                       for x, y in zip(s.x, s.y))
    if len(series) > 1:
        out.extend(_legend(series))
    return out


def bar_plot(series: list[Series], request: ReportSpec) -> list[str]:
    s = series[0]
    ys = s.y + [0.0]
    f = _Frame([-0.5, len(s.y) - 0.5], ys)
    out = _axes(f, request, [(float(i), label) for i, label in enumerate(s.labels)])
    base = f.py(max(f.y0, 0.0))
    bar = 0.6 * f.w / len(s.y)
    for i, y in enumerate(s.y):
        top = f.py(y)
        out.append(f'<rect class="bar" x="{f.px(i) - bar / 2:.2f}" y="{min(top, base):.2f}" '
                   f'width="{bar:.2f}" height="{abs(base - top):.2f}" fill="{PALETTE[0]}"/>')
    return out


def svg_document(series: list[Series], request: ReportSpec) -> str:
    if request.kind == "table":
        body = bar_plot(series, request)
    else:
        body = line_plot(series, request, markers=request.kind != "loss-curve")
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="10">')
    return "\n".join([head, f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>', *body, "</svg>"]) + "\n"


def render_report(request: ReportSpec) -> tuple[Path, Path]:
    """Write ``request.out`` (SVG) and a text table next to it (``.txt``)."""
    series = load_series(request)
    svg_path = request.out if request.out.suffix == ".svg" else request.out.with_suffix(".svg")
    txt_path = svg_path.with_suffix(".txt")
    svg_path.parent.mkdir(parents=True, exist_ok=True)
    svg_path.write_text(svg_document(series, request), encoding="utf-8")
    txt_path.write_text(text_table(series, request), encoding="utf-8")
    return svg_path, txt_path
