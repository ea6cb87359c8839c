"""Metrics CSV I/O and static SVG line plots."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import ConfigError, DataError
from .trainer import MetricsRecord

COLUMNS = MetricsRecord.columns()
_INT_COLUMNS = {"epoch", "updates", "minibatch_loads"}


def _fmt(value) -> str:
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".17g")


def write_metrics_csv(records, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(COLUMNS)
        for rec in records:
            row = rec.as_dict()
            writer.writerow([_fmt(row[c]) for c in COLUMNS])


def read_metrics_csv(path) -> list[MetricsRecord]:
    """Parse a metrics file; errors name the file and the 1-based line."""
    path = Path(path)
    try:
        f = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    records = []
    with f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != COLUMNS:
            raise DataError(f"{path}:1: expected header {','.join(COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(COLUMNS):
                raise DataError(f"{path}:{lineno}: expected {len(COLUMNS)} fields, got {len(row)}")
            try:
                values = {c: int(v) if c in _INT_COLUMNS else float(v) for c, v in zip(COLUMNS, row)}
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            records.append(MetricsRecord(**values))
    return records


# -- plotting -------------------------------------------------------------

PANELS = (
    ("accuracy_vs_time", "wall_clock_s", "test_acc", "Test accuracy", "Wall-clock time (s)"),
    ("accuracy_vs_epoch", "epoch", "test_acc", "Test accuracy", "Epoch"),
    ("loss_vs_time", "wall_clock_s", "test_loss", "Test loss", "Wall-clock time (s)"),
    ("loss_vs_epoch", "epoch", "test_loss", "Test loss", "Epoch"),
)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")

WIDTH, HEIGHT = 560, 380
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 40, 50


@dataclass
class Curve:
    label: str
    records: list[MetricsRecord]


def curve_label(csv_path) -> str:
    """``K=.., m=..`` from the sibling manifest, else from the file name."""
    path = Path(csv_path)
    manifest = path.with_name(path.name.replace("metrics", "manifest", 1)).with_suffix(".json")
    if manifest != path and manifest.exists():
        try:
            cfg = json.loads(manifest.read_text())["config"]
            label = f"K={cfg['persistency']}, m={cfg['batch_size']}"
            return label + (" adaptive" if cfg.get("adaptive_lr") else "")
        except (ValueError, KeyError, TypeError):
            pass
    match = re.search(r"m(\d+)_K(\d+)(_adaptive)?", path.stem)
    if match:
        return f"K={match[2]}, m={match[1]}" + (" adaptive" if match[3] else "")
    return path.stem


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def _range(values) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if hi - lo < 1e-12 * max(1.0, abs(hi)):
        pad = 0.5 if hi == 0 else abs(hi) * 0.05
        return lo - pad, hi + pad
    return lo, hi


def render_svg(curves, x_key: str, y_key: str, title: str, x_label: str) -> str:
    xs = [getattr(r, x_key) for c in curves for r in c.records]
    ys = [getattr(r, y_key) for c in curves for r in c.records]
    x0, x1 = _range(xs)
    y0, y1 = _range(ys)
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{LEFT + pw / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<text x="{px(t):.1f}" y="{TOP + ph + 16}" text-anchor="middle">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{LEFT - 6}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.4g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(x_label)}</text>')
    for i, curve in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(getattr(r, x_key)):.2f},{py(getattr(r, y_key)):.2f}" for r in curve.records)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = TOP + 12 + 18 * i
        lx = LEFT + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{escape(curve.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot(csv_paths, out_dir) -> list[Path]:
    """Write the four accuracy/loss vs time/epoch panels; returns their paths."""
    csv_paths = list(csv_paths)
    if not csv_paths:
        raise ConfigError("plot needs at least one metrics CSV")
    curves = []
    for p in csv_paths:
        records = read_metrics_csv(p)
        if not records:
            raise DataError(f"{p}: no data rows")
        curves.append(Curve(curve_label(p), records))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, x_key, y_key, title, x_label in PANELS:
        target = out_dir / f"{name}.svg"
        target.write_text(render_svg(curves, x_key, y_key, title, x_label))
        written.append(target)
    return written
