"""Report bundles: CSV tables, JSON-lines logs, SVG line charts and a hashed manifest."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

MANIFEST = "manifest.json"
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


@dataclass
class Chart:
    name: str
    title: str
    xlabel: str
    ylabel: str
    series: dict[str, tuple[list[float], list[float]]]
    markers_only: bool = False


class JsonLinesHandler(logging.Handler):
    """One JSON object per record; message plus any ``extra`` fields, no timestamps."""

    _skip = set(vars(logging.makeLogRecord({}))) | {"message", "asctime"}

    def __init__(self, path: Path):
        super().__init__()
        self.fh = open(path, "w", encoding="utf-8", newline="\n")

    def emit(self, record):
        payload = {"level": record.levelname, "logger": record.name, "msg": record.getMessage()}
        payload.update({k: v for k, v in vars(record).items() if k not in self._skip})
        self.fh.write(json.dumps(payload, sort_keys=True, default=str) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()
        super().close()


@dataclass
class ReportBundle:
    root: Path
    preset: str
    config_hash: str = ""
    dataset_hash: str = ""
    artifacts: list[str] = field(default_factory=list)
    charts: list[Chart] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add(self, rel: str) -> Path:
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return self.root / rel

    def write_text(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        return self.add(rel)

    def write_csv(self, rel: str, header: Sequence[str], rows) -> Path:
        return self.write_text(rel, csv_text(header, rows))

    def chart(self, name, title, xlabel, ylabel, series, markers_only=False) -> None:
        self.charts.append(Chart(name, title, xlabel, ylabel, series, markers_only))

    def finalize(self) -> dict:
        emit_plots(self)
        self.write_text("summary.json", json.dumps(self.summary, indent=2, sort_keys=True, default=_jsonable) + "\n")
        for rel in ("log.jsonl",):
            if (self.root / rel).exists():
                self.add(rel)
        manifest = {
            "preset": self.preset,
            "config_hash": self.config_hash,
            "dataset_hash": self.dataset_hash,
            "artifacts": {rel: sha256_file(self.root / rel) for rel in sorted(self.artifacts)},
        }
        (self.root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return manifest


def _jsonable(v):
    try:
        import numpy as np

        if isinstance(v, np.generic):
            return v.item()
        if isinstance(v, np.ndarray):
            return v.tolist()
    except ImportError:  # pragma: no cover
        pass
    return str(v)


def verify_manifest(root: str | Path) -> list[str]:
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        return [f"cannot read manifest: {exc}"]
    problems = []
    for rel, digest in manifest.get("artifacts", {}).items():
        p = root / rel
        if not p.exists():
            problems.append(f"missing artifact {rel}")
        elif sha256_file(p) != digest:
            problems.append(f"hash mismatch for {rel}")
    return problems


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _label(v: float) -> str:
    if v == 0 or 1e-3 <= abs(v) < 1e4:
        return f"{v:.4g}"
    return f"{v:.2e}"


def render_svg(chart: Chart, width: int = 640, height: int = 400) -> str:
    pts = [(x, y) for xs, ys in chart.series.values() for x, y in zip(xs, ys)
           if math.isfinite(x) and math.isfinite(y)]
    if not chart.series or not pts:
        raise ValueError(f"chart {chart.name!r} has no finite points")
    left, right, top, bottom = 70, 160, 40, 50
    pw, ph = width - left - right, height - top - bottom
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2 - right / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(chart.title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{_fmt(sx(t))}" y1="{top + ph}" x2="{_fmt(sx(t))}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{_fmt(sx(t))}" y="{top + ph + 16}" text-anchor="middle">{escape(_label(t))}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 4}" y1="{_fmt(sy(t))}" x2="{left}" y2="{_fmt(sy(t))}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{_fmt(sy(t) + 4)}" text-anchor="end">{escape(_label(t))}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(chart.xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(chart.ylabel)}</text>')
    for n, (name, (xs, ys)) in enumerate(chart.series.items()):
        color = PALETTE[n % len(PALETTE)]
        good = [(x, y) for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y)]
        if not good:
            raise ValueError(f"series {name!r} in chart {chart.name!r} is empty")
        if len(good) == 1 or chart.markers_only:
            for x, y in good:
                out.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="2.5" fill="{color}"/>')
        else:
            coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in good)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = top + 14 + 18 * n
        out.append(f'<rect x="{left + pw + 12}" y="{ly - 9}" width="12" height="10" fill="{color}"/>')
        out.append(f'<text x="{left + pw + 30}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(bundle: ReportBundle) -> list[Path]:
    paths = []
    for chart in bundle.charts:
        paths.append(bundle.write_text(f"plots/{chart.name}.svg", render_svg(chart)))
    return paths
