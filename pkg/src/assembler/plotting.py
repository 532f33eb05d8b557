"""Deterministic SVG emission: loss curves and anchor-cloud scatter views.

SVGs are assembled from formatted strings (no plotting library), so the
same inputs always produce byte-identical files.
"""

from __future__ import annotations

import csv

import numpy as np

from .anchors import AnchorSet

PALETTE = [
    "#1f77b4", "#aec7e8", "#ff7f0e", "#ffbb78", "#2ca02c",
    "#98df8a", "#d62728", "#ff9896", "#9467bd", "#c5b0d5",
    "#8c564b", "#c49c94", "#e377c2", "#f7b6d2", "#7f7f7f",
    "#c7c7c7", "#bcbd22", "#dbdb8d", "#17becf", "#9edae5",
]


def part_color(pid: int) -> str:
    return PALETTE[pid % len(PALETTE)]


def read_loss_csv(path) -> tuple[list, list]:
    """(steps, losses) from a loss CSV; header row optional."""
    xs, ys = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError("empty CSV")
    header = rows[0]
    start = 0
    xi, yi = 0, 1
    try:
        float(header[0])
    except (ValueError, IndexError):
        start = 1
        if "loss" in header:
            yi = header.index("loss")
        if "step" in header:
            xi = header.index("step")
    for row in rows[start:]:
        if not row:
            continue
        try:
            xs.append(float(row[xi]))
            ys.append(float(row[yi]))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"malformed CSV row {row!r}") from exc
    if not xs:
        raise ValueError("CSV contains no data rows")
    return xs, ys


def loss_curve_svg(csv_path, out_path) -> None:
    """Log-y loss curve as a single polyline."""
    xs, ys = read_loss_csv(csv_path)
    w, h, pad = 640, 400, 50
    x0, x1 = min(xs), max(xs)
    ly = [np.log10(max(y, 1e-12)) for y in ys]
    y0, y1 = min(ly), max(ly)
    xs_px = [pad + (w - 2 * pad) * ((x - x0) / (x1 - x0) if x1 > x0 else 0.5) for x in xs]
    ys_px = [h - pad - (h - 2 * pad) * ((y - y0) / (y1 - y0) if y1 > y0 else 0.5) for y in ly]
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs_px, ys_px))
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<text x="{w // 2}" y="{h - 12}" text-anchor="middle" font-size="13">step</text>',
        f'<text x="14" y="{h // 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 14 {h // 2})">loss (log)</text>',
        f'<polyline points="{pts}" fill="none" stroke="{PALETTE[0]}" stroke-width="1.5"/>',
        "</svg>",
    ]
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def anchor_views_svg(anchor_set: AnchorSet, out_path) -> None:
    """Orthographic 3-view scatter (xy, xz, yz) colored by part id."""
    view_px, pad = 220, 20
    w = 3 * view_px + 4 * pad
    h = view_px + 2 * pad + 20 * ((anchor_set.num_parts + 4) // 5) + 20
    pts = anchor_set.points
    lo, hi = pts.min(), pts.max()
    span = max(hi - lo, 1e-9)

    def px(v):
        return (v - lo) / span * (view_px - 10) + 5

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
    ]
    for vi, (a, b, label) in enumerate(((0, 1, "xy"), (0, 2, "xz"), (1, 2, "yz"))):
        ox = pad + vi * (view_px + pad)
        lines.append(f'<rect x="{ox}" y="{pad}" width="{view_px}" height="{view_px}" '
                     'fill="none" stroke="#888"/>')
        lines.append(f'<text x="{ox + 4}" y="{pad + 14}" font-size="12">{label}</text>')
        for pid, (start, length) in enumerate(anchor_set.part_spans):
            color = part_color(pid)
            for p in pts[start:start + length]:
                cx = ox + px(p[a])
                cy = pad + view_px - px(p[b])
                lines.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2" fill="{color}"/>')
    ly = pad + view_px + 16
    for pid in range(anchor_set.num_parts):
        lx = pad + (pid % 5) * 120
        yy = ly + (pid // 5) * 20
        lines.append(f'<rect x="{lx}" y="{yy - 10}" width="12" height="12" '
                     f'fill="{part_color(pid)}"/>')
        lines.append(f'<text x="{lx + 16}" y="{yy}" font-size="12">part {pid}</text>')
    lines.append("</svg>")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
