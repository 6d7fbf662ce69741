"""Small deterministic SVG writers: feature scatter and line plots."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")
MARKERS = ("circle", "square", "triangle", "diamond", "cross")

W, H, PAD, LEGEND_W = 480, 400, 40, 140


def pca_2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project rows onto the top two principal axes; returns (points, component variances)."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    # fix the sign of each axis so output does not depend on the LAPACK build
    signs = np.sign(vt[:, np.argmax(np.abs(vt), axis=1)].diagonal())
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    proj = centered @ vt[:2].T
    return proj, (s[:2] ** 2) / max(len(x) - 1, 1)


def _num(v: float) -> str:
    return f"{v:.2f}"


def _marker(kind: str, x: float, y: float, color: str, r: float = 3.0) -> str:
    if kind == "circle":
        return f'<circle cx="{_num(x)}" cy="{_num(y)}" r="{r}" fill="{color}"/>'
    if kind == "square":
        return f'<rect x="{_num(x - r)}" y="{_num(y - r)}" width="{2 * r}" height="{2 * r}" fill="{color}"/>'
    if kind == "triangle":
        pts = f"{_num(x)},{_num(y - r)} {_num(x - r)},{_num(y + r)} {_num(x + r)},{_num(y + r)}"
        return f'<polygon points="{pts}" fill="{color}"/>'
    if kind == "diamond":
        pts = f"{_num(x)},{_num(y - r)} {_num(x + r)},{_num(y)} {_num(x)},{_num(y + r)} {_num(x - r)},{_num(y)}"
        return f'<polygon points="{pts}" fill="{color}"/>'
    return (f'<path d="M{_num(x - r)},{_num(y - r)}L{_num(x + r)},{_num(y + r)}'
            f'M{_num(x - r)},{_num(y + r)}L{_num(x + r)},{_num(y - r)}" stroke="{color}" stroke-width="1.5"/>')


def _frame(title: str, body: list[str], legend: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W + LEGEND_W}" height="{H}" '
            f'viewBox="0 0 {W + LEGEND_W} {H}">')
    parts = [head, f'<rect width="{W + LEGEND_W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">'
             f'{escape(title)}</text>',
             f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="#444"/>',
             *body, '<g id="legend">', *legend, "</g>", "</svg>"]
    return "\n".join(parts) + "\n"


def _scaler(lo: np.ndarray, hi: np.ndarray):
    span = np.where(hi - lo > 0, hi - lo, 1.0)

    def f(p):
        u = (p[..., 0] - lo[0]) / span[0]
        v = (p[..., 1] - lo[1]) / span[1]
        return PAD + u * (W - 2 * PAD), H - PAD - v * (H - 2 * PAD)

    return f


def scatter_svg(points: np.ndarray, classes: np.ndarray, domains: list[str] | np.ndarray,
                title: str = "features", num_classes: int | None = None) -> str:
    """Scatter of 2-d points colored by class with one marker shape per domain."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    classes = np.asarray(classes, dtype=int)
    domains = list(domains)
    dom_names = list(dict.fromkeys(domains))
    C = num_classes if num_classes is not None else (int(classes.max()) + 1 if len(classes) else 0)
    body = []
    if len(points):
        lo, hi = points.min(axis=0), points.max(axis=0)
        xs, ys = _scaler(lo, hi)(points)
        for x, y, c, d in zip(xs, ys, classes, domains):
            body.append(_marker(MARKERS[dom_names.index(d) % len(MARKERS)], x, y, PALETTE[c % len(PALETTE)]))
    legend = []
    y = PAD + 10
    for c in range(C):
        legend.append(_marker("circle", W + 15, y, PALETTE[c % len(PALETTE)]))
        legend.append(f'<text x="{W + 25}" y="{y + 4}" font-family="sans-serif" font-size="11">class {c}</text>')
        y += 18
    for k, d in enumerate(dom_names):
        legend.append(_marker(MARKERS[k % len(MARKERS)], W + 15, y, "#333"))
        legend.append(f'<text x="{W + 25}" y="{y + 4}" font-family="sans-serif" font-size="11">{escape(d)}</text>')
        y += 18
    return _frame(title, body, legend)


def line_svg(series: dict[str, tuple[list[float], list[float]]], title: str = "", xlabel: str = "",
             ylabel: str = "") -> str:
    """One polyline with point markers per named series."""
    names = list(series)
    all_pts = [np.column_stack([np.asarray(x, float), np.asarray(y, float)]) for x, y in series.values()]
    stacked = np.concatenate(all_pts) if all_pts and sum(map(len, all_pts)) else np.zeros((0, 2))
    stacked = stacked[np.all(np.isfinite(stacked), axis=1)]
    body = []
    if len(stacked):
        lo, hi = stacked.min(axis=0), stacked.max(axis=0)
        scale = _scaler(lo, hi)
        for k, pts in enumerate(all_pts):
            pts = pts[np.all(np.isfinite(pts), axis=1)]
            if not len(pts):
                continue
            color = PALETTE[k % len(PALETTE)]
            xs, ys = scale(pts)
            path = " ".join(f"{_num(a)},{_num(b)}" for a, b in zip(xs, ys))
            body.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
            body.extend(_marker("circle", a, b, color) for a, b in zip(xs, ys))
        for v, (px, _) in ((lo[0], scale(np.array([lo[0], lo[1]]))), (hi[0], scale(np.array([hi[0], lo[1]])))):
            body.append(f'<text x="{_num(px)}" y="{H - PAD + 14}" text-anchor="middle" font-family="sans-serif" '
                        f'font-size="10">{v:.3g}</text>')
        for v in (lo[1], hi[1]):
            _, py = scale(np.array([lo[0], v]))
            body.append(f'<text x="{PAD - 4}" y="{_num(py + 3)}" text-anchor="end" font-family="sans-serif" '
                        f'font-size="10">{v:.3g}</text>')
    body.append(f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-family="sans-serif" '
                f'font-size="12">{escape(xlabel)}</text>')
    body.append(f'<text x="12" y="{H / 2}" text-anchor="middle" font-family="sans-serif" font-size="12" '
                f'transform="rotate(-90 12 {H / 2})">{escape(ylabel)}</text>')
    legend = []
    for k, name in enumerate(names):
        y = PAD + 10 + 18 * k
        legend.append(f'<line x1="{W + 8}" y1="{y}" x2="{W + 22}" y2="{y}" stroke="{PALETTE[k % len(PALETTE)]}" '
                      f'stroke-width="2"/>')
        legend.append(f'<text x="{W + 27}" y="{y + 4}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    return _frame(title, body, legend)


def plot_features(net, datasets, path=None, title: str = "bottleneck features") -> str:
    """Scatter the network's features of ``datasets`` (PCA to 2-d when d > 2)."""
    datasets = list(datasets)
    rows = [d for d in datasets if len(d)]
    C = max([d.num_classes for d in datasets], default=0)
    if rows:
        feats = np.concatenate([net.embed(d.inputs) for d in rows])
        labels = np.concatenate([d.labels for d in rows])
        doms = [d.domain for d in rows for _ in range(len(d))]
        pts = feats if feats.shape[1] == 2 else pca_2d(feats)[0]
    else:
        pts, labels, doms = np.zeros((0, 2)), np.zeros(0, dtype=int), []
    svg = scatter_svg(pts, labels, doms, title=title, num_classes=C)
    if path is not None:
        Path(path).write_text(svg, encoding="utf-8")
    return svg
