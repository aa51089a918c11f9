"""Confusion-matrix metrics, rank-based AUROC and ROC curve export (positive class: AD)."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidArgumentError

POSITIVE = "AD"


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    auroc: float = float("nan")

    def as_dict(self) -> dict:
        return asdict(self)


def _binary(values) -> np.ndarray:
    arr = np.asarray(list(values))
    if arr.dtype.kind in "US":
        bad = ~np.isin(arr, ("AD", "CN"))
        if bad.any():
            raise InvalidArgumentError(f"labels must be AD/CN, got {set(arr[bad])}")
        return arr == POSITIVE
    return arr.astype(float) > 0


def confusion_metrics(predictions, labels) -> MetricsReport:
    """Accuracy, precision, recall and F1; zero denominators give 0."""
    p = _binary(predictions)
    y = _binary(labels)
    if p.shape != y.shape or p.size == 0:
        raise InvalidArgumentError("predictions and labels must be nonempty and equal length")
    tp = int(np.sum(p & y))
    fp = int(np.sum(p & ~y))
    tn = int(np.sum(~p & ~y))
    fn = int(np.sum(~p & y))
    n = p.size
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport((tp + tn) / n, precision, recall, f1, tp, fp, tn, fn)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with average ranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if s.shape != y.shape:
        raise InvalidArgumentError("scores and labels must be equal length")
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgumentError("AUROC needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(scores, labels) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    report = confusion_metrics(np.where(scores >= 0, "AD", "CN"), labels)
    report.auroc = auroc(scores, labels)
    return report


def roc_points(scores, labels) -> list[tuple[float, float]]:
    """(fpr, tpr) pairs for thresholds at each distinct score, high to low."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgumentError("ROC needs both classes")
    pts = [(0.0, 0.0)]
    for thr in np.unique(s)[::-1]:
        above = s >= thr
        pts.append((float(np.sum(above & ~y)) / n_neg, float(np.sum(above & y)) / n_pos))
    return pts


def trapezoid_area(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def emit_roc_svg(curves: dict, path, title: str = "ROC") -> None:
    """Write ``{label: points}`` as a standalone SVG with the chance diagonal."""
    size, pad = 400, 50
    span = size - 2 * pad

    def xy(fpr, tpr):
        return pad + fpr * span, size - pad - tpr * span

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
             f'<text x="{size / 2}" y="{pad / 2}" text-anchor="middle" font-size="14">{title}</text>',
             f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>',
             '<polyline class="chance" points="{} {}" fill="none" stroke="gray" stroke-dasharray="4 4"/>'
             .format("%.2f,%.2f" % xy(0, 0), "%.2f,%.2f" % xy(1, 1)),
             f'<text x="{size / 2}" y="{size - 12}" text-anchor="middle" font-size="12">False positive rate</text>',
             f'<text x="14" y="{size / 2}" text-anchor="middle" font-size="12" '
             f'transform="rotate(-90 14 {size / 2})">True positive rate</text>']
    for i, (label, pts) in enumerate(curves.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join("%.2f,%.2f" % xy(f, t) for f, t in pts)
        parts.append(f'<polyline class="roc" data-label="{label}" points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{size - pad - 5}" y="{size - pad - 10 - 16 * i}" text-anchor="end" '
                     f'font-size="12" fill="{color}">{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
