"""Classification quality: confusion matrix, one-vs-rest class metrics,
macro averages, and report rendering (JSON, CSV, SVG).

Percentages are rounded half-up to two decimals; metrics whose denominator
is zero are undefined and printed as "n/a". All rendered artifacts are
byte-deterministic for a given matrix.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import InputError
from .ingest import CLASS_NAMES, _atomic_write_bytes
from .model import SpectroEmgNet


def confusion(true_labels, predicted, n_classes: int = 3) -> np.ndarray:
    """Counts with true class along rows and predicted class along columns."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if true_labels.shape != predicted.shape or true_labels.ndim != 1:
        raise ValueError("labels and predictions must be matching 1-D arrays")
    for name, arr in (("labels", true_labels), ("predictions", predicted)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true_labels, predicted), 1)
    return cm


@dataclass
class ClassMetrics:
    """One-vs-rest metrics for a single class; None marks an undefined value."""

    sensitivity: float | None
    specificity: float | None
    precision: float | None
    f1: float | None
    binary_accuracy: float | None


def class_metrics(cm: np.ndarray, idx: int) -> ClassMetrics:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    tp = int(cm[idx, idx])
    fn = int(cm[idx].sum()) - tp
    fp = int(cm[:, idx].sum()) - tp
    tn = total - tp - fn - fp
    sens = tp / (tp + fn) if tp + fn > 0 else None
    spec = tn / (tn + fp) if tn + fp > 0 else None
    prec = tp / (tp + fp) if tp + fp > 0 else None
    if sens is None or prec is None or sens + prec == 0:
        f1 = None
    else:
        f1 = 2.0 * prec * sens / (prec + sens)
    acc = (tp + tn) / total if total > 0 else None
    return ClassMetrics(sens, spec, prec, f1, acc)


def overall_accuracy(cm: np.ndarray) -> float | None:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    return int(np.trace(cm)) / total if total > 0 else None


def _macro(cm: np.ndarray, attr: str) -> float | None:
    values = [getattr(class_metrics(cm, i), attr) for i in range(cm.shape[0])]
    if any(v is None for v in values):
        return None
    return float(sum(values)) / len(values)


def macro_sensitivity(cm: np.ndarray) -> float | None:
    return _macro(cm, "sensitivity")


def macro_specificity(cm: np.ndarray) -> float | None:
    return _macro(cm, "specificity")


def percent(value: float | None) -> str:
    """Two-decimal percentage, rounded half-up; undefined values print n/a."""
    if value is None:
        return "n/a"
    return str((Decimal(float(value)) * 100).quantize(Decimal("0.01"),
                                                      rounding=ROUND_HALF_UP))


def _entry(value: float | None) -> dict:
    return {"value": value if value is None else float(value),
            "percent": percent(value)}


def build_report(cm: np.ndarray, class_names=CLASS_NAMES, config: dict | None = None) -> dict:
    cm = np.asarray(cm, dtype=np.int64)
    per_class = {}
    for idx, name in enumerate(class_names):
        m = class_metrics(cm, idx)
        per_class[name] = {
            "sensitivity": _entry(m.sensitivity),
            "specificity": _entry(m.specificity),
            "precision": _entry(m.precision),
            "f1": _entry(m.f1),
            "binary_accuracy": _entry(m.binary_accuracy),
        }
    report = {
        "total": int(cm.sum()),
        "counts": {name: int(cm[i].sum()) for i, name in enumerate(class_names)},
        "confusion": cm.tolist(),
        "overall_accuracy": _entry(overall_accuracy(cm)),
        "macro_sensitivity": _entry(macro_sensitivity(cm)),
        "macro_specificity": _entry(macro_specificity(cm)),
        "per_class": per_class,
    }
    if config is not None:
        report["config"] = config
    return report


def write_report(path: str, report: dict) -> None:
    blob = json.dumps(report, indent=2, sort_keys=True) + "\n"
    _atomic_write_bytes(path, blob.encode("utf-8"))


def evaluate(model: SpectroEmgNet, x: np.ndarray, y: np.ndarray,
             batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Batched inference; returns (predictions, confusion matrix)."""
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    preds = np.concatenate([
        np.argmax(model.forward_probs(x[i:i + batch_size], train=False), axis=1)
        for i in range(0, x.shape[0], batch_size)])
    return preds, confusion(y, preds, model.config.n_classes)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def confusion_csv(cm: np.ndarray, class_names=CLASS_NAMES) -> str:
    lines = ["true\\pred," + ",".join(class_names)]
    for i, name in enumerate(class_names):
        lines.append(name + "," + ",".join(str(int(v)) for v in cm[i]))
    return "\n".join(lines) + "\n"


def read_confusion_csv(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise InputError(f"confusion file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or not rows[0][0].startswith("true"):
        raise InputError(f"malformed confusion file {path}")
    n = len(rows[0]) - 1
    if n < 1 or len(rows) != n + 1:
        raise InputError(f"malformed confusion file {path}")
    try:
        return np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64)
    except ValueError as exc:
        raise InputError(f"malformed confusion file {path}: {exc}") from exc


def confusion_svg(cm: np.ndarray, class_names=CLASS_NAMES) -> str:
    """A fixed-layout heat map grid; output bytes depend only on the matrix."""
    cm = np.asarray(cm, dtype=np.int64)
    n = cm.shape[0]
    cell, left, top, pad = 72, 104, 64, 16
    width = left + n * cell + pad
    height = top + n * cell + pad
    peak = max(int(cm.max()), 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="13">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + n * cell // 2}" y="18" text-anchor="middle">predicted</text>',
        f'<text x="14" y="{top + n * cell // 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + n * cell // 2})">true</text>',
    ]
    for j, name in enumerate(class_names):
        x = left + j * cell + cell // 2
        parts.append(f'<text x="{x}" y="{top - 10}" text-anchor="middle">{name}</text>')
    for i, name in enumerate(class_names):
        y = top + i * cell + cell // 2 + 4
        parts.append(f'<text x="{left - 8}" y="{y}" text-anchor="end">{name}</text>')
    for i in range(n):
        for j in range(n):
            t = int(cm[i, j]) / peak
            r = 255 - round(185 * t)
            g = 255 - round(125 * t)
            b = 255 - round(75 * t)
            x0, y0 = left + j * cell, top + i * cell
            parts.append(f'<rect x="{x0}" y="{y0}" width="{cell}" height="{cell}" '
                         f'fill="rgb({r},{g},{b})" stroke="black"/>')
            ink = "white" if t > 0.55 else "black"
            parts.append(f'<text x="{x0 + cell // 2}" y="{y0 + cell // 2 + 4}" '
                         f'text-anchor="middle" fill="{ink}">{int(cm[i, j])}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_confusion(cm: np.ndarray, csv_path: str, svg_path: str,
                    class_names=CLASS_NAMES) -> None:
    _atomic_write_bytes(csv_path, confusion_csv(cm, class_names).encode("utf-8"))
    _atomic_write_bytes(svg_path, confusion_svg(cm, class_names).encode("utf-8"))
