"""Confusion counts, sensitivity, ROC/AUC and comparison tables.

Malignant (label 1) is the positive class throughout. Metrics are stored as
fractions and rendered as percentages with two decimals.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import EvaluationError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class RocCurve:
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    thresholds: tuple[float, ...]

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.fpr, self.tpr, self.thresholds))


def _binary(values, name: str) -> np.ndarray:
    arr = np.asarray(values).astype(np.int64).ravel()
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise EvaluationError(f"{name} must be binary (0/1)")
    return arr


def confusion(labels: Sequence[int], predictions: Sequence[int]) -> ConfusionCounts:
    y = _binary(labels, "labels")
    p = _binary(predictions, "predictions")
    if y.shape != p.shape:
        raise EvaluationError(f"length mismatch: {y.size} labels vs {p.size} predictions")
    return ConfusionCounts(
        tp=int(np.sum((y == 1) & (p == 1))),
        fp=int(np.sum((y == 0) & (p == 1))),
        tn=int(np.sum((y == 0) & (p == 0))),
        fn=int(np.sum((y == 1) & (p == 0))),
    )


def sensitivity(counts: ConfusionCounts) -> float:
    positives = counts.tp + counts.fn
    if positives == 0:
        raise EvaluationError("sensitivity is undefined without positive samples")
    return counts.tp / positives


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """Empirical ROC with one step per distinct score.

    A sample counts as positive when ``score >= threshold``. Equal scores share a
    single threshold, so a tied block of positives and negatives becomes one
    diagonal segment. The first and last thresholds are sentinels one unit above
    the maximum and below the minimum score.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary(labels, "labels")
    if s.shape != y.shape:
        raise EvaluationError(f"length mismatch: {s.size} scores vs {y.size} labels")
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    distinct = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    fpr = np.r_[0.0, fps / n_neg, 1.0]
    tpr = np.r_[0.0, tps / n_pos, 1.0]
    thr = np.r_[s[0] + 1.0, s[distinct], s[-1] - 1.0]
    return RocCurve(tuple(fpr.tolist()), tuple(tpr.tolist()), tuple(thr.tolist()))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the (fpr, tpr) polyline."""
    x = np.asarray(curve.fpr)
    y = np.asarray(curve.tpr)
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


@dataclass
class EvalReport:
    counts: ConfusionCounts
    sensitivity: float
    auc: float
    roc: RocCurve
    per_sample_scores: list[tuple[str, float, int]]
    config_fingerprint: str = ""
    method: str = ""
    threshold: float = 0.5
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def fn(self) -> int:
        return self.counts.fn

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "config_fingerprint": self.config_fingerprint,
            "threshold": self.threshold,
            "counts": asdict(self.counts),
            "sensitivity": self.sensitivity,
            "auc": self.auc,
            "roc": [list(p) for p in self.roc.points],
            "per_sample_scores": [
                {"id": i, "p_malignant": p, "label": int(lab)} for i, p, lab in self.per_sample_scores
            ],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvalReport":
        roc = d["roc"]
        return cls(
            counts=ConfusionCounts(**d["counts"]),
            sensitivity=float(d["sensitivity"]),
            auc=float(d["auc"]),
            roc=RocCurve(*(tuple(float(p[k]) for p in roc) for k in range(3))),
            per_sample_scores=[(r["id"], float(r["p_malignant"]), int(r["label"])) for r in d["per_sample_scores"]],
            config_fingerprint=d.get("config_fingerprint", ""),
            method=d.get("method", ""),
            threshold=float(d.get("threshold", 0.5)),
            metadata=d.get("metadata", {}),
        )

    def write(self, directory: str | Path) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        json_path = directory / "eval_report.json"
        json_path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        roc_path = directory / "roc.csv"
        with roc_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("fpr", "tpr", "threshold"))
            w.writerows(self.roc.points)
        return json_path, roc_path


def read_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def evaluate(
    ids: Sequence[str],
    scores: Sequence[float],
    labels: Sequence[int],
    threshold: float = 0.5,
    method: str = "",
    config_fingerprint: str = "",
) -> EvalReport:
    """Build a full report from per-sample malignant probabilities."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels, "labels")
    preds = (s >= threshold).astype(np.int64)
    counts = confusion(y, preds)
    curve = roc_curve(s, y)
    return EvalReport(
        counts=counts,
        sensitivity=sensitivity(counts),
        auc=auc(curve),
        roc=curve,
        per_sample_scores=[(str(i), float(p), int(lab)) for i, p, lab in zip(ids, s, y)],
        config_fingerprint=config_fingerprint,
        method=method,
        threshold=threshold,
    )


def fingerprint(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# Published ISIC-2016 results, (method, AUC %, sensitivity %, FN); None where not reported.
REFERENCE_ROWS: tuple[tuple[str, float, float, int | None], ...] = (
    ("ISIC-2016 challenge top entry (reference)", 80.40, 50.70, None),
    ("Residual net, no segmentation (reference)", 78.20, 42.70, None),
    ("Residual net, with segmentation (reference)", 78.30, 54.70, None),
    ("VGG-GAP (reference)", 79.08, 84.46, 55),
    ("VGG-GAP + Augment-5x (reference)", 78.81, 85.34, 51),
    ("VGG-GAP + Augment-10x (reference)", 79.56, 86.09, 47),
    ("MelaNet (reference)", 81.18, 91.76, 22),
)


@dataclass
class ComparisonTable:
    rows: list[tuple[str, float, float, int | None]]
    roc_overlay: dict[str, list[tuple[float, float]]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("method", "auc_pct", "sensitivity_pct", "fn"))
        for name, a, s, fn in self.rows:
            w.writerow((name, f"{a:.2f}", f"{s:.2f}", "" if fn is None else fn))
        return buf.getvalue()

    def roc_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("method", "fpr", "tpr"))
        for name, pts in self.roc_overlay.items():
            w.writerows((name, x, y) for x, y in pts)
        return buf.getvalue()

    def render(self) -> str:
        width = max([len("Method")] + [len(r[0]) for r in self.rows])
        lines = [f"{'Method':<{width}}  {'AUC (%)':>8}  {'Sensitivity (%)':>15}  {'FN':>4}"]
        lines.append("-" * len(lines[0]))
        for name, a, s, fn in self.rows:
            lines.append(f"{name:<{width}}  {a:>8.2f}  {s:>15.2f}  {'--' if fn is None else fn:>4}")
        return "\n".join(lines)


def compare_report(reports: Sequence[EvalReport], include_reference: bool = False) -> ComparisonTable:
    rows = [
        (r.method or f"run {i + 1}", round(100.0 * r.auc, 2), round(100.0 * r.sensitivity, 2), r.counts.fn)
        for i, r in enumerate(reports)
    ]
    overlay = {
        row[0]: list(zip(r.roc.fpr, r.roc.tpr)) for row, r in zip(rows, reports)
    }
    if include_reference:
        rows.extend(REFERENCE_ROWS)
    return ComparisonTable(rows, overlay)
