"""Deep segmentation and change-detection scoring.

Ground-truth labels use the CD2014 encoding. Foreground (255) is positive;
static background (0) and hard shadow (50) are negative; outside-ROI (85) and
unknown (170) pixels are not scored.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data
from .errors import InvalidMaskError, ShapeError, UndefinedMetricsError
from .model import NetworkSpec, segment_probabilities

LABEL_BACKGROUND = 0
LABEL_SHADOW = 50
LABEL_OUTSIDE_ROI = 85
LABEL_UNKNOWN = 170
LABEL_FOREGROUND = 255
VALID_LABELS = (LABEL_BACKGROUND, LABEL_SHADOW, LABEL_OUTSIDE_ROI, LABEL_UNKNOWN, LABEL_FOREGROUND)

DEFAULT_THRESHOLD = 0.8


@dataclass(frozen=True)
class ConfusionReport:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionReport") -> "ConfusionReport":
        return ConfusionReport(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @property
    def scored(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def empty(self) -> bool:
        return self.scored == 0

    # zero-denominator conventions: precision, recall and F fall back to 0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f_measure(self) -> float:
        p, r = self.precision, self.recall
        return 2.0 * (r * p) / (r + p) if (r + p) else 0.0

    @property
    def pwc(self) -> float:
        if self.empty:
            raise UndefinedMetricsError("no scored pixels")
        return 100.0 * (self.fn + self.fp) / self.scored

    def to_dict(self) -> dict:
        out = {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}
        if self.empty:
            out.update(precision=None, recall=None, f_measure=None, pwc=None)
        else:
            out.update(zip(("precision", "recall", "f_measure", "pwc"), metrics(self)))
        return out


def metrics(report: ConfusionReport) -> tuple:
    """``(precision, recall, f_measure, pwc)``; raises on an empty report."""
    if report.empty:
        raise UndefinedMetricsError("metrics are undefined without scored pixels")
    return report.precision, report.recall, report.f_measure, report.pwc


def binarize(probabilities: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Foreground where probability >= threshold; returns an (h, w) bool mask."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    p = np.asarray(probabilities)
    if p.ndim == 4:
        if p.shape[:2] != (1, 1):
            raise ShapeError(f"expected a single (1, 1, h, w) probability map, got {p.shape}")
        p = p[0, 0]
    return p >= threshold


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionReport:
    """Pixel counts of a binary prediction against CD2014 (or 0/255) labels."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    valid = np.isin(gt, VALID_LABELS)
    if not valid.all():
        bad = np.unique(gt[~valid])[:5]
        raise InvalidMaskError(f"unknown ground-truth labels {bad.tolist()}")
    positive = gt == LABEL_FOREGROUND
    negative = (gt == LABEL_BACKGROUND) | (gt == LABEL_SHADOW)
    return ConfusionReport(
        tp=int(np.count_nonzero(pred & positive)),
        tn=int(np.count_nonzero(~pred & negative)),
        fp=int(np.count_nonzero(pred & negative)),
        fn=int(np.count_nonzero(~pred & positive)),
    )


def predict_probabilities(frame: np.ndarray, bcnn: NetworkSpec, scnn: NetworkSpec, mean: float,
                          patch_size: int | None = None, overlap: float = 0.5) -> np.ndarray:
    """(h, w) foreground probabilities for one uint8 frame.

    Full-frame by default; with ``patch_size`` the frame is cut into
    overlapping patches whose outputs are averaged back together.
    """
    f = data.normalize(frame, mean)
    if patch_size is None:
        return segment_probabilities(f, bcnn, scnn, "infer")[0, 0]
    ps = data.extract_patches(f, patch_size, overlap)
    ps.patches = segment_probabilities(ps.patches, bcnn, scnn, "infer")
    return data.reassemble(ps)[0]


@dataclass
class VideoEvaluation:
    frame_numbers: list
    per_frame: list  # ConfusionReport per frame
    pooled: ConfusionReport

    def to_dict(self) -> dict:
        return {
            "frames": [{"number": int(n), **r.to_dict()}
                       for n, r in zip(self.frame_numbers, self.per_frame)],
            "pooled": self.pooled.to_dict(),
        }


def pool(reports) -> ConfusionReport:
    """Sum raw counts; frames without scored pixels contribute nothing."""
    total = ConfusionReport()
    for r in reports:
        if not r.empty:
            total = total + r
    return total


def evaluate_video(frames, gts, bcnn: NetworkSpec, scnn: NetworkSpec, mean: float,
                   threshold: float = DEFAULT_THRESHOLD, frame_numbers=None,
                   patch_size: int | None = None, overlap: float = 0.5,
                   on_mask=None) -> VideoEvaluation:
    """Segment and score every frame. ``on_mask(number, mask)`` sees each binary mask."""
    frames, gts = list(frames), list(gts)
    if len(frames) != len(gts):
        raise ShapeError(f"{len(frames)} frames but {len(gts)} ground-truth masks")
    numbers = list(frame_numbers) if frame_numbers is not None else list(range(len(frames)))
    per_frame = []
    for n, frame, gt in zip(numbers, frames, gts):
        probs = predict_probabilities(frame, bcnn, scnn, mean, patch_size, overlap)
        mask = binarize(probs, threshold)
        if on_mask is not None:
            on_mask(n, mask)
        per_frame.append(confusion(mask, gt))
    return VideoEvaluation(numbers, per_frame, pool(per_frame))


# ---------------------------------------------------------------------------
# aggregation

METRIC_NAMES = ("precision", "recall", "f_measure", "pwc")


def aggregate(results: dict) -> dict:
    """Category and overall metric tables.

    ``results`` maps category -> {video -> ConfusionReport}. A category's metric
    is the mean of its videos' metrics; the overall metric is the mean over
    categories. Videos without scored pixels are left out.
    """
    categories = {}
    for category, videos in results.items():
        if not videos:
            raise ValueError(f"category {category!r} has no videos")
        rows = [metrics(r) for r in videos.values() if not r.empty]
        if not rows:
            raise UndefinedMetricsError(f"category {category!r} has no scored pixels")
        categories[category] = dict(zip(METRIC_NAMES, np.mean(rows, axis=0).tolist()))
    if not categories:
        raise ValueError("nothing to aggregate")
    overall = {m: float(np.mean([c[m] for c in categories.values()])) for m in METRIC_NAMES}
    return {"categories": categories, "overall": overall}


def summary_csv(tables: dict, method: str = "CRCNN") -> str:
    """One row per metric: method, metric, each category, Overall."""
    cats = list(tables["categories"])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "metric", *cats, "Overall"])
    for m in METRIC_NAMES:
        writer.writerow([method, m, *(f"{tables['categories'][c][m]:.4f}" for c in cats),
                         f"{tables['overall'][m]:.4f}"])
    return buf.getvalue()


def write_reports(out_dir, videos: dict, tables: dict, method: str = "CRCNN",
                  extra: dict | None = None) -> tuple:
    """Write ``report.json`` and ``summary.csv``; ``videos`` maps "cat/video" -> VideoEvaluation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "method": method,
        **(extra or {}),
        "videos": {k: v.to_dict() for k, v in videos.items()},
        **tables,
    }
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    csv_path = out_dir / "summary.csv"
    csv_path.write_text(summary_csv(tables, method))
    return report_path, csv_path
