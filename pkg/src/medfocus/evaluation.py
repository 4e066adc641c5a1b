"""Box-level attribution metrics and the batch evaluation harness.

Predicted and ground-truth boxes are compared as rasterized union regions, so
overlapping boxes inside one list are not double counted.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

from .core import WORK_SIZE, BBox, VqaSample, union_pixel_count

log = logging.getLogger(__name__)

__all__ = [
    "METRICS",
    "UnevaluableError",
    "MetricRecord",
    "EvalReport",
    "score_boxes",
    "evaluate",
    "evaluate_records",
]

METRICS = ("iou", "precision", "recall", "f1")


class UnevaluableError(ValueError):
    """The sample has no ground-truth region to compare against."""


@dataclass(frozen=True)
class MetricRecord:
    sample_id: str
    iou: float
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return asdict(self)


def score_boxes(pred, gt, dims: tuple[int, int] = WORK_SIZE, sample_id: str = "") -> MetricRecord:
    """Union-region overlap between ``pred`` and ``gt`` box lists on an (h, w) grid."""
    gt = list(gt)
    pred = list(pred)
    if not gt:
        raise UnevaluableError(f"sample {sample_id!r} has no ground-truth boxes")
    if not pred:
        return MetricRecord(sample_id, 0.0, 0.0, 0.0, 0.0)
    inter, union, a_pred, a_gt = union_pixel_count(pred, gt, dims)
    p = inter / a_pred
    r = inter / a_gt
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return MetricRecord(sample_id, inter / union, p, r, f1)


@dataclass
class EvalReport:
    per_sample: list[MetricRecord]
    means: dict
    counts: dict
    failures: list[str]

    def to_dict(self) -> dict:
        return {
            "means": self.means,
            "per_sample": [r.to_dict() for r in self.per_sample],
            "counts": self.counts,
            "failures": self.failures,
        }


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def evaluate_records(samples: dict[str, VqaSample], predictions: dict[str, list[BBox]],
                     dims: tuple[int, int] = WORK_SIZE, failures: list[str] | None = None) -> EvalReport:
    """Score already-parsed samples against predictions keyed by sample_id.

    Samples without a prediction count as empty predictions.
    """
    failures = list(failures or [])
    records = []
    for sid in sorted(samples):
        try:
            records.append(score_boxes(predictions.get(sid, []), samples[sid].gt_boxes, dims, sid))
        except ValueError as exc:
            failures.append(f"{sid}: {exc}")
    for sid in sorted(set(predictions) - set(samples)):
        failures.append(f"{sid}: prediction references an unknown sample")
    means = {m: _mean([getattr(r, m) for r in records]) for m in METRICS}
    failures.sort()
    counts = {"evaluated": len(records), "failed": len(failures)}
    return EvalReport(records, means, counts, failures)


def _read_sample_rows(path, failures: list[str]) -> dict[str, VqaSample]:
    out, dup = {}, set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                s = VqaSample.from_dict(json.loads(line))
            except (KeyError, ValueError, TypeError) as exc:
                failures.append(f"{path}:{lineno}: malformed sample: {exc}")
                continue
            if s.sample_id in out:
                dup.add(s.sample_id)
            out[s.sample_id] = s
    for sid in sorted(dup):
        failures.append(f"{sid}: duplicate sample rows")
        del out[sid]
    return out


def _read_predictions(path, failures: list[str]) -> dict[str, list[BBox]]:
    with open(path) as fh:
        rows = json.load(fh)
    if not isinstance(rows, list):
        raise ValueError(f"{path}: predictions must be a JSON list")
    out, dup = {}, set()
    for i, row in enumerate(rows):
        try:
            sid = str(row["sample_id"])
            boxes = [BBox.from_list(b) for b in row["boxes"]]
        except (KeyError, ValueError, TypeError) as exc:
            failures.append(f"prediction #{i}: malformed row: {exc}")
            continue
        if sid in out:
            dup.add(sid)
        out[sid] = boxes
    for sid in sorted(dup):
        # keeping either copy would make the result depend on row order
        failures.append(f"{sid}: duplicate prediction rows")
        del out[sid]
    return out


def evaluate(samples_path, predictions_path, dims: tuple[int, int] = WORK_SIZE,
             out=None) -> EvalReport:
    """Join a JSONL sample file with a predictions JSON file and score every sample.

    Malformed rows, duplicate ids and predictions for unknown samples are
    skipped and counted as failures.  Writes the JSON report to ``out`` if given.
    """
    failures: list[str] = []
    samples = _read_sample_rows(samples_path, failures)
    preds = _read_predictions(predictions_path, failures)
    report = evaluate_records(samples, preds, dims, failures)
    for msg in report.failures:
        log.warning("eval: %s", msg)
    if out is not None:
        with open(out, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report
