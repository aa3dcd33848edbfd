"""Change-point localization on unseen series with a calibrated model.

Every cycle is classified healthy/faulty by the one-class SVM; the change
point is the split whose implied step labeling has the lowest cross-entropy
against those per-cycle labels, i.e. the split with the fewest disagreeing
cycles (earliest split on ties).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import svm
from .dataset import Normalizer, TimeSeriesInstance, apply_normalizer
from .errors import KneepointError

__all__ = [
    "DetectionReport",
    "DetectionFailure",
    "predict_series",
    "smooth_labels",
    "infer_change_point",
    "detect_batch",
    "format_reports_csv",
    "format_loss_curve_csv",
]

DEFAULT_EPS = 1e-7


@dataclass(frozen=True)
class DetectionReport:
    """Localization result for one unit.

    `labels` are the per-cycle predictions the sweep consumed (smoothed when
    window > 1); `loss_curve[c - 1]` is the sweep loss of candidate split c.
    """

    unit_id: int
    change_cycle: int
    life_fraction: float
    labels: np.ndarray
    loss_curve: np.ndarray
    window: int

    @property
    def cycles(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class DetectionFailure:
    unit_id: int
    error: str


def _feature_rows(model, instance: TimeSeriesInstance, normalizer: Optional[Normalizer]):
    if normalizer is not None:
        return apply_normalizer(normalizer, instance)
    return instance.sensors[:, list(model.feature_mask)]


def predict_series(
    model: svm.TrainedModel,
    instance: TimeSeriesInstance,
    normalizer: Optional[Normalizer] = None,
) -> np.ndarray:
    """Per-cycle labels: 1 where the model accepts the cycle as healthy."""
    rows = _feature_rows(model, instance, normalizer)
    return (svm.decision_values(model, rows) >= 0.0).astype(np.int8)


def smooth_labels(labels, window: int = 1) -> np.ndarray:
    """Sliding-window majority vote; windows shrink at the edges, ties keep
    the original label."""
    labels = np.asarray(labels, dtype=np.int8)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be an odd count >= 1, got {window}")
    t = len(labels)
    if window > t:
        raise ValueError(f"window {window} longer than the series ({t})")
    if window == 1:
        return labels.copy()
    half = window // 2
    out = labels.copy()
    for i in range(t):
        chunk = labels[max(0, i - half): i + half + 1]
        ones = int(chunk.sum())
        zeros = len(chunk) - ones
        if ones != zeros:
            out[i] = 1 if ones > zeros else 0
    return out


def infer_change_point(labels, eps: float = DEFAULT_EPS):
    """Earliest split minimizing the cross-entropy sweep loss.

    Returns (change_cycle, loss_curve); loss_curve[c - 1] equals
    log_loss(step labels with change at c, predicted labels clipped by eps).
    """
    labels = np.asarray(labels)
    t = len(labels)
    if t < 2:
        raise ValueError(f"need at least 2 cycles to place a change point, got {t}")
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError("labels must be 0 or 1")
    ones_prefix = np.cumsum(labels)[:-1]  # ones in cycles 1..c for c = 1..T-1
    c = np.arange(1, t)
    ones_total = int(labels.sum())
    mismatches = (c - ones_prefix) + (ones_total - ones_prefix)
    miss_cost = -math.log(eps)
    match_cost = -math.log1p(-eps)
    loss_curve = (mismatches * miss_cost + (t - mismatches) * match_cost) / t
    change = int(np.argmin(loss_curve)) + 1  # argmin takes the earliest minimum
    return change, loss_curve


def detect_batch(
    model: svm.TrainedModel,
    instances,
    normalizer: Optional[Normalizer] = None,
    window: int = 1,
    eps: float = DEFAULT_EPS,
):
    """Localize change points for many units.

    Returns (reports, failures); per-unit errors are collected in the
    failures list instead of aborting the batch. Both lists preserve the
    input order.
    """
    reports, failures = [], []
    for instance in instances:
        try:
            raw = predict_series(model, instance, normalizer)
            labels = smooth_labels(raw, window)
            change, loss_curve = infer_change_point(labels, eps)
        except (KneepointError, ValueError) as exc:
            failures.append(DetectionFailure(unit_id=instance.unit_id, error=str(exc)))
            continue
        reports.append(
            DetectionReport(
                unit_id=instance.unit_id,
                change_cycle=change,
                life_fraction=change / instance.cycles,
                labels=labels,
                loss_curve=loss_curve,
                window=window,
            )
        )
    return reports, failures


def format_reports_csv(reports) -> str:
    lines = ["unit,change_cycle,T,life_fraction,window"]
    for r in reports:
        lines.append(f"{r.unit_id},{r.change_cycle},{r.cycles},{r.life_fraction!r},{r.window}")
    return "\n".join(lines) + "\n"


def format_loss_curve_csv(report: DetectionReport) -> str:
    lines = ["candidate_c,loss"]
    for c, loss in enumerate(report.loss_curve, start=1):
        lines.append(f"{c},{float(loss)!r}")
    return "\n".join(lines) + "\n"


def parse_reports_csv(lines):
    """Read a report CSV back as {unit: (change_cycle, T, life_fraction, window)}."""
    from .errors import DataError

    it = iter(lines)
    try:
        header = next(it)
    except StopIteration:
        raise DataError("report file is empty") from None
    expected = ["unit", "change_cycle", "T", "life_fraction", "window"]
    if [c.strip() for c in header.strip().split(",")] != expected:
        raise DataError(f"report header must be '{','.join(expected)}'")
    out = {}
    for line_no, raw in enumerate(it, start=2):
        if not raw.strip():
            continue
        tokens = raw.strip().split(",")
        if len(tokens) != 5:
            raise DataError(f"line {line_no}: expected 5 columns")
        try:
            unit = int(tokens[0])
            out[unit] = (int(tokens[1]), int(tokens[2]), float(tokens[3]), int(tokens[4]))
        except ValueError:
            raise DataError(f"line {line_no}: malformed report row") from None
    return out
