"""Accuracy, availability, and outlier-rejection scoring.

Per-frame accuracy is the RMS absolute trajectory error over the estimated
robots, computed in the reference robot's frame; a sequence aggregates the
per-frame values by RMS again. Availability is the fraction of frames with a
valid output. Rejection quality is precision/recall of the kept-bearing mask
against the simulator's ground-truth labels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import core

__all__ = [
    "PrecisionRecall",
    "ate_frame",
    "ate_sequence",
    "output_rate",
    "pr_of_rejection",
    "write_metrics_csv",
    "read_metrics_csv",
    "CSV_SCHEMA_VERSION",
]

CSV_SCHEMA_VERSION = 1
_CSV_COLUMNS = ("schema", "trial", "tier", "metric", "value")


@dataclass(frozen=True)
class PrecisionRecall:
    precision: float
    recall: float
    f1: float
    empty: bool = False  # a denominator was zero and the value was forced to 0


def _relative_truth(truth, reference):
    """Express world truth in the reference robot's frame; pass through if
    the truth is already relative (no reference entry present)."""
    if reference not in truth:
        return truth
    ref = truth[reference]
    R = core.quat_to_matrix(ref.orientation)
    out = {}
    for j, s in truth.items():
        if j == reference:
            continue
        out[j] = (
            R.T @ (np.asarray(s.position, dtype=float) - np.asarray(ref.position, dtype=float)),
            core.quat_canonical(core.quat_mul(core.quat_conj(ref.orientation), s.orientation)),
        )
    return out


def _pose(entry):
    if isinstance(entry, tuple):
        return np.asarray(entry[0], dtype=float), np.asarray(entry[1], dtype=float)
    return np.asarray(entry.position, dtype=float), np.asarray(entry.orientation, dtype=float)


def ate_frame(truth, estimate, reference):
    """RMS position (m) and rotation (rad) error over the estimated robots.

    ``truth`` maps robot id to a state; world-frame truth that includes the
    reference robot is converted internally. ``estimate`` exposes
    ``positions`` and ``orientations`` dicts keyed by robot id (the natural
    shape of the estimators' outputs).
    """
    rel = _relative_truth(truth, reference)
    robots = [j for j in estimate.positions if j != reference]
    if not robots:
        raise ValueError("no estimated robots to score")
    p_sq = 0.0
    r_sq = 0.0
    for j in robots:
        if j not in rel:
            raise ValueError(f"estimate covers robot {j} but the truth does not")
        p_true, q_true = _pose(rel[j])
        p_est = np.asarray(estimate.positions[j], dtype=float)
        q_est = np.asarray(estimate.orientations[j], dtype=float)
        p_sq += float(np.sum((p_est - p_true) ** 2))
        dq = core.quat_mul(core.quat_conj(q_true), q_est)
        r_sq += float(np.sum(core.quat_log(core.quat_canonical(dq)) ** 2))
    n = len(robots)
    return math.sqrt(p_sq / n), math.sqrt(r_sq / n)


def ate_sequence(frame_errors):
    """RMS aggregation of per-frame (position, rotation) errors."""
    errs = list(frame_errors)
    if not errs:
        raise ValueError("need at least one frame")
    pos = math.sqrt(sum(p * p for p, _ in errs) / len(errs))
    rot = math.sqrt(sum(r * r for _, r in errs) / len(errs))
    return pos, rot


def output_rate(estimates, total_frames, valid=None):
    """Fraction of frames with a valid output (default: entry is not None)."""
    if total_frames <= 0:
        raise ValueError("total_frames must be positive")
    if valid is None:
        valid = lambda e: e is not None
    return sum(1 for e in estimates if valid(e)) / total_frames


def pr_of_rejection(masks, labels) -> PrecisionRecall:
    """Precision/recall/F1 of kept bearings against ground-truth labels.

    Accepts single boolean arrays or per-frame sequences of them. Zero
    denominators report the affected value as 0 and set ``empty``.
    """
    kept = _flatten(masks)
    true = _flatten(labels)
    if kept.shape != true.shape:
        raise ValueError("mask/label lengths differ")
    tp = int(np.sum(kept & true))
    fp = int(np.sum(kept & ~true))
    fn = int(np.sum(~kept & true))
    empty = False
    if tp + fp == 0:
        precision, empty = 0.0, True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall, empty = 0.0, True
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0.0:
        f1, empty = 0.0, True
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return PrecisionRecall(precision, recall, f1, empty)


def _flatten(chunks):
    if isinstance(chunks, np.ndarray):
        return chunks.astype(bool).ravel()
    parts = list(chunks)
    if parts and np.isscalar(parts[0]) or parts and isinstance(parts[0], (bool, np.bool_)):
        return np.asarray(parts, dtype=bool)
    return np.concatenate([np.asarray(c, dtype=bool).ravel() for c in parts]) if parts else np.zeros(0, bool)


def write_metrics_csv(path, rows):
    """One row per (trial, estimator tier, metric); schema column first."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for trial, tier, metric, value in rows:
            writer.writerow([CSV_SCHEMA_VERSION, trial, tier, metric, format(float(value), ".9g")])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != _CSV_COLUMNS:
            raise ValueError(f"unexpected metrics schema {header!r}")
        out = []
        for row in reader:
            if not row:
                continue
            schema, trial, tier, metric, value = row
            if int(schema) != CSV_SCHEMA_VERSION:
                raise ValueError(f"unsupported metrics schema version {schema}")
            out.append({"trial": trial, "tier": tier, "metric": metric, "value": float(value)})
        return out
