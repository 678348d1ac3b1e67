"""Frame-level precision/recall of predicted against ground-truth active states."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class RangeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TimelineComparison:
    precision: float
    recall: float
    per_frame: list[tuple[int, int, int, bool]]  # frame, predicted, gt, matched
    anticipation_tolerance: int = 0


def _window_match(a: np.ndarray, b: np.ndarray, tol: int) -> np.ndarray:
    """``out[t]`` is true when ``a[t]`` equals some ``b[t']`` with ``|t - t'| <= tol``."""
    n = len(a)
    out = np.zeros(n, dtype=bool)
    for k in range(-tol, tol + 1):
        lo, hi = max(0, -k), min(n, n - k)
        if lo < hi:
            out[lo:hi] |= a[lo:hi] == b[lo + k:hi + k]
    return out


def evaluate(predicted: Sequence[int], gt, tol: int = 0) -> TimelineComparison:
    """Compare per-frame predicted states with ground truth.

    A predicted frame counts as correct if its state matches ground truth
    anywhere within ``tol`` frames; a ground-truth frame counts as recalled
    if some prediction within ``tol`` frames matches it. ``gt`` may be a
    :class:`GroundTruthTimeline` or a per-frame state sequence.
    """
    if tol < 0:
        raise ValueError("tolerance must be non-negative")
    truth = np.asarray(gt.states() if hasattr(gt, "states") else gt, dtype=np.int64)
    pred = np.asarray(predicted, dtype=np.int64)
    if len(pred) != len(truth):
        raise RangeMismatchError(f"predicted covers {len(pred)} frames, ground truth {len(truth)}")
    if len(pred) == 0:
        return TimelineComparison(1.0, 1.0, [], tol)
    pred_ok = _window_match(pred, truth, tol)
    gt_ok = _window_match(truth, pred, tol)
    per_frame = [(i, int(p), int(g), bool(m)) for i, (p, g, m) in enumerate(zip(pred, truth, pred_ok))]
    return TimelineComparison(float(pred_ok.mean()), float(gt_ok.mean()), per_frame, tol)
