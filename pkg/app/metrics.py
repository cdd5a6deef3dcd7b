"""
One-pass evaluation metrics: success (overlap) and precision (center error).
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from app.tracker import BBox

logger = logging.getLogger(__name__)

SUCCESS_THRESHOLDS = np.round(np.linspace(0.0, 1.0, 21), 2)
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
PRECISION_AT = 20


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two continuous rectangles."""
    al, at, ar, ab = a.corners()
    bl, bt, br, bb = b.corners()
    inter_w = max(0.0, min(ar, br) - max(al, bl))
    inter_h = max(0.0, min(ab, bb) - max(at, bt))
    inter = inter_w * inter_h
    union = a.w * a.h + b.w * b.h - inter
    return float(np.clip(inter / union, 0.0, 1.0)) if union > 0 else 0.0


def center_error(a: BBox, b: BBox) -> float:
    return float(np.hypot(a.cx - b.cx, a.cy - b.cy))


@dataclass
class OpeResult:
    success: List[float]
    precision: List[float]
    auc: float
    precision_at_20: float
    mean_center_error: float
    frames: int

    def to_dict(self) -> Dict:
        return asdict(self)


def success_curve(overlaps: np.ndarray) -> np.ndarray:
    """Fraction of frames with overlap strictly above each threshold."""
    return (overlaps[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)


def precision_curve(errors: np.ndarray) -> np.ndarray:
    """Fraction of frames with center error at or below each threshold."""
    return (errors[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)


def ope_metrics(predicted: Sequence[BBox], truth: Sequence[BBox]) -> OpeResult:
    if len(predicted) != len(truth):
        raise ValueError(f"ope_metrics: {len(predicted)} predictions but {len(truth)} ground-truth boxes")
    if not truth:
        raise ValueError("ope_metrics: empty sequence")
    overlaps = np.array([iou(p, t) for p, t in zip(predicted, truth)])
    errors = np.array([center_error(p, t) for p, t in zip(predicted, truth)])
    success = success_curve(overlaps)
    precision = precision_curve(errors)
    return OpeResult(
        success=success.tolist(),
        precision=precision.tolist(),
        auc=float(success.mean()),
        precision_at_20=float(precision[PRECISION_AT]),
        mean_center_error=float(errors.mean()),
        frames=len(truth),
    )


def mean_result(results: Sequence[OpeResult]) -> OpeResult:
    """Frame-weighted average over sequences."""
    if not results:
        raise ValueError("mean_result: no results")
    weights = np.array([r.frames for r in results], dtype=np.float64)
    weights /= weights.sum()
    success = np.average([r.success for r in results], axis=0, weights=weights)
    precision = np.average([r.precision for r in results], axis=0, weights=weights)
    return OpeResult(
        success=success.tolist(),
        precision=precision.tolist(),
        auc=float(success.mean()),
        precision_at_20=float(precision[PRECISION_AT]),
        mean_center_error=float(np.average([r.mean_center_error for r in results], weights=weights)),
        frames=int(sum(r.frames for r in results)),
    )


def curves_frame(results: Dict[str, OpeResult]) -> Dict[str, pd.DataFrame]:
    """Success and precision curves, one column per run, indexed by threshold."""
    success = pd.DataFrame({name: r.success for name, r in results.items()},
                           index=pd.Index(SUCCESS_THRESHOLDS, name="overlap_threshold"))
    precision = pd.DataFrame({name: r.precision for name, r in results.items()},
                             index=pd.Index(PRECISION_THRESHOLDS.astype(int), name="center_error_px"))
    return {"success": success, "precision": precision}
