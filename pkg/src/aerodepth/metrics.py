"""Regression and classification metrics for predicted depth-class maps.

Predicted maps are clamped to [0, 4] before every metric; the model head is
linear and may overshoot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .datagen import AnnotatedFrame, BBox, ClassBins, DEFAULT_BINS, bin_distance

AGGREGATORS = ("mean", "min", "max")
MAX_CLASS = 4


@dataclass(frozen=True)
class SlidingWindowCfg:
    k: int = 5
    stride: int = 1
    padding: str = "reflect"
    aggregator: str = "mean"

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"window size k must be a positive odd integer, got {self.k}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding != "reflect":
            raise ValueError("only reflect padding is supported")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")

    def with_aggregator(self, agg: str) -> "SlidingWindowCfg":
        return SlidingWindowCfg(self.k, self.stride, self.padding, agg)


@dataclass(frozen=True)
class MetricReport:
    mae: float
    rmse: float
    sw_acc_mean: float
    sw_acc_min: float
    sw_acc_max: float
    threshold_acc: float
    n_samples: int


def _clamped(pred) -> np.ndarray:
    return np.clip(np.asarray(pred, dtype=np.float64), 0.0, MAX_CLASS)


def _check_shapes(pred, gt):
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"shape mismatch: prediction {np.shape(pred)} vs ground truth {np.shape(gt)}")


def mae(pred, gt) -> float:
    _check_shapes(pred, gt)
    return float(np.mean(np.abs(_clamped(pred) - np.asarray(gt, dtype=np.float64))))


def rmse(pred, gt) -> float:
    _check_shapes(pred, gt)
    d = _clamped(pred) - np.asarray(gt, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def kernel_means(mask, bbox: BBox, cfg: SlidingWindowCfg = SlidingWindowCfg()) -> np.ndarray:
    """Mean of the k x k window whose top-left corner sits on each bbox pixel.

    Windows running past the right or bottom edge read reflect-padded values.
    Positions are visited row-major with the configured stride.
    """
    m = _clamped(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {m.shape}")
    box = bbox.clip(*m.shape)
    if box is None:
        raise ValueError(f"bbox {bbox} does not intersect the {m.shape} mask")
    k = cfg.k
    padded = np.pad(m, ((0, k - 1), (0, k - 1)), mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    sel = windows[box.y : box.y + box.h : cfg.stride, box.x : box.x + box.w : cfg.stride]
    return sel.mean(axis=(-2, -1)).reshape(-1)


def aggregate(values: np.ndarray, aggregator: str) -> float:
    if len(values) == 0:
        raise ValueError("no kernel means to aggregate")
    if aggregator == "mean":
        return float(np.mean(values))
    if aggregator == "min":
        return float(np.min(values))
    if aggregator == "max":
        return float(np.max(values))
    raise ValueError(f"unknown aggregator {aggregator!r}")


def round_class(value: float) -> int:
    """Round half away from zero, then clamp to the class range."""
    r = math.copysign(math.floor(abs(value) + 0.5), value)
    return int(min(max(r, 0), MAX_CLASS))


def sliding_window_class(mask, bbox: BBox, cfg: SlidingWindowCfg = SlidingWindowCfg()) -> int:
    return round_class(aggregate(kernel_means(mask, bbox, cfg), cfg.aggregator))


def sliding_window_classes(mask, bbox: BBox, cfg: SlidingWindowCfg = SlidingWindowCfg()) -> dict:
    """Class for every aggregator, sharing one kernel-mean pass."""
    means = kernel_means(mask, bbox, cfg)
    return {agg: round_class(aggregate(means, agg)) for agg in AGGREGATORS}


def threshold_hits(pred, gt, thr: float = 1.25) -> np.ndarray:
    _check_shapes(pred, gt)
    p = _clamped(pred) + 1.0
    g = np.asarray(gt, dtype=np.float64) + 1.0
    return np.maximum(p / g, g / p) < thr


def threshold_accuracy(pred, gt, thr: float = 1.25) -> float:
    """Fraction of pixels with max(p'/g', g'/p') < thr, where x' = x + 1."""
    return float(np.mean(threshold_hits(pred, gt, thr)))


def evaluate(predictions: Sequence[Tuple[np.ndarray, AnnotatedFrame, int, np.ndarray]],
             cfg: SlidingWindowCfg = SlidingWindowCfg(), thr: float = 1.25) -> MetricReport:
    """Aggregate metrics over (pred map, frame in map coordinates, gt class, gt mask) tuples.

    MAE, RMSE and threshold accuracy pool all pixels of all samples; each
    sliding-window accuracy is the fraction of samples whose predicted class
    equals the ground-truth class.
    """
    if not predictions:
        raise ValueError("evaluate needs at least one prediction")
    abs_sum = sq_sum = 0.0
    hits = 0
    pixels = 0
    correct = dict.fromkeys(AGGREGATORS, 0)
    for pred, frame, gt_class, gt_mask in predictions:
        pred = np.asarray(pred)
        _check_shapes(pred, gt_mask)
        d = _clamped(pred) - np.asarray(gt_mask, dtype=np.float64)
        abs_sum += float(np.sum(np.abs(d)))
        sq_sum += float(np.sum(d * d))
        hits += int(np.count_nonzero(threshold_hits(pred, gt_mask, thr)))
        pixels += d.size
        classes = sliding_window_classes(pred, frame.bbox, cfg)
        for agg in AGGREGATORS:
            correct[agg] += int(classes[agg] == gt_class)
    n = len(predictions)
    return MetricReport(
        mae=abs_sum / pixels,
        rmse=math.sqrt(sq_sum / pixels),
        sw_acc_mean=correct["mean"] / n,
        sw_acc_min=correct["min"] / n,
        sw_acc_max=correct["max"] / n,
        threshold_acc=hits / pixels,
        n_samples=n,
    )


def object_class(frame: AnnotatedFrame, bins: ClassBins = DEFAULT_BINS) -> int:
    return bin_distance(frame.distance_m, bins)
