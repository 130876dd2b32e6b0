# Licensed to the Apache Software Foundation (ASF) under one
# or more contributor license agreements.  See the NOTICE file
# distributed with this work for additional information
# regarding copyright ownership.  The ASF licenses this file
# to you under the Apache License, Version 2.0 (the
# "License"); you may not use this file except in compliance
# with the License.  You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing,
# software distributed under the License is distributed on an
# "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
# KIND, either express or implied.  See the License for the
# specific language governing permissions and limitations
# under the License.

"""
Long-range evaluation: center-distance true positives, recall, AP, TP errors and range bands.
Range is always the ground-plane distance from the ego origin.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from far_box3d import Box3D
from far_errors import MatchingError
from far_matching import Prediction, greedy_match

DEFAULT_THRESHOLDS = (1.0, 2.0, 4.0)
DEFAULT_BANDS = ((0.0, 50.0), (50.0, 150.0))
TP_ERROR_THRESHOLD = 2.0

CSV_HEADER = [
    "band",
    "threshold",
    "recall",
    "ap",
    "coverage_recall",
    "empty_gt",
    "num_gts",
    "num_preds",
    "ate",
    "ase",
    "aoe",
]


def _validate_thresholds(thresholds) -> list[float]:
    thresholds = [float(t) for t in thresholds]
    if not thresholds or any(t <= 0 for t in thresholds):
        raise MatchingError(f"Thresholds must be positive, got {thresholds}")
    if any(a >= b for a, b in zip(thresholds, thresholds[1:])):
        raise MatchingError(f"Thresholds must be sorted ascending, got {thresholds}")
    return thresholds


@dataclass(frozen=True)
class RecallResult:
    recalls: dict[float, float]
    empty_gt: bool = False


def recall_at(preds: list[Prediction], gts: list[Box3D], thresholds=DEFAULT_THRESHOLDS) -> RecallResult:
    thresholds = _validate_thresholds(thresholds)
    if not gts:
        return RecallResult({t: 1.0 for t in thresholds}, True)
    return RecallResult({t: greedy_match(preds, gts, t).num_matches / len(gts) for t in thresholds})


def _tp_flags(preds: list[Prediction], gts: list[Box3D], threshold: float) -> np.ndarray:
    flags = np.zeros(len(preds), dtype=bool)
    for pi, _ in greedy_match(preds, gts, threshold).pairs:
        flags[pi] = True
    return flags


def precision_envelope_area(scores: np.ndarray, tp: np.ndarray, num_gts: int) -> float:
    """All-points interpolated area under the precision/recall curve"""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(tp, dtype=bool)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / num_gts
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(preds: list[Prediction], gts: list[Box3D], threshold: float) -> float | None:
    """AP at a center-distance threshold; None when there is no GT to recall"""
    _validate_thresholds([threshold])
    if not gts:
        return None
    if not preds:
        return 0.0
    return precision_envelope_area(np.array([p.score for p in preds]), _tp_flags(preds, gts, threshold), len(gts))


def aligned_iou(size_a, size_b) -> float:
    """IoU of two boxes sharing center and yaw"""
    inter = float(np.prod(np.minimum(size_a, size_b)))
    return inter / (float(np.prod(size_a)) + float(np.prod(size_b)) - inter)


def yaw_difference(a: float, b: float) -> float:
    """Minimal absolute angle between two headings, in [0, pi]"""
    return abs((a - b + math.pi) % (2 * math.pi) - math.pi)


@dataclass(frozen=True)
class TPErrors:
    ate: float | None
    ase: float | None
    aoe: float | None
    count: int = 0

    @property
    def undefined(self) -> bool:
        return self.count == 0


def tp_errors(pairs: list[tuple[Box3D, Box3D]]) -> TPErrors:
    """Mean translation, scale and orientation errors over matched (prediction, GT) box pairs"""
    if not pairs:
        return TPErrors(None, None, None, 0)
    ate = np.mean([np.linalg.norm(p.center - g.center) for p, g in pairs])
    ase = np.mean([1.0 - aligned_iou(p.size, g.size) for p, g in pairs])
    aoe = np.mean([yaw_difference(p.yaw, g.yaw) for p, g in pairs])
    return TPErrors(float(ate), float(ase), float(aoe), len(pairs))


@dataclass(frozen=True)
class RangeBand:
    lo: float
    hi: float
    include_hi: bool = False

    @property
    def label(self) -> str:
        return f"{self.lo:g}-{self.hi:g}"

    def contains(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        upper = r <= self.hi if self.include_hi else r < self.hi
        return (r >= self.lo) & upper


def make_bands(bands=DEFAULT_BANDS) -> list[RangeBand]:
    """Split bands in ascending order plus their union; overlapping bands are rejected"""
    ordered = sorted((float(lo), float(hi)) for lo, hi in bands)
    if not ordered:
        raise MatchingError("At least one range band is required")
    for lo, hi in ordered:
        if not (0 <= lo < hi):
            raise MatchingError(f"Invalid range band [{lo}, {hi})")
    for (_, hi), (lo, _) in zip(ordered, ordered[1:]):
        if lo < hi:
            raise MatchingError(f"Range bands overlap: {ordered}")
    split = [RangeBand(lo, hi, i == len(ordered) - 1) for i, (lo, hi) in enumerate(ordered)]
    if len(split) > 1:
        split.append(RangeBand(ordered[0][0], ordered[-1][1], True))
    return split


@dataclass(frozen=True)
class EvalFrame:
    preds: list[Prediction]
    gts: list[Box3D]

    def in_band(self, band: RangeBand) -> "EvalFrame":
        return EvalFrame(
            [p for p in self.preds if band.contains(p.box.ground_range)],
            [g for g in self.gts if band.contains(g.ground_range)],
        )


@dataclass(frozen=True)
class ThresholdMetrics:
    threshold: float
    recall: float
    ap: float | None
    coverage_recall: float | None = None


@dataclass(frozen=True)
class BandMetrics:
    band: str
    lo: float
    hi: float
    num_gts: int
    num_preds: int
    empty_gt: bool
    thresholds: list[ThresholdMetrics]
    tp_errors: TPErrors

    def threshold(self, t: float) -> ThresholdMetrics:
        for metrics in self.thresholds:
            if metrics.threshold == t:
                return metrics
        raise KeyError(f"No metrics for threshold {t}")


@dataclass(frozen=True)
class MetricsReport:
    bands: list[BandMetrics]
    metadata: dict = field(default_factory=dict)

    def band(self, label: str) -> BandMetrics:
        for band in self.bands:
            if band.band == label:
                return band
        raise KeyError(f"No band '{label}'")

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "bands": [
                {
                    "band": b.band,
                    "lo": b.lo,
                    "hi": b.hi,
                    "num_gts": b.num_gts,
                    "num_preds": b.num_preds,
                    "empty_gt": b.empty_gt,
                    "thresholds": [
                        {"threshold": t.threshold, "recall": t.recall, "ap": t.ap, "coverage_recall": t.coverage_recall}
                        for t in b.thresholds
                    ],
                    "tp_errors": {
                        "ate": b.tp_errors.ate,
                        "ase": b.tp_errors.ase,
                        "aoe": b.tp_errors.aoe,
                        "count": b.tp_errors.count,
                    },
                }
                for b in self.bands
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "MetricsReport":
        return MetricsReport(
            [
                BandMetrics(
                    b["band"],
                    b["lo"],
                    b["hi"],
                    b["num_gts"],
                    b["num_preds"],
                    b["empty_gt"],
                    [
                        ThresholdMetrics(t["threshold"], t["recall"], t["ap"], t.get("coverage_recall"))
                        for t in b["thresholds"]
                    ],
                    TPErrors(**b["tp_errors"]),
                )
                for b in d["bands"]
            ],
            d.get("metadata", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "MetricsReport":
        return MetricsReport.from_dict(json.loads(text))

    def csv_rows(self) -> list[list]:
        """One row per band x threshold, headed by CSV_HEADER. Undefined values are empty cells."""
        rows = []
        for b in self.bands:
            for t in b.thresholds:
                rows.append(
                    [
                        b.band,
                        t.threshold,
                        t.recall,
                        t.ap,
                        t.coverage_recall,
                        b.empty_gt,
                        b.num_gts,
                        b.num_preds,
                        b.tp_errors.ate,
                        b.tp_errors.ase,
                        b.tp_errors.aoe,
                    ]
                )
        return [["" if v is None else v for v in row] for row in rows]

    def with_coverage(self, coverage: dict[str, dict[float, float | None]]) -> "MetricsReport":
        """Copy of the report carrying query-coverage recall per band label and threshold"""
        bands = []
        for b in self.bands:
            per_threshold = coverage.get(b.band, {})
            thresholds = [
                ThresholdMetrics(t.threshold, t.recall, t.ap, per_threshold.get(t.threshold)) for t in b.thresholds
            ]
            bands.append(
                BandMetrics(b.band, b.lo, b.hi, b.num_gts, b.num_preds, b.empty_gt, thresholds, b.tp_errors)
            )
        return MetricsReport(bands, self.metadata)


def evaluate_band(frames: list[EvalFrame], band: RangeBand, thresholds: list[float]) -> BandMetrics:
    frames = [frame.in_band(band) for frame in frames]
    num_gts = sum(len(f.gts) for f in frames)
    num_preds = sum(len(f.preds) for f in frames)
    per_threshold = []
    for t in thresholds:
        matched = 0
        scores = []
        flags = []
        for frame in frames:
            frame_flags = _tp_flags(frame.preds, frame.gts, t)
            matched += int(frame_flags.sum())
            scores.extend(p.score for p in frame.preds)
            flags.extend(frame_flags)
        if num_gts == 0:
            per_threshold.append(ThresholdMetrics(t, 1.0, None))
        else:
            ap = precision_envelope_area(np.array(scores), np.array(flags, dtype=bool), num_gts) if scores else 0.0
            per_threshold.append(ThresholdMetrics(t, matched / num_gts, ap))
    tp_pairs = []
    for frame in frames:
        for pi, gi in greedy_match(frame.preds, frame.gts, TP_ERROR_THRESHOLD).pairs:
            tp_pairs.append((frame.preds[pi].box, frame.gts[gi]))
    return BandMetrics(
        band.label, band.lo, band.hi, num_gts, num_preds, num_gts == 0, per_threshold, tp_errors(tp_pairs)
    )


def range_band_metrics_frames(
    frames: list[EvalFrame], bands=DEFAULT_BANDS, thresholds=DEFAULT_THRESHOLDS, metadata: dict | None = None
) -> MetricsReport:
    """Pools every frame per band: recall over all GT of the band, AP over all predictions ranked together"""
    thresholds = _validate_thresholds(thresholds)
    return MetricsReport([evaluate_band(frames, band, thresholds) for band in make_bands(bands)], dict(metadata or {}))


def range_band_metrics(
    preds: list[Prediction],
    gts: list[Box3D],
    bands=DEFAULT_BANDS,
    thresholds=DEFAULT_THRESHOLDS,
    metadata: dict | None = None,
) -> MetricsReport:
    return range_band_metrics_frames([EvalFrame(preds, gts)], bands, thresholds, metadata)


def coverage_hits(points: np.ndarray, gts: list[Box3D]) -> np.ndarray:
    """Distance from every GT center to its nearest query point, inf without points"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not gts:
        return np.zeros(0)
    if points.shape[0] == 0:
        return np.full(len(gts), np.inf)
    nearest, _ = cKDTree(points).query(np.stack([g.center for g in gts]))
    return nearest


def coverage_recall(points: np.ndarray, gts: list[Box3D], thresholds=DEFAULT_THRESHOLDS) -> RecallResult:
    """Fraction of GT boxes with at least one query reference point within each threshold"""
    thresholds = _validate_thresholds(thresholds)
    if not gts:
        return RecallResult({t: 1.0 for t in thresholds}, True)
    nearest = coverage_hits(points, gts)
    return RecallResult({t: float(np.mean(nearest <= t)) for t in thresholds})
