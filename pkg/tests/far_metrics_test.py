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

import math

import numpy as np
import pytest

from far_box3d import Box3D
from far_errors import MatchingError
from far_matching import Prediction
from far_metrics import (
    CSV_HEADER,
    EvalFrame,
    MetricsReport,
    aligned_iou,
    average_precision,
    coverage_hits,
    coverage_recall,
    make_bands,
    range_band_metrics,
    range_band_metrics_frames,
    recall_at,
    tp_errors,
    yaw_difference,
)


def box(x: float, y: float = 0.0, yaw: float = 0.0, size=(1.9, 4.6, 1.6)) -> Box3D:
    return Box3D([x, y, 0.8], size, yaw)


class TestRecall:
    def test_recall_per_threshold(self):
        # given
        gts = [box(10.0), box(20.0)]
        preds = [Prediction(box(10.5), 0.9), Prediction(box(23.0), 0.8)]

        # when
        result = recall_at(preds, gts, (1.0, 4.0))

        # then
        assert result.recalls == {1.0: 0.5, 4.0: 1.0}
        assert not result.empty_gt

    def test_empty_gt_is_flagged(self):
        # when
        result = recall_at([Prediction(box(10.0), 0.9)], [], (2.0,))

        # then
        assert result.empty_gt
        assert result.recalls == {2.0: 1.0}

    def test_reject_unsorted_thresholds(self):
        with pytest.raises(MatchingError):
            recall_at([], [box(1.0)], (2.0, 1.0))


class TestAveragePrecision:
    def test_golden_ranking(self):
        # given
        gts = [box(10.0), box(20.0), box(30.0)]
        preds = [
            Prediction(box(10.0), 0.9),
            Prediction(box(50.0), 0.8),
            Prediction(box(20.0, 0.5), 0.7),
            Prediction(box(60.0), 0.6),
            Prediction(box(30.0), 0.5),
        ]

        # when
        ap = average_precision(preds, gts, 1.0)

        # then
        assert ap == pytest.approx(34 / 45)

    def test_perfect_detector_has_unit_ap(self):
        # given
        gts = [box(10.0), box(20.0)]

        # then
        assert average_precision([Prediction(g, 0.5) for g in gts], gts, 1.0) == pytest.approx(1.0)

    def test_ap_without_predictions_is_zero(self):
        assert average_precision([], [box(10.0)], 1.0) == 0.0

    def test_ap_without_gt_is_undefined(self):
        assert average_precision([Prediction(box(10.0), 0.5)], [], 1.0) is None


class TestTPErrors:
    def test_errors_of_shifted_rotated_box(self):
        # given
        gt = box(10.0, size=(2.0, 4.0, 2.0))
        pred = box(10.0, 1.0, yaw=0.5, size=(1.0, 4.0, 2.0))

        # when
        errors = tp_errors([(pred, gt)])

        # then
        assert errors.ate == pytest.approx(1.0)
        assert errors.ase == pytest.approx(0.5)
        assert errors.aoe == pytest.approx(0.5)
        assert errors.count == 1

    def test_errors_without_pairs_are_undefined(self):
        # when
        errors = tp_errors([])

        # then
        assert errors.undefined
        assert errors.ate is None

    def test_yaw_difference_wraps(self):
        assert yaw_difference(math.pi - 0.1, -math.pi + 0.1) == pytest.approx(0.2)

    def test_aligned_iou_of_equal_sizes(self):
        assert aligned_iou((1.0, 2.0, 3.0), (1.0, 2.0, 3.0)) == pytest.approx(1.0)


class TestRangeBands:
    def test_default_bands_with_union(self):
        # when
        bands = make_bands(((50.0, 150.0), (0.0, 50.0)))

        # then
        assert [b.label for b in bands] == ["0-50", "50-150", "0-150"]

    def test_boundary_belongs_to_upper_band(self):
        # given
        near, far, _ = make_bands()

        # then
        assert not near.contains(50.0)
        assert far.contains(50.0)
        assert far.contains(150.0)

    def test_single_band_has_no_union(self):
        assert len(make_bands(((0.0, 80.0),))) == 1

    def test_reject_overlapping_bands(self):
        with pytest.raises(MatchingError):
            make_bands(((0.0, 60.0), (50.0, 150.0)))

    def test_metrics_split_by_range(self):
        # given
        gts = [box(10.0), box(0.0, 70.0), box(100.0)]
        preds = [Prediction(box(10.2), 0.9), Prediction(box(100.0, 3.0), 0.8)]

        # when
        report = range_band_metrics(preds, gts, thresholds=(1.0, 4.0))

        # then
        assert report.band("0-50").threshold(1.0).recall == 1.0
        assert report.band("50-150").threshold(1.0).recall == 0.0
        assert report.band("50-150").threshold(4.0).recall == pytest.approx(0.5)
        assert report.band("0-150").num_gts == 3

    def test_empty_band_reports_unit_recall_and_no_ap(self):
        # when
        report = range_band_metrics([], [box(10.0)], thresholds=(2.0,))

        # then
        far = report.band("50-150")
        assert far.empty_gt
        assert far.threshold(2.0).recall == 1.0
        assert far.threshold(2.0).ap is None

    def test_frames_are_pooled(self):
        # given
        frames = [
            EvalFrame([Prediction(box(10.0), 0.9)], [box(10.0)]),
            EvalFrame([], [box(20.0)]),
        ]

        # when
        report = range_band_metrics_frames(frames, bands=((0.0, 50.0),), thresholds=(1.0,))

        # then
        assert report.band("0-50").threshold(1.0).recall == pytest.approx(0.5)
        assert report.band("0-50").num_gts == 2


class TestMetricsReport:
    def test_json_round_trip(self):
        # given
        report = range_band_metrics([Prediction(box(10.2), 0.9)], [box(10.0)], metadata={"seed": 3})

        # when
        restored = MetricsReport.from_json(report.to_json())

        # then
        assert restored == report

    def test_csv_rows_use_empty_cells_for_undefined_values(self):
        # given
        report = range_band_metrics([], [box(10.0)], bands=((0.0, 50.0), (50.0, 150.0)), thresholds=(2.0,))

        # when
        rows = report.csv_rows()

        # then
        far = rows[1]
        assert len(far) == len(CSV_HEADER)
        assert far[0] == "50-150"
        assert far[CSV_HEADER.index("ap")] == ""
        assert far[CSV_HEADER.index("ate")] == ""

    def test_attach_coverage(self):
        # given
        report = range_band_metrics([], [box(10.0)], thresholds=(2.0,))

        # when
        covered = report.with_coverage({"0-50": {2.0: 1.0}})

        # then
        assert covered.band("0-50").threshold(2.0).coverage_recall == 1.0
        assert covered.band("50-150").threshold(2.0).coverage_recall is None


class TestCoverageRecall:
    def test_fraction_of_gt_near_a_query(self):
        # given
        gts = [box(10.0), box(40.0)]
        points = np.array([[10.5, 0.0, 0.8], [-5.0, 0.0, 0.0]])

        # when
        result = coverage_recall(points, gts, (1.0, 2.0))

        # then
        assert result.recalls == {1.0: 0.5, 2.0: 0.5}

    def test_no_points_covers_nothing(self):
        assert coverage_recall(np.zeros((0, 3)), [box(10.0)], (2.0,)).recalls == {2.0: 0.0}

    def test_nearest_distances_match_exhaustive_search(self):
        # given
        rng = np.random.default_rng(6)
        points = rng.uniform(-80, 80, (700, 3))
        gts = [box(x, y) for x, y in rng.uniform(-80, 80, (50, 2))]

        # when
        nearest = coverage_hits(points, gts)

        # then
        exhaustive = [np.min(np.linalg.norm(points - g.center, axis=1)) for g in gts]
        assert nearest == pytest.approx(exhaustive)

    def test_distances_without_gt_or_points(self):
        assert coverage_hits(np.zeros((3, 3)), []).shape == (0,)
        assert coverage_hits(np.zeros((0, 3)), [box(10.0)]).tolist() == [math.inf]
