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

import itertools

import numpy as np
import pytest

from far_box3d import Box3D
from far_errors import MatchingError
from far_matching import Prediction, greedy_match, hungarian_match, match_boxes


def box(x: float, y: float = 0.0) -> Box3D:
    return Box3D([x, y, 0.8], (1.9, 4.6, 1.6))


class TestHungarianMatch:
    def test_find_minimum_cost_assignment(self):
        # given
        cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])

        # when
        result = hungarian_match(cost)

        # then
        best = min(sum(cost[i, p[i]] for i in range(3)) for p in itertools.permutations(range(3)))
        assert sum(result.distances) == pytest.approx(best)
        assert result.unmatched_preds == []
        assert result.unmatched_gts == []

    def test_rectangular_cost_leaves_extra_rows_unmatched(self):
        # given
        cost = np.array([[1.0, 9.0], [9.0, 1.0], [0.5, 0.5]])

        # when
        result = hungarian_match(cost)

        # then
        assert result.num_matches == 2
        assert len(result.unmatched_preds) == 1
        assert sum(result.distances) == pytest.approx(1.5)

    def test_empty_cost_matches_nothing(self):
        # when
        result = hungarian_match(np.zeros((0, 3)))

        # then
        assert result.pairs == []
        assert result.unmatched_gts == [0, 1, 2]

    def test_reject_nan_cost(self):
        with pytest.raises(MatchingError):
            hungarian_match(np.array([[0.0, np.nan]]))

    def test_reject_infinite_cost(self):
        with pytest.raises(MatchingError):
            hungarian_match(np.array([[0.0, np.inf]]))

    def test_match_boxes_by_center_distance(self):
        # given
        preds = [Prediction(box(20.2), 0.5), Prediction(box(10.1), 0.9)]
        gts = [box(10.0), box(20.0)]

        # when
        result = match_boxes(preds, gts)

        # then
        assert sorted(result.pairs) == [(0, 1), (1, 0)]


class TestGreedyMatch:
    def test_higher_score_claims_nearest_gt(self):
        # given
        gts = [box(10.0)]
        preds = [Prediction(box(10.1), 0.3), Prediction(box(10.5), 0.8)]

        # when
        result = greedy_match(preds, gts, 1.0)

        # then
        assert result.pairs == [(1, 0)]
        assert result.unmatched_preds == [0]

    def test_prediction_beyond_threshold_is_unmatched(self):
        # when
        result = greedy_match([Prediction(box(13.0), 0.9)], [box(10.0)], 2.0)

        # then
        assert result.pairs == []
        assert result.unmatched_gts == [0]

    def test_threshold_is_inclusive(self):
        assert greedy_match([Prediction(box(12.0), 0.9)], [box(10.0)], 2.0).num_matches == 1

    def test_match_without_gt(self):
        # when
        result = greedy_match([Prediction(box(12.0), 0.9)], [], 2.0)

        # then
        assert result.unmatched_preds == [0]

    def test_reject_non_positive_threshold(self):
        with pytest.raises(MatchingError):
            greedy_match([], [], 0.0)
