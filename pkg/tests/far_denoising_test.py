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
from far_denoising import (
    DenoiseGroup,
    NoiseForm,
    NoiseSpec,
    make_noise_groups,
    negative_offset,
    positive_offset,
    range_modulation,
    separation_margin,
)
from far_errors import DenoiseError
from far_query_engine import EmbedParams, QueryKind


@pytest.fixture
def params() -> EmbedParams:
    return EmbedParams.random(seed=1)


@pytest.fixture
def gts() -> list[Box3D]:
    return [
        Box3D([12.0, 3.0, 0.8], (1.9, 4.6, 1.6), yaw=0.4, category="car"),
        Box3D([-60.0, 45.0, 0.875], (0.7, 0.7, 1.75), yaw=-2.0, category="pedestrian"),
        Box3D([110.0, -5.0, 1.6], (2.5, 8.0, 3.2), yaw=1.5, category="truck"),
    ]


class TestNoiseGroups:
    def test_group_sizes(self, gts: list[Box3D], params: EmbedParams):
        # given
        spec = NoiseSpec(groups=3, negatives_per_group=2)

        # when
        groups, target = make_noise_groups(gts, spec, params, seed=5)

        # then
        assert len(groups) == 3 * len(gts)
        assert sum(len(g.queries) for g in groups) == spec.queries_per_gt * len(gts)
        assert len(target) == spec.queries_per_gt * len(gts)

    def test_positives_stay_inside_their_box(self, gts: list[Box3D], params: EmbedParams):
        # when
        groups, _ = make_noise_groups(gts, NoiseSpec(groups=20), params, seed=9)

        # then
        for group in groups:
            assert group.positive.kind == QueryKind.DENOISE_POSITIVE
            assert gts[group.gt_index].contains_point(group.positive.ref_point)

    def test_positive_offset_is_rotated_with_the_box(self, gts: list[Box3D]):
        # given
        rng = np.random.default_rng(17)
        box = gts[2]

        # when
        offsets = np.stack([positive_offset(box, rng) for _ in range(500)])

        # then
        assert np.all(box.contains_points(box.center + offsets))
        assert np.max(np.abs(box.to_local(box.center + offsets))[:, 1]) > box.half_size[0]

    def test_negative_distance_follows_range_law(self, gts: list[Box3D], params: EmbedParams):
        # given
        spec = NoiseSpec(form=NoiseForm.LOG, scale=2.0)

        # when
        groups, _ = make_noise_groups(gts, spec, params)

        # then
        for group in groups:
            gt = gts[group.gt_index]
            expected = 2.0 * math.log1p(gt.ground_range)
            for negative in group.negatives:
                assert np.linalg.norm(negative.ref_point - gt.center) == pytest.approx(expected)
                assert negative.ref_point[2] == gt.center[2]

    def test_targets_align_with_flattened_queries(self, gts: list[Box3D], params: EmbedParams):
        # when
        groups, target = make_noise_groups(gts, NoiseSpec(negatives_per_group=1), params)
        queries = [q for g in groups for q in g.queries]

        # then
        for query, box, class_score in zip(queries, target.boxes, target.class_scores):
            if query.kind == QueryKind.DENOISE_POSITIVE:
                assert box == gts[query.source.gt_index]
                assert class_score is None
            else:
                assert box is None
                assert class_score == 0.0

    def test_groups_are_reproducible(self, gts: list[Box3D], params: EmbedParams):
        # when
        first, _ = make_noise_groups(gts, NoiseSpec(), params, seed=4)
        second, _ = make_noise_groups(gts, NoiseSpec(), params, seed=4)

        # then
        for a, b in zip(first, second):
            assert np.array_equal(a.positive.ref_point, b.positive.ref_point)

    def test_no_groups_without_gt(self, params: EmbedParams):
        # when
        groups, target = make_noise_groups([], NoiseSpec(), params)

        # then
        assert groups == []
        assert len(target) == 0

    def test_reject_zero_groups(self):
        with pytest.raises(DenoiseError):
            NoiseSpec(groups=0)

    def test_reject_unknown_form(self):
        with pytest.raises(DenoiseError):
            NoiseSpec.from_dict({"form": "cubic"})


class TestRangeModulation:
    @pytest.mark.parametrize(
        "form,expected",
        [
            (NoiseForm.LOG, math.log1p(100.0)),
            (NoiseForm.LINEAR, 100.0),
            (NoiseForm.SQRT, 10.0),
            (NoiseForm.FIXED, 1.0),
        ],
    )
    def test_range_law(self, form: NoiseForm, expected: float):
        assert float(range_modulation(100.0, form)) == pytest.approx(expected)

    def test_negative_offset_is_horizontal(self):
        # when
        spec = NoiseSpec(form=NoiseForm.LINEAR, scale=0.1)
        offset = negative_offset(np.array([30.0, 40.0, 1.0]), spec, np.random.default_rng(2))

        # then
        assert offset[2] == 0.0
        assert np.linalg.norm(offset) == pytest.approx(5.0)


class TestSeparationMargin:
    def test_margin_grows_with_range(self, gts: list[Box3D], params: EmbedParams):
        # given
        spec = NoiseSpec(form=NoiseForm.LINEAR, scale=0.1, groups=1, negatives_per_group=1)

        # when
        groups, _ = make_noise_groups(gts, spec, params)
        margins = separation_margin(groups, gts)

        # then
        assert margins == pytest.approx([0.1 * g.ground_range - g.half_diagonal for g in gts])

    def test_reject_group_with_missing_gt(self, gts: list[Box3D], params: EmbedParams):
        # given
        groups, _ = make_noise_groups(gts, NoiseSpec(), params)
        dangling = DenoiseGroup(7, 0, groups[0].positive, groups[0].negatives)

        # then
        with pytest.raises(DenoiseError):
            separation_margin([dangling], gts)
