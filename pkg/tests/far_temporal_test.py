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

from far_errors import GeometryError, QueryError
from far_query_engine import EmbedParams, Query, QueryKind, QuerySource, pos_embed
from far_scene import GTConfig, SceneConfig, TrajectoryConfig, gen_scene
from far_temporal import (
    EgoMotion,
    QueryMemory,
    TemporalPropagator,
    ego_compensate,
    select_propagated,
    step_memory,
    top_k_indices,
)


@pytest.fixture
def params() -> EmbedParams:
    return EmbedParams.random(seed=2)


def make_query(params: EmbedParams, point, kind: QueryKind = QueryKind.ADAPTIVE, gt_index: int | None = None) -> Query:
    source = QuerySource(gt_index=gt_index) if gt_index is not None else None
    return Query(kind, point, pos_embed(np.asarray(point, dtype=float), params), 0.0, source)


class TestEgoMotion:
    def test_driving_forward_moves_static_points_backwards(self):
        # when
        moved = EgoMotion.from_vehicle_step(2.0, 0.0).apply(np.array([10.0, 1.0, 0.5]))

        # then
        assert moved == pytest.approx([8.0, 1.0, 0.5])

    def test_turning_left_moves_points_ahead_to_the_right(self):
        # when
        moved = EgoMotion.from_vehicle_step(0.0, math.pi / 2).apply(np.array([10.0, 0.0, 0.0]))

        # then
        assert moved == pytest.approx([0.0, -10.0, 0.0], abs=1e-9)

    def test_compose_with_inverse_is_identity(self):
        # given
        motion = EgoMotion.planar(1.5, -0.3, 0.2)

        # when
        composed = motion.inverse().compose(motion)

        # then
        assert composed.rotation == pytest.approx(np.eye(3))
        assert composed.translation == pytest.approx(np.zeros(3), abs=1e-12)

    def test_reject_non_rigid_motion(self):
        with pytest.raises(GeometryError):
            EgoMotion(np.diag([1.0, 2.0, 1.0]), np.zeros(3))


class TestPropagation:
    def test_top_k_breaks_ties_towards_lower_index(self):
        assert top_k_indices(np.array([0.5, 0.9, 0.5, 0.9]), 3).tolist() == [1, 3, 0]

    def test_select_propagated_skips_denoise_queries(self, params: EmbedParams):
        # given
        queries = [
            make_query(params, [1.0, 0.0, 0.0]),
            make_query(params, [2.0, 0.0, 0.0], QueryKind.DENOISE_POSITIVE, gt_index=0),
            make_query(params, [3.0, 0.0, 0.0], QueryKind.GLOBAL),
        ]

        # when
        selected = select_propagated(queries, [0.2, 0.99, 0.7], 5)

        # then
        assert [q.ref_point[0] for q in selected] == [3.0, 1.0]
        assert [q.score for q in selected] == [0.7, 0.2]
        assert all(q.kind == QueryKind.PROPAGATED for q in selected)

    def test_select_nothing_for_zero_k(self, params: EmbedParams):
        assert select_propagated([make_query(params, [1.0, 0.0, 0.0])], [0.5], 0) == []

    def test_reject_misaligned_scores(self, params: EmbedParams):
        with pytest.raises(QueryError):
            select_propagated([make_query(params, [1.0, 0.0, 0.0])], [0.5, 0.1], 1)

    def test_ego_compensation_reencodes_position(self, params: EmbedParams):
        # given
        query = make_query(params, [20.0, 5.0, 1.0])
        motion = EgoMotion.planar(-2.0, 0.0, 0.0)

        # when
        compensated = ego_compensate(query, motion, params)

        # then
        assert compensated.ref_point == pytest.approx([18.0, 5.0, 1.0])
        assert compensated.embedding == pytest.approx(pos_embed(np.array([18.0, 5.0, 1.0]), params))

    def test_step_memory_emits_previous_content(self, params: EmbedParams):
        # given
        memory = QueryMemory(2)
        frame = [make_query(params, [float(x), 0.0, 0.0]) for x in range(4)]

        # when
        memory, propagated = step_memory(memory, frame, [0.1, 0.4, 0.3, 0.2], EgoMotion.identity(), params)
        _, second = step_memory(memory, [], [], EgoMotion.planar(-1.0, 0.0, 0.0), params)

        # then
        assert propagated == []
        assert len(memory) == 2
        assert [q.ref_point[0] for q in second] == pytest.approx([0.0, 1.0])

    def test_propagator_keeps_capacity(self, params: EmbedParams):
        # given
        propagator = TemporalPropagator(params, capacity=3)
        frame = [make_query(params, [float(x), 1.0, 0.0]) for x in range(10)]

        # when
        propagator.update(frame, np.linspace(0.0, 1.0, 10))
        propagated = propagator.propagate(EgoMotion.identity())

        # then
        assert len(propagated) == 3
        assert [q.ref_point[0] for q in propagated] == [9.0, 8.0, 7.0]

    def test_reject_memory_over_capacity(self, params: EmbedParams):
        with pytest.raises(QueryError):
            QueryMemory(0, [make_query(params, [1.0, 0.0, 0.0])], [0.5])


class TestSceneReplay:
    def test_compensated_static_point_matches_next_frame(self, params: EmbedParams):
        # given
        cfg = SceneConfig(frames=5, gt=GTConfig(count=12), trajectory=TrajectoryConfig(3.0, 0.05))
        scene = gen_scene(cfg)
        range_box = cfg.range.range_box()

        # then
        for previous, current in zip(scene.frames, scene.frames[1:]):
            centers = np.stack([b.center for b in current.boxes])
            for box in previous.boxes:
                compensated = ego_compensate(make_query(params, box.center), current.motion, params).ref_point
                if not range_box.contains(compensated)[0]:
                    continue
                assert np.min(np.linalg.norm(centers - compensated, axis=1)) <= 1e-9

    def test_straight_line_replay_tracks_static_points(self, params: EmbedParams):
        # given
        trajectory = TrajectoryConfig(step_forward=2.0)
        propagator = TemporalPropagator(params, capacity=4)
        start = [[30.0, 4.0, 1.0], [-12.0, -7.5, 0.5], [80.0, 0.0, 1.5], [5.0, 60.0, 0.8]]
        scores = [0.9, 0.7, 0.5, 0.3]
        propagator.update([make_query(params, p) for p in start], scores)

        # when
        for frame in range(1, 5):
            propagated = propagator.propagate(trajectory.motion(frame))
            propagator.update(propagated, [q.score for q in propagated])

        # then
        expected = np.array(start) - [8.0, 0.0, 0.0]
        assert np.stack([q.ref_point for q in propagated]) == pytest.approx(expected, abs=1e-12)
        assert [q.score for q in propagated] == scores
        for query, point in zip(propagated, expected):
            assert query.kind == QueryKind.PROPAGATED
            assert query.embedding == pytest.approx(pos_embed(point, params))
