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

import json

import numpy as np
import pytest

from far_errors import SceneConfigError
from far_scene import (
    CategoryTemplate,
    DetectorNoise,
    EmbeddingConfig,
    GTConfig,
    RangeConfig,
    SceneConfig,
    gen_scene,
    parse_band,
    sample_band_boxes,
)


def small_config(seed: int = 0, **changes) -> SceneConfig:
    return SceneConfig(seed=seed, gt=GTConfig(count=20), **changes)


class TestSceneConfig:
    def test_defaults(self):
        # when
        cfg = SceneConfig()

        # then
        assert cfg.frames == 1
        assert cfg.gt.count == 120
        assert cfg.range.half_extent == 76.2
        assert cfg.rig.camera_ids == [f"ring_{i}" for i in range(6)] + ["front_long"]

    def test_dict_round_trip(self):
        # given
        cfg = small_config(seed=5, frames=3, tau=0.25)

        # when
        restored = SceneConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))

        # then
        assert restored.to_dict() == cfg.to_dict()

    def test_read_partial_config_from_file(self, tmp_path):
        # given
        path = tmp_path / "scene.json"
        path.write_text(json.dumps({"seed": 3, "gt": {"count": 7}, "refinement": {"iterations": 1}}))

        # when
        cfg = SceneConfig.from_file(str(path))

        # then
        assert cfg.seed == 3
        assert cfg.gt.count == 7
        assert cfg.refinement_iterations == 1
        assert cfg.pyramid.channels == 16

    def test_reject_unknown_field(self):
        with pytest.raises(SceneConfigError):
            SceneConfig.from_dict({"gt": {"count": 3, "density": 0.5}})

    def test_reject_context_dim_differing_from_channels(self):
        with pytest.raises(SceneConfigError):
            SceneConfig(embedding=EmbeddingConfig(context_dim=8))

    def test_reject_malformed_band_label(self):
        with pytest.raises(SceneConfigError):
            parse_band("far")

    def test_reject_increasing_drop_probability(self):
        with pytest.raises(SceneConfigError):
            DetectorNoise(drop_curve=((0.0, 0.1), (100.0, 0.5)))

    def test_drop_probability_interpolates_area(self):
        # given
        noise = DetectorNoise(drop_curve=((0.0, 0.4), (100.0, 0.0)))

        # then
        assert noise.drop_probability(50.0) == pytest.approx(0.2)
        assert noise.drop_probability(1000.0) == 0.0

    def test_with_seed_keeps_other_settings(self):
        # when
        cfg = small_config(seed=1).with_seed(9)

        # then
        assert cfg.seed == 9
        assert cfg.gt.count == 20


class TestGenScene:
    def test_same_seed_gives_same_scene(self):
        # when
        first = gen_scene(small_config(seed=4))
        second = gen_scene(small_config(seed=4))

        # then
        assert [b.to_dict() for b in first.frames[0].boxes] == [b.to_dict() for b in second.frames[0].boxes]
        grid_a = first.frames[0].pyramid.levels("ring_0")[0].grid
        grid_b = second.frames[0].pyramid.levels("ring_0")[0].grid
        assert np.array_equal(grid_a, grid_b)

    def test_different_seeds_give_different_scenes(self):
        # when
        first = gen_scene(small_config(seed=4))
        second = gen_scene(small_config(seed=5))

        # then
        assert first.frames[0].boxes[0].to_dict() != second.frames[0].boxes[0].to_dict()

    def test_boxes_follow_band_weights(self):
        # given
        cfg = SceneConfig(gt=GTConfig(count=50, band_weights={"50-150": 1.0}))

        # when
        boxes = gen_scene(cfg).frames[0].boxes

        # then
        assert len(boxes) == 50
        assert all(50.0 <= b.ground_range < 150.0 for b in boxes)
        assert all(abs(b.center[0]) <= 76.2 and abs(b.center[1]) <= 76.2 for b in boxes)

    def test_band_histogram_within_multinomial_bounds(self):
        # given
        weights = {"0-30": 0.2, "30-60": 0.3, "60-150": 0.5}
        cfg = SceneConfig(gt=GTConfig(count=10000, band_weights=weights))

        # when
        ranges = np.array([b.ground_range for b in sample_band_boxes(cfg, np.random.default_rng(12))])

        # then
        for label, p in weights.items():
            lo, hi = parse_band(label)
            count = np.count_nonzero((ranges >= lo) & (ranges < hi))
            assert abs(count - 10000 * p) <= 3 * np.sqrt(10000 * p * (1 - p))

    def test_boxes_respect_min_range_and_rest_on_ground(self):
        # given
        cfg = SceneConfig(gt=GTConfig(count=50, band_weights={"0-50": 1.0}), range=RangeConfig(min_range=10.0))

        # when
        boxes = gen_scene(cfg).frames[0].boxes

        # then
        assert all(b.ground_range >= 10.0 for b in boxes)
        assert all(b.center[2] == pytest.approx(b.size[2] / 2) for b in boxes)

    def test_categories_follow_templates(self):
        # given
        cfg = SceneConfig(gt=GTConfig(count=10, categories={"truck": CategoryTemplate((2.5, 8.0, 3.2), 1.0)}))

        # when
        boxes = gen_scene(cfg).frames[0].boxes

        # then
        assert {b.category for b in boxes} == {"truck"}
        assert all(7.2 <= b.size[1] <= 8.8 for b in boxes)

    def test_static_world_moves_backwards_while_driving(self):
        # given
        cfg = SceneConfig(frames=3, gt=GTConfig(count=10, band_weights={"0-50": 1.0}))

        # when
        scene = gen_scene(cfg)

        # then
        assert scene.frames[2].pose.apply(np.zeros(3)) == pytest.approx([-2.0, 0.0, 0.0])
        first = {tuple(np.round(b.center[1:], 9)): b.center[0] for b in scene.frames[0].boxes}
        for b in scene.frames[1].boxes:
            assert first[tuple(np.round(b.center[1:], 9))] == pytest.approx(b.center[0] + 1.0)

    def test_pyramid_covers_every_view_and_stride(self):
        # when
        pyramid = gen_scene(small_config()).frames[0].pyramid

        # then
        assert sorted(pyramid.views) == sorted(SceneConfig().rig.camera_ids)
        assert pyramid.strides == [8, 16, 32, 64]
        assert pyramid.levels("front_long")[0].grid.shape == (80, 120, 16)

    def test_empty_scene(self):
        # when
        scene = gen_scene(SceneConfig(gt=GTConfig(count=0)))

        # then
        assert scene.frames[0].boxes == []
