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

import pytest

from far_detector_sim import simulate_2d_detector
from far_pipeline import PipelineVariant, VariantKind, run_pipeline
from far_scene import CategoryTemplate, DetectorNoise, GTConfig, RangeConfig, SceneConfig, gen_scene

NOISELESS = DetectorNoise(
    pixel_jitter=0.0,
    drop_curve=((0.0, 0.0),),
    score_noise=0.0,
    depth_noise_a=0.0,
    depth_noise_b=0.0,
)


def scene_config(seed: int = 0, count: int = 40, **changes) -> SceneConfig:
    return SceneConfig(seed=seed, gt=GTConfig(count=count), **changes)


class TestPipeline:
    def test_noiseless_adaptive_queries_cover_every_box(self):
        # given
        cfg = SceneConfig(
            gt=GTConfig(count=40, categories={"car": CategoryTemplate((1.9, 4.6, 1.6), 1.0)}),
            range=RangeConfig(min_range=10.0),
            detector=NOISELESS,
        )
        variant = PipelineVariant(VariantKind.ADAPTIVE_ONLY, tau=0.0, use_gt_depth=True)

        # when
        result = run_pipeline(gen_scene(cfg), variant)

        # then
        assert result.diagnostics.coverage["0-150"][1.0] == pytest.approx(1.0)
        assert result.report.band("0-150").threshold(1.0).coverage_recall == pytest.approx(1.0)

    def test_query_counts_follow_variant(self):
        # given
        scene = gen_scene(scene_config())
        detections = simulate_2d_detector(scene)

        # when
        global_only = run_pipeline(scene, PipelineVariant(VariantKind.GLOBAL_ONLY, n_global=50), detections=detections)
        adaptive_only = run_pipeline(scene, PipelineVariant(VariantKind.ADAPTIVE_ONLY), detections=detections)

        # then
        assert global_only.diagnostics.query_counts["global"] == 50
        assert global_only.diagnostics.query_counts["adaptive"] == 0
        assert adaptive_only.diagnostics.query_counts["global"] == 0
        assert adaptive_only.diagnostics.query_counts["adaptive"] > 0

    def test_extra_global_queries_are_added_to_every_variant(self):
        # given
        scene = gen_scene(scene_config(count=10))

        # when
        result = run_pipeline(scene, PipelineVariant(VariantKind.ADAPTIVE_ONLY, extra_global=25))

        # then
        assert result.diagnostics.query_counts["global"] == 25

    def test_adaptive_queries_raise_far_coverage(self):
        # given
        scene = gen_scene(scene_config(count=60))
        detections = simulate_2d_detector(scene)

        # when
        global_only = run_pipeline(scene, PipelineVariant(VariantKind.GLOBAL_ONLY), detections=detections)
        mixed = run_pipeline(scene, PipelineVariant(VariantKind.ADAPTIVE_PLUS_GLOBAL), detections=detections)

        # then
        far_global = global_only.diagnostics.coverage["50-150"][2.0]
        far_mixed = mixed.diagnostics.coverage["50-150"][2.0]
        assert far_mixed > far_global + 0.2

    def test_same_seed_gives_identical_report(self):
        # given
        variant = PipelineVariant(VariantKind.ADAPTIVE_PLUS_GLOBAL, n_global=100)

        # when
        first = run_pipeline(gen_scene(scene_config(seed=2, count=15)), variant)
        second = run_pipeline(gen_scene(scene_config(seed=2, count=15)), variant)

        # then
        assert first.report.to_json() == second.report.to_json()

    def test_propagated_queries_fill_memory_from_second_frame(self):
        # given
        cfg = scene_config(count=10, frames=2, memory_capacity=16)

        # when
        result = run_pipeline(gen_scene(cfg), PipelineVariant(VariantKind.ADAPTIVE_PLUS_GLOBAL, n_global=100))

        # then
        assert result.diagnostics.query_counts["propagated"] == 16
        assert len(result.queries) == 2
        assert not any(q.kind.value == "propagated" for q in result.queries[0])

    def test_propagation_can_be_disabled(self):
        # given
        cfg = scene_config(count=10, frames=2)
        variant = PipelineVariant(VariantKind.GLOBAL_ONLY, n_global=20, use_propagation=False)

        # when
        result = run_pipeline(gen_scene(cfg), variant)

        # then
        assert result.diagnostics.query_counts["propagated"] == 0

    def test_denoise_diagnostics(self):
        # given
        scene = gen_scene(scene_config(count=12))

        # when
        result = run_pipeline(scene, PipelineVariant(VariantKind.GLOBAL_ONLY, n_global=10))

        # then
        boxes = len(scene.frames[0].boxes)
        assert result.diagnostics.denoise_queries == boxes * scene.config.denoise.queries_per_gt
        assert result.diagnostics.denoise_positives == boxes * scene.config.denoise.groups
        assert result.diagnostics.query_counts["denoise_positive"] == 0

    def test_report_metadata_and_prediction_scores(self):
        # given
        scene = gen_scene(scene_config(count=10))

        # when
        result = run_pipeline(scene, PipelineVariant(VariantKind.GLOBAL_ONLY, n_global=30))

        # then
        assert result.report.metadata["variant"]["kind"] == "global_only"
        assert result.report.metadata["num_predictions"] == 30
        assert all(0.0 <= p.score <= 1.0 for p in result.predictions[0])

    def test_reject_negative_global_budget(self):
        with pytest.raises(ValueError):
            PipelineVariant(VariantKind.GLOBAL_ONLY, n_global=-1)

    def test_global_anchors_default_to_uniform_layout(self):
        assert PipelineVariant().global_layout == "cartesian"
        with pytest.raises(ValueError):
            PipelineVariant(global_layout="spiral")
