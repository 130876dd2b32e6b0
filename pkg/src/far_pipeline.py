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

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from far_aggregation import (
    GateParams,
    SamplePlan,
    camera_gate,
    deformable_aggregate_batch,
    select_levels_for_range,
)
from far_box3d import Box3D
from far_camera_geometry import CameraRig
from far_config import SceneLogger
from far_denoising import make_noise_groups, separation_margin
from far_detector_sim import FrameDetections, recall_2d_by_band, simulate_2d_detector
from far_matching import Prediction
from far_metrics import (
    DEFAULT_BANDS,
    DEFAULT_THRESHOLDS,
    EvalFrame,
    MetricsReport,
    coverage_hits,
    make_bands,
    range_band_metrics_frames,
)
from far_query_engine import (
    ANCHOR_LAYOUT_CARTESIAN,
    ANCHOR_LAYOUTS,
    EmbedParams,
    Query,
    QueryKind,
    assemble_query_set,
    generate_adaptive_queries,
    make_global_queries,
)
from far_scene import LEVEL_SELECTION_RANGE, Scene, SceneConfig, SceneFrame
from far_temporal import TemporalPropagator

DEFAULT_N_GLOBAL = 644
GLOBAL_FALLBACK_CATEGORY = "car"


class VariantKind(str, Enum):
    GLOBAL_ONLY = "global_only"
    ADAPTIVE_ONLY = "adaptive_only"
    ADAPTIVE_PLUS_GLOBAL = "adaptive_plus_global"


@dataclass(frozen=True)
class PipelineVariant:
    kind: VariantKind = VariantKind.ADAPTIVE_PLUS_GLOBAL
    n_global: int = DEFAULT_N_GLOBAL
    tau: float | None = None
    use_gt_depth: bool = False
    use_propagation: bool = True
    extra_global: int = 0
    global_layout: str = ANCHOR_LAYOUT_CARTESIAN

    def __post_init__(self):
        object.__setattr__(self, "kind", VariantKind(self.kind))
        if self.n_global < 0 or self.extra_global < 0:
            raise ValueError(f"Global query counts must be non-negative, got {self.n_global}, {self.extra_global}")
        if self.global_layout not in ANCHOR_LAYOUTS:
            raise ValueError(f"Unknown anchor layout '{self.global_layout}', expected one of {ANCHOR_LAYOUTS}")

    @property
    def global_count(self) -> int:
        base = 0 if self.kind == VariantKind.ADAPTIVE_ONLY else self.n_global
        return base + self.extra_global

    @property
    def uses_adaptive(self) -> bool:
        return self.kind != VariantKind.GLOBAL_ONLY

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "n_global": self.n_global,
            "tau": self.tau,
            "use_gt_depth": self.use_gt_depth,
            "use_propagation": self.use_propagation,
            "extra_global": self.extra_global,
            "global_layout": self.global_layout,
        }


@dataclass
class Diagnostics:
    query_counts: dict[str, int] = field(default_factory=lambda: {kind.value: 0 for kind in QueryKind})
    detections_2d: int = 0
    recall_2d: dict[str, float | None] = field(default_factory=dict)
    recall_2d_pairs: dict[str, float | None] = field(default_factory=dict)
    coverage: dict[str, dict[float, float | None]] = field(default_factory=dict)
    denoise_queries: int = 0
    denoise_positives: int = 0
    margin_mean: float | None = None
    margin_min: float | None = None
    margin_positive_fraction: float | None = None
    mean_refinement_shift: float | None = None

    def to_dict(self) -> dict:
        return {
            "query_counts": dict(self.query_counts),
            "detections_2d": self.detections_2d,
            "recall_2d": dict(self.recall_2d),
            "recall_2d_pairs": dict(self.recall_2d_pairs),
            "coverage": {band: {str(t): v for t, v in per.items()} for band, per in self.coverage.items()},
            "denoise": {
                "queries": self.denoise_queries,
                "positives": self.denoise_positives,
                "margin_mean": self.margin_mean,
                "margin_min": self.margin_min,
                "margin_positive_fraction": self.margin_positive_fraction,
            },
            "mean_refinement_shift": self.mean_refinement_shift,
        }


@dataclass(frozen=True, eq=False)
class PipelineResult:
    predictions: list[list[Prediction]]
    report: MetricsReport
    diagnostics: Diagnostics
    queries: list[list[Query]] = field(default_factory=list, repr=False)


class FeatureRefiner:
    """
    Deterministic stand-in for decoder refinement: each iteration moves a reference point to the
    candidate of its offset neighborhood with the highest aggregated feature energy.
    """

    def __init__(self, cfg: SceneConfig, rig: CameraRig, gate: GateParams):
        self.__log = logging.getLogger(FeatureRefiner.__name__)
        self.__cfg = cfg
        self.__rig = rig
        self.__gate = gate

    def __level_mask(self, points: np.ndarray, num_levels: int) -> np.ndarray | None:
        if self.__cfg.aggregation.level_selection != LEVEL_SELECTION_RANGE:
            return None
        ranges = np.hypot(points[:, 0], points[:, 1])
        return np.stack([select_levels_for_range(r, num_levels) for r in ranges]).reshape(-1, num_levels)

    def refine(self, ref_points: np.ndarray, frame: SceneFrame) -> tuple[np.ndarray, np.ndarray]:
        """
        Returns:
            (points, features): refined (N, 3) reference points and their aggregated (N, C) features.
        """
        pyramid = camera_gate(frame.pyramid, self.__rig, self.__gate)
        num_levels, num_views = pyramid.num_levels, len(self.__rig)
        aggregation = self.__cfg.aggregation
        plan = SamplePlan.ring(num_levels, num_views, aggregation.offsets, aggregation.offset_radius)
        point_plan = SamplePlan(np.zeros((1, 3)), np.zeros((1, num_levels, num_views)))

        points = np.asarray(ref_points, dtype=np.float64).reshape(-1, 3)
        n, m = points.shape[0], plan.num_offsets
        if n == 0:
            return points, np.zeros((0, pyramid.channels))
        for iteration in range(self.__cfg.refinement_iterations):
            candidates = (points[:, None, :] + plan.offsets[None, :, :]).reshape(-1, 3)
            values, _ = deformable_aggregate_batch(
                candidates, point_plan, pyramid, self.__rig, self.__level_mask(candidates, num_levels)
            )
            energy = np.linalg.norm(values, axis=1).reshape(n, m)
            best = np.argmax(energy, axis=1)
            moved = int(np.count_nonzero(best))
            points = candidates.reshape(n, m, 3)[np.arange(n), best]
            self.__log.debug("Refinement step %d moved %d of %d queries", iteration, moved, n)
        features, _ = deformable_aggregate_batch(
            points, plan, pyramid, self.__rig, self.__level_mask(points, num_levels)
        )
        return points, features


class PipelineRunner:
    """Runs one query-set variant over every frame of a scene"""

    def __init__(self, scene: Scene, variant: PipelineVariant, cfg: SceneConfig | None = None):
        self.__cfg = cfg if cfg is not None else scene.config
        self.__log = SceneLogger(logging.getLogger(PipelineRunner.__name__), self.__cfg.seed)
        self.__scene = scene
        self.__variant = variant
        emb = self.__cfg.embedding
        self.__range_box = self.__cfg.range.range_box()
        self.__params = EmbedParams.random(
            emb.dim, emb.context_dim, emb.frequencies, emb.hidden, self.__range_box, seed=self.__cfg.seed + 1
        )
        self.__gate = GateParams.random(self.__cfg.pyramid.channels, seed=self.__cfg.seed + 2)
        self.__energy_scale = max(self.__cfg.pyramid.bump, 1e-9) / 2

    @property
    def params(self) -> EmbedParams:
        return self.__params

    def __category_size(self, category: str | None) -> tuple[str, tuple[float, float, float]]:
        categories = self.__cfg.gt.categories
        if category not in categories:
            category = GLOBAL_FALLBACK_CATEGORY if GLOBAL_FALLBACK_CATEGORY in categories else next(iter(categories))
        return category, categories[category].size

    def __predict(self, queries: list[Query], points: np.ndarray, features: np.ndarray) -> list[Prediction]:
        scores = np.tanh(np.linalg.norm(features, axis=1) / self.__energy_scale)
        predictions = []
        for q, point, score in zip(queries, points, scores):
            category, size = self.__category_size(q.source.category if q.source is not None else None)
            predictions.append(Prediction(Box3D(point, size, 0.0, category), float(score)))
        return predictions

    def run(self, detections: list[FrameDetections] | None = None) -> PipelineResult:
        cfg, variant = self.__cfg, self.__variant
        rig = self.__scene.rig
        tau = cfg.tau if variant.tau is None else variant.tau
        if detections is None:
            detections = simulate_2d_detector(self.__scene)
        propagator = TemporalPropagator(self.__params, cfg.memory_capacity)
        refiner = FeatureRefiner(cfg, rig, self.__gate)
        global_queries = make_global_queries(
            variant.global_count, cfg.seed, self.__params, self.__range_box, variant.global_layout
        )
        bands = make_bands(DEFAULT_BANDS)
        nearest_by_band = {band.label: [] for band in bands}
        diagnostics = Diagnostics()
        predictions, eval_frames, all_queries = [], [], []
        margins, shifts = [], []

        for frame, frame_dets in zip(self.__scene.frames, detections):
            adaptive = []
            if variant.uses_adaptive:
                adaptive = generate_adaptive_queries(
                    frame_dets.detections,
                    frame_dets.depths,
                    rig,
                    cfg.depth_bins,
                    self.__params,
                    tau,
                    frame_dets.gt_depths,
                    variant.use_gt_depth,
                    self.__range_box,
                )
            propagated = propagator.propagate(frame.motion) if variant.use_propagation else []
            queries = assemble_query_set(global_queries, adaptive, propagated)
            for q in queries:
                diagnostics.query_counts[q.kind.value] += 1

            ref_points = np.stack([q.ref_point for q in queries]) if queries else np.zeros((0, 3))
            nearest = coverage_hits(ref_points, frame.boxes)
            for band in bands:
                for gi, gt in enumerate(frame.boxes):
                    if band.contains(gt.ground_range):
                        nearest_by_band[band.label].append(nearest[gi])

            points, features = refiner.refine(ref_points, frame)
            if len(queries):
                shifts.extend(np.linalg.norm(points - ref_points, axis=1))
            frame_predictions = self.__predict(queries, points, features)
            predictions.append(frame_predictions)
            eval_frames.append(EvalFrame(frame_predictions, frame.boxes))
            all_queries.append(queries)

            groups, _ = make_noise_groups(frame.boxes, cfg.denoise, self.__params, seed=cfg.seed + frame.index)
            diagnostics.denoise_queries += sum(len(g.queries) for g in groups)
            diagnostics.denoise_positives += len(groups)
            margins.extend(separation_margin(groups, frame.boxes))

            if variant.use_propagation:
                propagator.update(queries, [p.score for p in frame_predictions])
            self.__log.debug(
                "Frame %d: %d global, %d adaptive, %d propagated queries",
                frame.index,
                len(global_queries),
                len(adaptive),
                len(propagated),
            )

        diagnostics.coverage = {
            label: {t: (float(np.mean(np.array(d) <= t)) if d else None) for t in DEFAULT_THRESHOLDS}
            for label, d in nearest_by_band.items()
        }
        diagnostics.detections_2d = sum(len(d) for d in detections)
        recall = recall_2d_by_band(detections, [f.boxes for f in self.__scene.frames], DEFAULT_BANDS)
        diagnostics.recall_2d = {label: r.object_recall for label, r in recall.items()}
        diagnostics.recall_2d_pairs = {label: r.pair_recall for label, r in recall.items()}
        if margins:
            diagnostics.margin_mean = float(np.mean(margins))
            diagnostics.margin_min = float(np.min(margins))
            diagnostics.margin_positive_fraction = float(np.mean(np.array(margins) > 0))
        if shifts:
            diagnostics.mean_refinement_shift = float(np.mean(shifts))

        metadata = {
            "variant": variant.to_dict(),
            "seed": cfg.seed,
            "frames": len(self.__scene.frames),
            "tau": tau,
            "num_gts": sum(len(f.boxes) for f in self.__scene.frames),
            "num_predictions": sum(len(p) for p in predictions),
        }
        report = range_band_metrics_frames(eval_frames, DEFAULT_BANDS, DEFAULT_THRESHOLDS, metadata)
        report = report.with_coverage(diagnostics.coverage)
        self.__log.info(
            "Variant %s: %d predictions, coverage@2m %s",
            variant.kind.value,
            metadata["num_predictions"],
            {label: per.get(2.0) for label, per in diagnostics.coverage.items()},
        )
        return PipelineResult(predictions, report, diagnostics, all_queries)


def run_pipeline(
    scene: Scene,
    variant: PipelineVariant,
    cfg: SceneConfig | None = None,
    detections: list[FrameDetections] | None = None,
) -> PipelineResult:
    return PipelineRunner(scene, variant, cfg).run(detections)
