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
Property and trend checks run by `far check`. Sample counts are multiplied by FAR_CHECK_SCALE.
"""

import itertools
import logging
import math
import time
from abc import abstractmethod
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from far_aggregation import (
    FeatureLevel,
    FeaturePyramid,
    SamplePlan,
    bilinear_sample,
    bilinear_sample_grad,
    deformable_aggregate_batch,
    sample_points,
)
from far_box3d import Box3D
from far_camera_geometry import (
    Camera,
    Intrinsics,
    Pixel,
    Pose,
    default_ring_rig,
    pixel_error_deviation,
    project_points,
    unproject_pixels,
)
from far_config import FarConfig
from far_denoising import (
    NoiseForm,
    NoiseSpec,
    make_noise_groups,
    negative_offset,
    positive_offset,
    range_modulation,
)
from far_depth_bins import DepthBinConfig, local_bin_width
from far_detector_sim import simulate_2d_detector
from far_matching import Prediction, hungarian_match
from far_metrics import average_precision, recall_at
from far_pipeline import PipelineVariant, VariantKind, run_pipeline
from far_query_engine import EmbedParams
from far_scene import GTConfig, SceneConfig, gen_scene

CHECK_SEED = 20240229


class CheckOutcome(NamedTuple):
    passed: bool
    detail: str
    advisory: bool = False


class InvariantCheck:
    """
    A check verifies one property of the simulator on seeded random instances.
    """

    def __init__(self, scale: float = 1.0):
        self.scale = scale

    def count(self, n: int) -> int:
        return max(1, int(round(n * self.scale)))

    @abstractmethod
    def get_id(self) -> str:
        """
        The ID is used to select the check on the command line
        """
        pass

    def get_description(self) -> str:
        return ""

    def is_advisory(self) -> bool:
        """
        A failing advisory check is reported but does not fail the suite
        """
        return False

    @abstractmethod
    def run(self) -> CheckOutcome:
        pass


def random_camera(rng: np.random.Generator, camera_id: str) -> Camera:
    width, height = int(rng.integers(320, 2049)), int(rng.integers(240, 1537))
    f = float(rng.uniform(200.0, 3000.0))
    cx, cy = width * rng.uniform(0.4, 0.6), height * rng.uniform(0.4, 0.6)
    intrinsics = Intrinsics(f, f * rng.uniform(0.9, 1.1), cx, cy, width, height)
    rotation = Rotation.random(random_state=rng).as_matrix()
    return Camera(camera_id, intrinsics, Pose(rotation, rng.uniform(-3.0, 3.0, 3)))


class GeometryRoundTripCheck(InvariantCheck):
    def get_id(self) -> str:
        return "geometry_round_trip"

    def get_description(self) -> str:
        return "project(unproject(pixel, depth)) returns the pixel and depth"

    def run(self) -> CheckOutcome:
        rng = np.random.default_rng(CHECK_SEED)
        cases = self.count(100000)
        worst = 0.0
        remaining = cases
        start = time.monotonic()
        while remaining > 0:
            camera = random_camera(rng, "random")
            n = min(remaining, 1000)
            k = camera.intrinsics
            uv = np.column_stack([rng.uniform(0, k.width, n), rng.uniform(0, k.height, n)])
            depth = rng.uniform(0.5, 300.0, n)
            points = unproject_pixels(uv, depth, camera)
            uv_back, depth_back, in_front = project_points(points, camera)
            if not np.all(in_front):
                return CheckOutcome(False, "unprojected point landed behind its camera")
            pixel_error = np.max(np.abs(uv_back - uv) / np.maximum(np.abs(uv), 1.0))
            depth_error = np.max(np.abs(depth_back - depth) / depth)
            worst = max(worst, float(pixel_error), float(depth_error))
            remaining -= n
        elapsed = time.monotonic() - start
        return CheckOutcome(worst <= 1e-9, f"{cases} cases, max relative error {worst:.3e}, {elapsed:.2f}s")


class ErrorPropagationCheck(InvariantCheck):
    def get_id(self) -> str:
        return "error_propagation"

    def get_description(self) -> str:
        return "3D deviation caused by a pixel error grows linearly with depth"

    def run(self) -> CheckOutcome:
        rig = default_ring_rig()
        pixel = Pixel(700.0, 420.0, "ring_1")
        ratio = pixel_error_deviation(pixel, 150.0, 1.0, 0.0, rig) / pixel_error_deviation(pixel, 50.0, 1.0, 0.0, rig)
        return CheckOutcome(abs(ratio - 3.0) <= 1e-6, f"deviation ratio 150 m / 50 m = {ratio:.12f}")


class LogBinRatioCheck(InvariantCheck):
    def get_id(self) -> str:
        return "log_bin_ratio"

    def get_description(self) -> str:
        return "log-uniform bin width grows linearly with depth"

    def run(self) -> CheckOutcome:
        cfg = DepthBinConfig()
        ratio = local_bin_width(150.0, cfg) / local_bin_width(50.0, cfg)
        return CheckOutcome(abs(ratio - 3.0) <= 1e-9, f"bin width ratio 150 m / 50 m = {ratio:.15f}")


class SamplingGradientCheck(InvariantCheck):
    def get_id(self) -> str:
        return "sampling_gradients"

    def get_description(self) -> str:
        return "analytic bilinear gradients match central differences"

    def run(self) -> CheckOutcome:
        rng = np.random.default_rng(CHECK_SEED + 1)
        h = 1e-5
        worst = 0.0
        pairs = self.count(1000)
        for _ in range(pairs):
            stride = int(rng.choice([1, 4, 8, 16]))
            level = FeatureLevel(rng.normal(0, 1, (int(rng.integers(2, 12)), int(rng.integers(2, 12)), 3)), stride)
            u, v = interior_point(level, rng, margin=1e-4)
            du, dv = bilinear_sample_grad(level, u, v)
            fd_u = (bilinear_sample(level, u + h, v).value - bilinear_sample(level, u - h, v).value) / (2 * h)
            fd_v = (bilinear_sample(level, u, v + h).value - bilinear_sample(level, u, v - h).value) / (2 * h)
            worst = max(worst, float(np.max(np.abs(du - fd_u))), float(np.max(np.abs(dv - fd_v))))
        return CheckOutcome(worst <= 1e-6, f"{pairs} grid/point pairs, max abs deviation {worst:.3e}")


def interior_point(level: FeatureLevel, rng: np.random.Generator, margin: float) -> tuple[float, float]:
    """Pixel whose grid coordinates keep at least `margin` cells away from every cell boundary"""
    while True:
        x = rng.uniform(margin, level.width - 1 - margin)
        y = rng.uniform(margin, level.height - 1 - margin)
        if min(x - math.floor(x), math.ceil(x) - x) > margin and min(y - math.floor(y), math.ceil(y) - y) > margin:
            return x * level.stride, y * level.stride


def random_pyramid(rng: np.random.Generator, rig, channels: int = 4, strides=(8, 16, 32, 64)) -> FeaturePyramid:
    views = {}
    for camera in rig.cameras:
        k = camera.intrinsics
        views[camera.camera_id] = [
            FeatureLevel(rng.normal(0.0, 1.0, (k.height // s, k.width // s, channels)), s) for s in strides
        ]
    return FeaturePyramid(views)


class AggregationConvexityCheck(InvariantCheck):
    def get_id(self) -> str:
        return "aggregation_convexity"

    def get_description(self) -> str:
        return "deformable aggregation is a convex combination of valid samples"

    def run(self) -> CheckOutcome:
        rng = np.random.default_rng(CHECK_SEED + 2)
        rig = default_ring_rig()
        pyramid = random_pyramid(rng, rig)
        plans = self.count(10000)
        violations = 0
        empty = 0
        for _ in range(plans):
            plan = SamplePlan.random(pyramid.num_levels, len(rig), int(rng.integers(1, 6)), 2.0, rng)
            ref = np.array([rng.uniform(-76.2, 76.2), rng.uniform(-76.2, 76.2), rng.uniform(-2.0, 4.0)])
            value, count = deformable_aggregate_batch(ref[None, :], plan, pyramid, rig)
            values, valid = sample_points(ref[None, :] + plan.offsets, pyramid, rig)
            samples = values[valid]
            if count[0] == 0:
                empty += 1
                violations += int(np.any(value[0] != 0.0))
                continue
            low, high = samples.min(axis=0), samples.max(axis=0)
            violations += int(np.any(value[0] < low - 1e-12) or np.any(value[0] > high + 1e-12))

        constant = np.array([0.25, -1.5, 3.0, 7.0])
        flat = pyramid.map_levels(
            lambda view, level: FeatureLevel(np.broadcast_to(constant, level.grid.shape), level.stride)
        )
        plan = SamplePlan.random(flat.num_levels, len(rig), 4, 2.0, rng)
        value, _ = deformable_aggregate_batch(np.array([[30.0, 5.0, 1.0]]), plan, flat, rig)
        constant_error = float(np.max(np.abs(value[0] - constant)))
        passed = violations == 0 and constant_error <= 1e-12
        return CheckOutcome(
            passed,
            f"{plans} plans ({empty} without valid samples), {violations} violations, "
            f"constant pyramid error {constant_error:.1e}",
        )


def random_box(rng: np.random.Generator) -> Box3D:
    return Box3D(
        [rng.uniform(-70, 70), rng.uniform(-70, 70), rng.uniform(0, 2)],
        tuple(rng.uniform(0.3, 12.0, 3)),
        rng.uniform(-math.pi, math.pi),
    )


class DenoiseContainmentCheck(InvariantCheck):
    def get_id(self) -> str:
        return "denoise_containment"

    def get_description(self) -> str:
        return "positive denoising centers stay strictly inside their GT box"

    def run(self) -> CheckOutcome:
        rng = np.random.default_rng(CHECK_SEED + 3)
        draws = self.count(100000)
        outside = 0
        done = 0
        while done < draws:
            box = random_box(rng)
            n = min(1000, draws - done)
            centers = np.stack([box.center + positive_offset(box, rng) for _ in range(n)])
            local = (centers - box.center) @ box.rotation
            outside += int(np.sum(~np.all(np.abs(local) < box.half_size, axis=1)))
            done += n
        return CheckOutcome(outside == 0, f"{draws} draws, {outside} outside their box")


class DenoiseCountCheck(InvariantCheck):
    def get_id(self) -> str:
        return "denoise_counts"

    def get_description(self) -> str:
        return "denoising emits |gts| * G * (1 + K) queries with |gts| * G positives"

    def run(self) -> CheckOutcome:
        rng = np.random.default_rng(CHECK_SEED + 4)
        params = EmbedParams.random(dim=8, context_dim=4, frequencies=2, hidden=8)
        failures = 0
        trials = self.count(50)
        for trial in range(trials):
            gts = [random_box(rng) for _ in range(int(rng.integers(0, 8)))]
            spec = NoiseSpec(
                NoiseForm(rng.choice([f.value for f in NoiseForm])),
                float(rng.uniform(0.5, 4.0)),
                int(rng.integers(1, 4)),
                int(rng.integers(0, 4)),
            )
            groups, targets = make_noise_groups(gts, spec, params, seed=trial)
            queries = [q for g in groups for q in g.queries]
            positives = sum(1 for q in queries if q.kind.value == "denoise_positive")
            expected = len(gts) * spec.groups * (1 + spec.negatives_per_group)
            failures += int(len(queries) != expected or positives != len(gts) * spec.groups or len(targets) != expected)
        return CheckOutcome(failures == 0, f"{trials} random scenes, {failures} count mismatches")


class NegativeMagnitudeCheck(InvariantCheck):
    def get_id(self) -> str:
        return "negative_magnitude_law"

    def get_description(self) -> str:
        return "negative offsets have magnitude scale * g(range)"

    def run(self) -> CheckOutcome:
        rng = np.random.default_rng(CHECK_SEED + 5)
        worst = 0.0
        samples = self.count(10000)
        for form in NoiseForm:
            spec = NoiseSpec(form, 2.0)
            for _ in range(samples // len(NoiseForm) + 1):
                center = np.array([rng.uniform(-76.2, 76.2), rng.uniform(-76.2, 76.2), rng.uniform(0, 2)])
                offset = negative_offset(center, spec, rng)
                expected = spec.scale * float(range_modulation(math.hypot(center[0], center[1]), form))
                worst = max(worst, abs(float(np.linalg.norm(offset)) - expected), abs(float(offset[2])))
        return CheckOutcome(worst <= 1e-12, f"max deviation from closed form {worst:.3e}")


def brute_force_assignment_cost(cost: np.ndarray) -> float:
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
    n, m = cost.shape
    perms = np.array(list(itertools.permutations(range(m), n)))
    return float(cost[np.arange(n), perms].sum(axis=1).min())


class HungarianOptimalityCheck(InvariantCheck):
    def get_id(self) -> str:
        return "hungarian_optimality"

    def get_description(self) -> str:
        return "Hungarian assignment matches permutation brute force"

    def run(self) -> CheckOutcome:
        rng = np.random.default_rng(CHECK_SEED + 6)
        instances = self.count(500)
        failures = 0
        for _ in range(instances):
            cost = rng.uniform(0, 10, (int(rng.integers(1, 8)), int(rng.integers(1, 8))))
            result = hungarian_match(cost)
            failures += int(abs(sum(result.distances) - brute_force_assignment_cost(cost)) > 1e-9)
        return CheckOutcome(failures == 0, f"{instances} instances, {failures} suboptimal")


def oracle_greedy_recall(preds: list[Prediction], gts: list[Box3D], threshold: float) -> float:
    if not gts:
        return 1.0
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    used = set()
    for i in order:
        best, best_distance = None, math.inf
        for j, gt in enumerate(gts):
            if j in used:
                continue
            d = float(np.linalg.norm(preds[i].box.center - gt.center))
            if d <= threshold and d < best_distance:
                best, best_distance = j, d
        if best is not None:
            used.add(best)
    return len(used) / len(gts)


class GreedyRecallCheck(InvariantCheck):
    def get_id(self) -> str:
        return "greedy_recall_oracle"

    def get_description(self) -> str:
        return "greedy recall matches a loop-based oracle"

    def run(self) -> CheckOutcome:
        rng = np.random.default_rng(CHECK_SEED + 7)
        scenes = self.count(200)
        failures = 0
        for _ in range(scenes):
            gts = [
                Box3D([*rng.uniform(-20, 20, 2), rng.uniform(0, 2)], (1.9, 4.6, 1.6))
                for _ in range(int(rng.integers(0, 21)))
            ]
            preds = [Prediction(g.moved(g.center + rng.normal(0, 1.5, 3)), float(rng.uniform())) for g in gts]
            preds += [
                Prediction(Box3D([*rng.uniform(-20, 20, 2), 1.0], (1.9, 4.6, 1.6)), float(rng.uniform()))
                for _ in range(int(rng.integers(0, 6)))
            ]
            result = recall_at(preds, gts, (1.0, 2.0, 4.0))
            for t, recall in result.recalls.items():
                failures += int(abs(recall - oracle_greedy_recall(preds, gts, t)) > 1e-12)
        return CheckOutcome(failures == 0, f"{scenes} scenes, {failures} recall mismatches")


def ap_golden_scenario() -> tuple[list[Prediction], list[Box3D]]:
    """Three GT boxes and five predictions ranked TP, FP, TP, FP, TP; AP = 34/45"""
    gts = [Box3D([10.0 * i, 0.0, 1.0], (1.9, 4.6, 1.6)) for i in range(1, 4)]
    far = Box3D([0.0, 60.0, 1.0], (1.9, 4.6, 1.6))
    preds = [
        Prediction(gts[0], 0.9),
        Prediction(far.moved([0.0, 60.0, 1.0]), 0.8),
        Prediction(gts[1], 0.7),
        Prediction(far.moved([0.0, -60.0, 1.0]), 0.6),
        Prediction(gts[2], 0.5),
    ]
    return preds, gts


class ApGoldenCheck(InvariantCheck):
    def get_id(self) -> str:
        return "ap_golden"

    def get_description(self) -> str:
        return "hand-derived AP scenario"

    def run(self) -> CheckOutcome:
        preds, gts = ap_golden_scenario()
        ap = average_precision(preds, gts, 2.0)
        return CheckOutcome(abs(ap - 34.0 / 45.0) <= 1e-12, f"AP {ap:.15f}, expected {34.0 / 45.0:.15f}")


def small_scene_config(seed: int) -> SceneConfig:
    return SceneConfig(seed=seed, gt=GTConfig(count=30))


class DeterminismCheck(InvariantCheck):
    def get_id(self) -> str:
        return "determinism"

    def get_description(self) -> str:
        return "identical config and seed give byte-identical report JSON"

    def run(self) -> CheckOutcome:
        reports = []
        for _ in range(2):
            cfg = small_scene_config(7)
            result = run_pipeline(gen_scene(cfg), PipelineVariant(VariantKind.ADAPTIVE_PLUS_GLOBAL, n_global=100))
            reports.append(result.report.to_json())
        return CheckOutcome(reports[0] == reports[1], f"{len(reports[0])} bytes per report")


class TrendCheck(InvariantCheck):
    """Base for checks that compare pipeline variants over a range of seeds"""

    def seeds(self) -> list[int]:
        return list(range(self.count(10)))

    @staticmethod
    def coverage(result, band: str, threshold: float = 2.0) -> float:
        return result.diagnostics.coverage[band][threshold]

    @staticmethod
    def runs(seed: int, variants: list[PipelineVariant]):
        scene = gen_scene(SceneConfig(seed=seed))
        detections = simulate_2d_detector(scene)
        return [run_pipeline(scene, v, detections=detections) for v in variants]


class RecallGapCheck(TrendCheck):
    def get_id(self) -> str:
        return "recall_gap_trend"

    def get_description(self) -> str:
        return "2D recall at 50-150 m exceeds global-only 3D coverage by at least 0.2"

    def run(self) -> CheckOutcome:
        gaps = []
        for seed in self.seeds():
            (result,) = self.runs(seed, [PipelineVariant(VariantKind.GLOBAL_ONLY, n_global=644)])
            gaps.append(result.diagnostics.recall_2d["50-150"] - self.coverage(result, "50-150"))
        mean_gap = float(np.mean(gaps))
        return CheckOutcome(mean_gap >= 0.2, f"mean gap {mean_gap:.3f} over {len(gaps)} seeds")


class BudgetTrendCheck(TrendCheck):
    def get_id(self) -> str:
        return "budget_trend"

    def get_description(self) -> str:
        return "adaptive queries keep coverage stable when the global budget shrinks"

    def run(self) -> CheckOutcome:
        budgets = [100, 300, 644]
        mixed = {n: [] for n in budgets}
        global_only = {n: [] for n in budgets}
        for seed in self.seeds():
            variants = [PipelineVariant(VariantKind.ADAPTIVE_PLUS_GLOBAL, n_global=n) for n in budgets]
            variants += [PipelineVariant(VariantKind.GLOBAL_ONLY, n_global=n) for n in budgets]
            results = self.runs(seed, variants)
            for i, n in enumerate(budgets):
                mixed[n].append(self.coverage(results[i], "0-150"))
                global_only[n].append(self.coverage(results[len(budgets) + i], "0-150"))
        mixed_mean = [float(np.mean(mixed[n])) for n in budgets]
        global_mean = [float(np.mean(global_only[n])) for n in budgets]
        mixed_spread = (max(mixed_mean) - min(mixed_mean)) / max(mixed_mean)
        global_drop = 1.0 - global_mean[0] / global_mean[-1] if global_mean[-1] > 0 else 0.0
        return CheckOutcome(
            mixed_spread <= 0.1 and global_drop >= 0.5,
            f"adaptive+global spread {mixed_spread:.3f}, global-only drop {global_drop:.3f}",
        )


class RangeBandTrendCheck(TrendCheck):
    """
    Near/far coverage gaps per seed. With global anchors drawn uniformly over the range box the
    global-only gap sits near zero, so neither direction is guaranteed; the check is advisory.
    """

    def get_id(self) -> str:
        return "range_band_trend"

    def get_description(self) -> str:
        return "global-only coverage degrades with range and adaptive queries shrink the near/far gap"

    def is_advisory(self) -> bool:
        return True

    def run(self) -> CheckOutcome:
        degrades, shrinks = [], []
        for seed in self.seeds():
            results = self.runs(
                seed,
                [
                    PipelineVariant(VariantKind.GLOBAL_ONLY, n_global=644),
                    PipelineVariant(VariantKind.ADAPTIVE_ONLY),
                    PipelineVariant(VariantKind.ADAPTIVE_PLUS_GLOBAL, n_global=644),
                ],
            )
            gaps = [self.coverage(r, "0-50") - self.coverage(r, "50-150") for r in results]
            degrades.append(gaps[0] > 0)
            shrinks.append(gaps[1] < gaps[0] and gaps[2] < gaps[0])
        required = math.ceil(0.9 * len(shrinks))
        return CheckOutcome(
            sum(degrades) == len(degrades) and sum(shrinks) >= required,
            f"global-only degrades for {sum(degrades)} and the gap shrinks for {sum(shrinks)} of {len(shrinks)} seeds",
        )


class InvariantCheckFactory:
    def __init__(self, config: FarConfig):
        self.__log = logging.getLogger(InvariantCheckFactory.__name__)
        self.__config = config

    def create_checks(self, ids: list[str] | None = None) -> list[InvariantCheck]:
        scale = self.__config.check_scale
        checks = [
            GeometryRoundTripCheck(scale),
            ErrorPropagationCheck(scale),
            LogBinRatioCheck(scale),
            SamplingGradientCheck(scale),
            AggregationConvexityCheck(scale),
            DenoiseContainmentCheck(scale),
            DenoiseCountCheck(scale),
            NegativeMagnitudeCheck(scale),
            HungarianOptimalityCheck(scale),
            GreedyRecallCheck(scale),
            ApGoldenCheck(scale),
            DeterminismCheck(scale),
            RecallGapCheck(scale),
            BudgetTrendCheck(scale),
            RangeBandTrendCheck(scale),
        ]
        if ids is None:
            self.__log.info("Running all %d checks at scale %g", len(checks), scale)
            return checks
        known = {c.get_id() for c in checks}
        unknown = [i for i in ids if i not in known]
        if unknown:
            raise ValueError(f"Unknown checks {unknown}, available: {','.join(sorted(known))}")
        selected = [c for c in checks if c.get_id() in ids]
        self.__log.info("Running %d of %d checks at scale %g", len(selected), len(checks), scale)
        return selected


class CheckRunner:
    def __init__(self, checks: list[InvariantCheck]):
        self.__log = logging.getLogger(CheckRunner.__name__)
        self.__checks = checks

    def run(self) -> dict[str, CheckOutcome]:
        outcomes = {}
        for check in self.__checks:
            self.__log.info('Running check "%s": %s', check.get_id(), check.get_description())
            try:
                outcome = check.run()
            except Exception as e:
                self.__log.exception("Check %s raised", check.get_id())
                outcome = CheckOutcome(False, f"raised {type(e).__name__}: {e}")
            outcome = outcome._replace(advisory=check.is_advisory())
            if outcome.passed:
                self.__log.info("PASS %s: %s", check.get_id(), outcome.detail)
            elif outcome.advisory:
                self.__log.warning("FAIL (advisory) %s: %s", check.get_id(), outcome.detail)
            else:
                self.__log.error("FAIL %s: %s", check.get_id(), outcome.detail)
            outcomes[check.get_id()] = outcome
        return outcomes
