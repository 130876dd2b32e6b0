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
Simulated 2D detector and depth head.

A GT box yields a candidate detection in every view where its center projects inside the
image and all of its corners lie in front of the camera. The candidate box is amodal: the
smallest box centered on the projected 3D center that encloses every projected corner. It
is not clipped to the image, so the box center is the projected object center.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from far_aggregation import bilinear_sample
from far_box3d import Box3D
from far_camera_geometry import BEHIND_CAMERA_EPS, Camera, CameraRig, project_points
from far_config import SceneLogger
from far_depth_bins import DepthBinConfig, DepthDistribution
from far_metrics import make_bands
from far_query_engine import Detection2D
from far_scene import DetectorNoise, Scene, SceneFrame

IOU_2D_THRESHOLD = 0.5


@dataclass(frozen=True)
class ProjectedBox:
    gt_index: int
    view: str
    box: tuple[float, float, float, float]
    depth: float


@dataclass
class FrameDetections:
    """Detections of one frame with their depth distributions, aligned by index"""

    detections: list[Detection2D] = field(default_factory=list)
    depths: list[DepthDistribution] = field(default_factory=list)
    gt_depths: list[float] = field(default_factory=list)
    gt_indices: list[int] = field(default_factory=list)
    projected: list[ProjectedBox] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.detections)


def iou_2d(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def project_box(box: Box3D, camera: Camera) -> tuple[tuple[float, float, float, float], float] | None:
    """Center-aligned amodal 2D box and center depth, or None when the box is not detectable in `camera`"""
    k = camera.intrinsics
    center_uv, center_depth, center_in_front = project_points(box.center, camera)
    if not center_in_front[0] or not k.contains(center_uv[0, 0], center_uv[0, 1]):
        return None
    uv, depth, _ = project_points(box.corners(), camera)
    if np.any(depth <= BEHIND_CAMERA_EPS):
        return None
    half = np.max(np.abs(uv - center_uv[0]), axis=0)
    if not np.all(half > 0):
        return None
    u, v = center_uv[0]
    return (float(u - half[0]), float(v - half[1]), float(u + half[0]), float(v + half[1])), float(center_depth[0])


def detection_score(area: float, noise: DetectorNoise, rng: np.random.Generator) -> float:
    """Logistic in log pixel area, lifted by the score floor, plus gaussian noise"""
    logistic = expit(noise.score_slope * (math.log(max(area, 1e-9)) - math.log(noise.score_mid_area)))
    score = noise.score_floor + (1.0 - noise.score_floor) * logistic + rng.normal(0.0, noise.score_noise)
    return float(np.clip(score, 0.0, 1.0))


def jitter_box(box, sigma: float, width: int, height: int, rng: np.random.Generator):
    """Gaussian corner jitter. Boxes that collapse or whose center leaves the image are lost."""
    jittered = np.array(box) + rng.normal(0.0, sigma, 4)
    u = np.sort(jittered[[0, 2]])
    v = np.sort(jittered[[1, 3]])
    if not (u[0] < u[1] and v[0] < v[1]):
        return None
    cu, cv = u.mean(), v.mean()
    if not (0 <= cu < width and 0 <= cv < height):
        return None
    return float(u[0]), float(v[0]), float(u[1]), float(v[1])


class DetectorSimulator:
    """High-recall 2D detector whose miss rate and score depend on the projected pixel area"""

    def __init__(self, rig: CameraRig, noise: DetectorNoise, depth_bins: DepthBinConfig, seed: int = 0):
        self.__log = SceneLogger(logging.getLogger(DetectorSimulator.__name__), seed)
        self.__rig = rig
        self.__noise = noise
        self.__depth_bins = depth_bins
        self.__seed = seed

    def detect(self, frame: SceneFrame) -> FrameDetections:
        rng = np.random.default_rng([self.__seed, frame.index, 2])
        noise = self.__noise
        bins = self.__depth_bins
        result = FrameDetections()
        for gt_index, box in enumerate(frame.boxes):
            for camera in self.__rig.cameras:
                projected = project_box(box, camera)
                if projected is None:
                    continue
                tight, depth = projected
                result.projected.append(ProjectedBox(gt_index, camera.camera_id, tight, depth))
                area = (tight[2] - tight[0]) * (tight[3] - tight[1])
                dropped = rng.uniform() < noise.drop_probability(area)
                jittered = jitter_box(tight, noise.pixel_jitter, camera.intrinsics.width, camera.intrinsics.height, rng)
                score = detection_score(area, noise, rng)
                noisy_depth = depth + rng.normal(0.0, float(noise.depth_sigma(depth)))
                if dropped or jittered is None:
                    continue
                u = (jittered[0] + jittered[2]) / 2
                v = (jittered[1] + jittered[3]) / 2
                context = bilinear_sample(frame.pyramid.levels(camera.camera_id)[0], u, v).value
                result.detections.append(Detection2D(camera.camera_id, jittered, score, box.category, context))
                result.depths.append(
                    DepthDistribution.interpolated(float(np.clip(noisy_depth, bins.d_min, bins.d_max)), bins)
                )
                result.gt_depths.append(float(np.clip(depth, bins.d_min, bins.d_max)))
                result.gt_indices.append(gt_index)
        self.__log.debug(
            "Frame %d: %d detections from %d visible GT projections",
            frame.index,
            len(result.detections),
            len(result.projected),
        )
        return result


def simulate_2d_detector(scene: Scene, rig: CameraRig | None = None, noise: DetectorNoise | None = None):
    """Per-frame detections for every frame of `scene`"""
    cfg = scene.config
    simulator = DetectorSimulator(
        rig if rig is not None else scene.rig,
        noise if noise is not None else cfg.detector,
        cfg.depth_bins,
        cfg.seed,
    )
    return [simulator.detect(frame) for frame in scene.frames]


@dataclass(frozen=True)
class Recall2D:
    pairs_total: int
    pairs_hit: int
    objects_total: int
    objects_hit: int

    @property
    def pair_recall(self) -> float | None:
        return self.pairs_hit / self.pairs_total if self.pairs_total else None

    @property
    def object_recall(self) -> float | None:
        return self.objects_hit / self.objects_total if self.objects_total else None

    def __add__(self, other: "Recall2D") -> "Recall2D":
        return Recall2D(
            self.pairs_total + other.pairs_total,
            self.pairs_hit + other.pairs_hit,
            self.objects_total + other.objects_total,
            self.objects_hit + other.objects_hit,
        )


def matched_projections(frame_dets: FrameDetections, iou_threshold: float = IOU_2D_THRESHOLD) -> list[bool]:
    """
    Per projected GT box: whether a detection of the same view matches it. Detections are taken in
    descending score order and each one claims the unmatched projection with the highest IoU.
    """
    hits = [False] * len(frame_dets.projected)
    order = sorted(range(len(frame_dets.detections)), key=lambda i: -frame_dets.detections[i].score)
    for di in order:
        det = frame_dets.detections[di]
        best, best_iou = None, iou_threshold
        for pi, proj in enumerate(frame_dets.projected):
            if hits[pi] or proj.view != det.view:
                continue
            overlap = iou_2d(det.box, proj.box)
            if overlap >= best_iou:
                best, best_iou = pi, overlap
        if best is not None:
            hits[best] = True
    return hits


def recall_2d(frame_dets: FrameDetections, gts: list[Box3D], band=None) -> Recall2D:
    """2D recall over projected GT boxes and over GT objects, optionally restricted to a range band"""
    hits = matched_projections(frame_dets)
    in_band = [band is None or bool(band.contains(g.ground_range)) for g in gts]
    pairs_total = pairs_hit = 0
    objects = {}
    for proj, hit in zip(frame_dets.projected, hits):
        if not in_band[proj.gt_index]:
            continue
        pairs_total += 1
        pairs_hit += int(hit)
        objects[proj.gt_index] = objects.get(proj.gt_index, False) or hit
    return Recall2D(pairs_total, pairs_hit, len(objects), sum(objects.values()))


def recall_2d_by_band(frames_dets: list[FrameDetections], frames_gts: list[list[Box3D]], bands) -> dict[str, Recall2D]:
    result = {}
    for band in make_bands(bands):
        total = Recall2D(0, 0, 0, 0)
        for frame_dets, gts in zip(frames_dets, frames_gts):
            total = total + recall_2d(frame_dets, gts, band)
        result[band.label] = total
    return result
