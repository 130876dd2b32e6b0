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
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from far_aggregation import FeatureLevel, FeaturePyramid
from far_box3d import Box3D, wrap_yaw
from far_camera_geometry import CameraRig, default_ring_rig, project_points
from far_config import SceneLogger
from far_denoising import NoiseSpec
from far_depth_bins import DepthBinConfig
from far_errors import FarError, SceneConfigError
from far_query_engine import RangeBox
from far_temporal import EgoMotion


def _reject_unknown(section: str, d: dict, known: set[str]):
    unknown = set(d) - known
    if unknown:
        raise SceneConfigError(f"Unknown fields {sorted(unknown)} in '{section}'")


def parse_band(label: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in label.split("-"))
    except ValueError:
        raise SceneConfigError(f"Band '{label}' must look like 'lo-hi'")
    if not (0 <= lo < hi):
        raise SceneConfigError(f"Band '{label}' must satisfy 0 <= lo < hi")
    return lo, hi


@dataclass(frozen=True)
class RangeConfig:
    half_extent: float = 76.2
    z_min: float = -2.0
    z_max: float = 4.0
    min_range: float = 4.0

    def __post_init__(self):
        if not (self.half_extent > 0 and self.z_min < self.z_max and self.min_range >= 0):
            raise SceneConfigError(f"Invalid perception range {self}")

    def range_box(self) -> RangeBox:
        return RangeBox.square(self.half_extent, self.z_min, self.z_max)

    @staticmethod
    def from_dict(d: dict) -> "RangeConfig":
        _reject_unknown("range", d, {"half_extent", "z_min", "z_max", "min_range"})
        return RangeConfig(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class CategoryTemplate:
    size: tuple[float, float, float]
    weight: float

    def __post_init__(self):
        if len(self.size) != 3 or not all(s > 0 for s in self.size):
            raise SceneConfigError(f"Category sizes must be three positive numbers, got {self.size}")
        if self.weight < 0:
            raise SceneConfigError(f"Category weight must be non-negative, got {self.weight}")

    def to_dict(self) -> dict:
        return {"size": list(self.size), "weight": self.weight}


DEFAULT_CATEGORIES = {
    "car": CategoryTemplate((1.9, 4.6, 1.6), 0.5),
    "pedestrian": CategoryTemplate((0.7, 0.7, 1.75), 0.2),
    "truck": CategoryTemplate((2.5, 8.0, 3.2), 0.1),
    "cyclist": CategoryTemplate((0.8, 1.8, 1.6), 0.1),
    "bus": CategoryTemplate((2.9, 12.0, 3.3), 0.1),
}


@dataclass(frozen=True)
class GTConfig:
    count: int = 120
    band_weights: dict[str, float] = field(default_factory=lambda: {"0-50": 0.4, "50-150": 0.6})
    categories: dict[str, CategoryTemplate] = field(default_factory=lambda: dict(DEFAULT_CATEGORIES))
    size_jitter: float = 0.1

    def __post_init__(self):
        if self.count < 0:
            raise SceneConfigError(f"GT count must be non-negative, got {self.count}")
        if not self.band_weights or any(w < 0 for w in self.band_weights.values()):
            raise SceneConfigError(f"Band weights must be non-negative, got {self.band_weights}")
        if sum(self.band_weights.values()) <= 0:
            raise SceneConfigError("Band weights must not all be zero")
        for label in self.band_weights:
            parse_band(label)
        if not self.categories or sum(c.weight for c in self.categories.values()) <= 0:
            raise SceneConfigError("At least one category with positive weight is required")
        if not (0 <= self.size_jitter < 1):
            raise SceneConfigError(f"Size jitter must be in [0, 1), got {self.size_jitter}")

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "band_weights": dict(self.band_weights),
            "categories": {name: c.to_dict() for name, c in self.categories.items()},
            "size_jitter": self.size_jitter,
        }

    @staticmethod
    def from_dict(d: dict) -> "GTConfig":
        _reject_unknown("gt", d, {"count", "band_weights", "categories", "size_jitter"})
        defaults = GTConfig()
        categories = defaults.categories
        if "categories" in d:
            categories = {}
            for name, c in d["categories"].items():
                _reject_unknown(f"gt.categories.{name}", c, {"size", "weight"})
                categories[name] = CategoryTemplate(tuple(float(s) for s in c["size"]), float(c.get("weight", 1.0)))
        return GTConfig(
            count=int(d.get("count", defaults.count)),
            band_weights={k: float(v) for k, v in d.get("band_weights", defaults.band_weights).items()},
            categories=categories,
            size_jitter=float(d.get("size_jitter", defaults.size_jitter)),
        )


@dataclass(frozen=True)
class DetectorNoise:
    pixel_jitter: float = 1.0
    drop_curve: tuple[tuple[float, float], ...] = ((0.0, 0.3), (64.0, 0.1), (256.0, 0.03), (1024.0, 0.01))
    score_floor: float = 0.02
    score_mid_area: float = 64.0
    score_slope: float = 1.5
    score_noise: float = 0.05
    depth_noise_a: float = 0.2
    depth_noise_b: float = 0.008

    def __post_init__(self):
        object.__setattr__(self, "drop_curve", tuple((float(a), float(p)) for a, p in self.drop_curve))
        if min(self.pixel_jitter, self.score_noise, self.depth_noise_a, self.depth_noise_b) < 0:
            raise SceneConfigError("Noise deviations must be non-negative")
        if not self.drop_curve:
            raise SceneConfigError("Drop curve needs at least one point")
        areas = [a for a, _ in self.drop_curve]
        probs = [p for _, p in self.drop_curve]
        if any(a >= b for a, b in zip(areas, areas[1:])):
            raise SceneConfigError(f"Drop curve areas must be strictly increasing, got {areas}")
        if any(a < b for a, b in zip(probs, probs[1:])):
            raise SceneConfigError(f"Drop probability must not increase with area, got {probs}")
        if any(not (0 <= p <= 1) for p in probs):
            raise SceneConfigError(f"Drop probabilities must be in [0, 1], got {probs}")
        if not (0 <= self.score_floor < 1) or self.score_mid_area <= 0:
            raise SceneConfigError("Score model needs 0 <= score_floor < 1 and score_mid_area > 0")

    def drop_probability(self, area) -> np.ndarray:
        areas, probs = zip(*self.drop_curve)
        return np.interp(area, areas, probs)

    def depth_sigma(self, d) -> np.ndarray:
        return self.depth_noise_a + self.depth_noise_b * np.asarray(d, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "pixel_jitter": self.pixel_jitter,
            "drop_curve": [list(p) for p in self.drop_curve],
            "score_floor": self.score_floor,
            "score_mid_area": self.score_mid_area,
            "score_slope": self.score_slope,
            "score_noise": self.score_noise,
            "depth_noise_a": self.depth_noise_a,
            "depth_noise_b": self.depth_noise_b,
        }

    @staticmethod
    def from_dict(d: dict) -> "DetectorNoise":
        known = set(DetectorNoise().to_dict())
        _reject_unknown("detector", d, known)
        values = {k: (v if k == "drop_curve" else float(v)) for k, v in d.items()}
        return DetectorNoise(**values)


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = 32
    frequencies: int = 4
    hidden: int = 64
    context_dim: int = 16

    def __post_init__(self):
        if min(self.dim, self.frequencies, self.hidden, self.context_dim) < 1:
            raise SceneConfigError(f"Embedding sizes must be positive, got {self}")

    @staticmethod
    def from_dict(d: dict) -> "EmbeddingConfig":
        _reject_unknown("embedding", d, {"dim", "frequencies", "hidden", "context_dim"})
        return EmbeddingConfig(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class PyramidConfig:
    channels: int = 16
    strides: tuple[int, ...] = (8, 16, 32, 64)
    background: float = 0.1
    bump: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.channels < 1 or not self.strides or any(a >= b for a, b in zip(self.strides, self.strides[1:])):
            raise SceneConfigError(f"Pyramid needs channels >= 1 and strictly increasing strides, got {self}")
        if self.background < 0 or self.bump < 0:
            raise SceneConfigError("Pyramid amplitudes must be non-negative")

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "strides": list(self.strides),
            "background": self.background,
            "bump": self.bump,
        }

    @staticmethod
    def from_dict(d: dict) -> "PyramidConfig":
        _reject_unknown("pyramid", d, {"channels", "strides", "background", "bump"})
        defaults = PyramidConfig()
        return PyramidConfig(
            channels=int(d.get("channels", defaults.channels)),
            strides=tuple(d.get("strides", defaults.strides)),
            background=float(d.get("background", defaults.background)),
            bump=float(d.get("bump", defaults.bump)),
        )


LEVEL_SELECTION_ALL = "all"
LEVEL_SELECTION_RANGE = "range"


@dataclass(frozen=True)
class AggregationConfig:
    offsets: int = 4
    offset_radius: float = 1.0
    level_selection: str = LEVEL_SELECTION_ALL

    def __post_init__(self):
        if self.offsets < 1 or self.offset_radius < 0:
            raise SceneConfigError(f"Aggregation needs offsets >= 1 and a non-negative radius, got {self}")
        if self.level_selection not in (LEVEL_SELECTION_ALL, LEVEL_SELECTION_RANGE):
            raise SceneConfigError(f"Unsupported level selection '{self.level_selection}'")

    @staticmethod
    def from_dict(d: dict) -> "AggregationConfig":
        _reject_unknown("aggregation", d, {"offsets", "offset_radius", "level_selection"})
        defaults = AggregationConfig()
        return AggregationConfig(
            offsets=int(d.get("offsets", defaults.offsets)),
            offset_radius=float(d.get("offset_radius", defaults.offset_radius)),
            level_selection=str(d.get("level_selection", defaults.level_selection)),
        )


@dataclass(frozen=True)
class TrajectoryConfig:
    step_forward: float = 1.0
    step_yaw: float = 0.0
    motions: tuple[EgoMotion, ...] | None = None

    def motion(self, frame: int) -> EgoMotion:
        """Motion from frame-1 to `frame`; identity for the first frame"""
        if frame == 0:
            return EgoMotion.identity()
        if self.motions is not None:
            return self.motions[frame - 1]
        return EgoMotion.from_vehicle_step(self.step_forward, self.step_yaw)

    def to_dict(self) -> dict:
        return {
            "step_forward": self.step_forward,
            "step_yaw": self.step_yaw,
            "motions": None if self.motions is None else [m.to_dict() for m in self.motions],
        }

    @staticmethod
    def from_dict(d: dict) -> "TrajectoryConfig":
        _reject_unknown("trajectory", d, {"step_forward", "step_yaw", "motions"})
        motions = d.get("motions")
        try:
            parsed = None if motions is None else tuple(EgoMotion.from_dict(m) for m in motions)
        except (KeyError, ValueError) as e:
            raise SceneConfigError(f"Malformed trajectory motion: {e}")
        return TrajectoryConfig(float(d.get("step_forward", 1.0)), float(d.get("step_yaw", 0.0)), parsed)


@dataclass(frozen=True, eq=False)
class SceneConfig:
    seed: int = 0
    frames: int = 1
    rig: CameraRig = field(default_factory=default_ring_rig)
    range: RangeConfig = field(default_factory=RangeConfig)
    gt: GTConfig = field(default_factory=GTConfig)
    detector: DetectorNoise = field(default_factory=DetectorNoise)
    depth_bins: DepthBinConfig = field(default_factory=DepthBinConfig)
    denoise: NoiseSpec = field(default_factory=NoiseSpec)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    refinement_iterations: int = 3
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    tau: float = 0.1
    memory_capacity: int = 128

    def __post_init__(self):
        if self.frames < 1:
            raise SceneConfigError(f"A scene needs at least one frame, got {self.frames}")
        if self.embedding.context_dim != self.pyramid.channels:
            raise SceneConfigError(
                f"Embedding context_dim {self.embedding.context_dim} "
                f"must equal pyramid channels {self.pyramid.channels}"
            )
        if self.trajectory.motions is not None and len(self.trajectory.motions) != self.frames - 1:
            raise SceneConfigError(f"Trajectory lists {len(self.trajectory.motions)} motions for {self.frames} frames")
        if not (0 <= self.tau <= 1):
            raise SceneConfigError(f"tau must be in [0, 1], got {self.tau}")
        if self.memory_capacity < 0 or self.refinement_iterations < 0:
            raise SceneConfigError("memory_capacity and refinement iterations must be non-negative")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "frames": self.frames,
            "rig": self.rig.to_dict(),
            "range": self.range.__dict__.copy(),
            "gt": self.gt.to_dict(),
            "detector": self.detector.to_dict(),
            "depth_bins": self.depth_bins.to_dict(),
            "denoise": self.denoise.to_dict(),
            "embedding": self.embedding.__dict__.copy(),
            "pyramid": self.pyramid.to_dict(),
            "aggregation": self.aggregation.__dict__.copy(),
            "refinement": {"iterations": self.refinement_iterations},
            "trajectory": self.trajectory.to_dict(),
            "tau": self.tau,
            "memory_capacity": self.memory_capacity,
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneConfig":
        _reject_unknown(
            "scene",
            d,
            {
                "seed",
                "frames",
                "rig",
                "range",
                "gt",
                "detector",
                "depth_bins",
                "denoise",
                "embedding",
                "pyramid",
                "aggregation",
                "refinement",
                "trajectory",
                "tau",
                "memory_capacity",
            },
        )
        refinement = d.get("refinement", {})
        _reject_unknown("refinement", refinement, {"iterations"})
        try:
            return SceneConfig(
                seed=int(d.get("seed", 0)),
                frames=int(d.get("frames", 1)),
                rig=CameraRig.from_dict(d["rig"]) if "rig" in d else default_ring_rig(),
                range=RangeConfig.from_dict(d.get("range", {})),
                gt=GTConfig.from_dict(d.get("gt", {})),
                detector=DetectorNoise.from_dict(d.get("detector", {})),
                depth_bins=DepthBinConfig.from_dict(d.get("depth_bins", {})),
                denoise=NoiseSpec.from_dict(d.get("denoise", {})),
                embedding=EmbeddingConfig.from_dict(d.get("embedding", {})),
                pyramid=PyramidConfig.from_dict(d.get("pyramid", {})),
                aggregation=AggregationConfig.from_dict(d.get("aggregation", {})),
                refinement_iterations=int(refinement.get("iterations", 3)),
                trajectory=TrajectoryConfig.from_dict(d.get("trajectory", {})),
                tau=float(d.get("tau", 0.1)),
                memory_capacity=int(d.get("memory_capacity", 128)),
            )
        except SceneConfigError:
            raise
        except (FarError, TypeError, ValueError) as e:
            raise SceneConfigError(f"Invalid scene config: {e}")

    @staticmethod
    def from_file(path: str) -> "SceneConfig":
        with open(path, "r") as f:
            return SceneConfig.from_dict(json.load(f))

    def with_seed(self, seed: int) -> "SceneConfig":
        d = self.to_dict()
        d["seed"] = seed
        return SceneConfig.from_dict(d)


@dataclass(frozen=True, eq=False)
class SceneFrame:
    index: int
    boxes: list[Box3D]
    pyramid: FeaturePyramid
    pose: EgoMotion
    motion: EgoMotion


@dataclass(frozen=True, eq=False)
class Scene:
    config: SceneConfig
    frames: list[SceneFrame]
    categories: list[str]
    signatures: np.ndarray = field(repr=False)

    @property
    def rig(self) -> CameraRig:
        return self.config.rig

    def signature(self, category: str) -> np.ndarray:
        return self.signatures[self.categories.index(category)]


def category_signatures(categories: list[str], channels: int) -> np.ndarray:
    """Unit feature direction per category, fixed for a given category order"""
    rng = np.random.default_rng(7919)
    signatures = np.abs(rng.normal(0.0, 1.0, (len(categories), channels)))
    return signatures / np.linalg.norm(signatures, axis=1, keepdims=True)


def sample_band_boxes(cfg: SceneConfig, rng: np.random.Generator) -> list[Box3D]:
    """World boxes in frame-0 coordinates, band chosen per box from the configured band weights"""
    gt = cfg.gt
    if gt.count == 0:
        return []
    labels = sorted(gt.band_weights, key=lambda label: parse_band(label))
    weights = np.array([gt.band_weights[label] for label in labels])
    band_of_box = rng.choice(len(labels), size=gt.count, p=weights / weights.sum())
    names = list(gt.categories)
    category_weights = np.array([gt.categories[n].weight for n in names])
    category_of_box = rng.choice(len(names), size=gt.count, p=category_weights / category_weights.sum())

    half = cfg.range.half_extent
    boxes = []
    for band_index, category_index in zip(band_of_box, category_of_box):
        lo, hi = parse_band(labels[band_index])
        lo = max(lo, cfg.range.min_range)
        for _ in range(10000):
            xy = rng.uniform(-half, half, 2)
            r = math.hypot(xy[0], xy[1])
            if lo <= r < hi:
                break
        else:
            raise SceneConfigError(f"Band {labels[band_index]} does not intersect the perception range")
        template = gt.categories[names[category_index]]
        size = np.array(template.size) * (1.0 + rng.uniform(-gt.size_jitter, gt.size_jitter, 3))
        boxes.append(
            Box3D(
                [xy[0], xy[1], size[2] / 2],
                tuple(size),
                wrap_yaw(rng.uniform(-math.pi, math.pi)),
                names[category_index],
            )
        )
    return boxes


def transform_box(box: Box3D, pose: EgoMotion) -> Box3D:
    heading = math.atan2(pose.rotation[1, 0], pose.rotation[0, 0])
    return box.moved(pose.apply(box.center), box.yaw + heading)


def build_pyramid(
    boxes: list[Box3D], rig: CameraRig, cfg: PyramidConfig, signatures: dict[str, np.ndarray], rng
) -> FeaturePyramid:
    """
    Smooth random background per level plus a gaussian bump carrying the category signature at
    every projected box center. Bump widths follow the projected box extent.
    """
    views = {}
    centers = np.stack([b.center for b in boxes]) if boxes else np.zeros((0, 3))
    for camera in rig.cameras:
        k = camera.intrinsics
        uv, depth, in_front = project_points(centers, camera)
        visible = in_front & k.contains(np.nan_to_num(uv[:, 0], nan=-1.0), np.nan_to_num(uv[:, 1], nan=-1.0))
        levels = []
        for stride in cfg.strides:
            height, width = max(k.height // stride, 2), max(k.width // stride, 2)
            noise = gaussian_filter(rng.normal(0.0, 1.0, (height, width, cfg.channels)), sigma=(2.0, 2.0, 0.0))
            noise_std = noise.std()
            grid = cfg.background * (noise / noise_std if noise_std > 0 else noise)
            rows, cols = np.mgrid[0:height, 0:width]
            for i in np.flatnonzero(visible):
                box = boxes[i]
                extent_px = k.fx * max(box.size[0], box.size[1]) / (2 * depth[i])
                sigma = max(extent_px / stride, 0.5)
                x, y = uv[i, 0] / stride, uv[i, 1] / stride
                bump = np.exp(-((cols - x) ** 2 + (rows - y) ** 2) / (2 * sigma * sigma))
                grid = grid + cfg.bump * bump[:, :, None] * signatures[box.category]
            levels.append(FeatureLevel(grid, stride))
        views[camera.camera_id] = levels
    return FeaturePyramid(views)


def gen_scene(cfg: SceneConfig) -> Scene:
    """Deterministic scene for cfg.seed: static world boxes observed from a moving ego vehicle"""
    log = SceneLogger(logging.getLogger(gen_scene.__name__), cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    world = sample_band_boxes(cfg, rng)
    categories = list(cfg.gt.categories)
    signatures = category_signatures(categories, cfg.pyramid.channels)
    by_name = {name: signatures[i] for i, name in enumerate(categories)}
    range_box = cfg.range.range_box()

    frames = []
    pose = EgoMotion.identity()
    for index in range(cfg.frames):
        motion = cfg.trajectory.motion(index)
        pose = motion.compose(pose)
        boxes = [transform_box(b, pose) for b in world]
        boxes = [b for b in boxes if range_box.contains(b.center)[0]]
        pyramid_rng = np.random.default_rng([cfg.seed, index])
        pyramid = build_pyramid(boxes, cfg.rig, cfg.pyramid, by_name, pyramid_rng)
        frames.append(SceneFrame(index, boxes, pyramid, pose, motion))
        log.debug("Frame %d holds %d GT boxes", index, len(boxes))
    return Scene(cfg, frames, categories, signatures)
