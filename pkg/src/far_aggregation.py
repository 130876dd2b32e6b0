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
Camera-aware feature gating and 3D deformable sampling over multi-view feature pyramids.

Level-grid coordinates are x = u / stride, y = v / stride with cell (r, c) at (x=c, y=r).
"""

import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit, softmax

from far_camera_geometry import CameraRig, project_points
from far_errors import AggregationError
from far_query_engine import Mlp, Query

PYRAMID_MAGIC = b"FARP"
DEFAULT_OFFSETS = 4


@dataclass(frozen=True, eq=False)
class FeatureLevel:
    grid: np.ndarray = field(repr=False)
    stride: int

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        if grid.ndim != 3:
            raise AggregationError(f"Feature grid must have shape (H, W, C), got {grid.shape}")
        if grid.shape[0] < 2 or grid.shape[1] < 2:
            raise AggregationError(f"Feature grid must be at least 2x2, got {grid.shape[:2]}")
        if self.stride <= 0:
            raise AggregationError(f"Stride must be positive, got {self.stride}")
        object.__setattr__(self, "grid", grid)

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def channels(self) -> int:
        return self.grid.shape[2]


class FeaturePyramid:
    """Per-view feature levels. Every view shares the same strides and channel count."""

    def __init__(self, views: dict[str, list[FeatureLevel]]):
        if not views:
            raise AggregationError("Feature pyramid must contain at least one view")
        strides = None
        channels = None
        for view, levels in views.items():
            if not levels:
                raise AggregationError(f"View '{view}' has no feature levels")
            view_strides = [level.stride for level in levels]
            if any(a >= b for a, b in zip(view_strides, view_strides[1:])):
                raise AggregationError(f"Strides of view '{view}' are not strictly increasing: {view_strides}")
            if strides is not None and view_strides != strides:
                raise AggregationError(f"View '{view}' has strides {view_strides}, expected {strides}")
            strides = view_strides
            for level in levels:
                if channels is not None and level.channels != channels:
                    raise AggregationError(f"Channel count {level.channels} differs from {channels}")
                channels = level.channels
        self.__views = {view: list(levels) for view, levels in views.items()}
        self.__strides = strides
        self.__channels = channels

    @property
    def views(self) -> list[str]:
        return list(self.__views)

    @property
    def strides(self) -> list[int]:
        return list(self.__strides)

    @property
    def channels(self) -> int:
        return self.__channels

    @property
    def num_levels(self) -> int:
        return len(self.__strides)

    def levels(self, view: str) -> list[FeatureLevel]:
        try:
            return self.__views[view]
        except KeyError:
            raise AggregationError(f"Feature pyramid has no view '{view}'")

    def map_levels(self, fn) -> "FeaturePyramid":
        return FeaturePyramid({view: [fn(view, level) for level in levels] for view, levels in self.__views.items()})

    def dump(self, path: str):
        """Binary dump: header with dimensions followed by row-major little-endian float64 grids"""
        with open(path, "wb") as f:
            f.write(PYRAMID_MAGIC)
            f.write(struct.pack("<I", len(self.__views)))
            for view, levels in self.__views.items():
                encoded = view.encode("utf-8")
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<I", len(levels)))
                for level in levels:
                    f.write(struct.pack("<IIII", level.height, level.width, level.channels, level.stride))
                    f.write(np.ascontiguousarray(level.grid, dtype="<f8").tobytes())

    @staticmethod
    def load(path: str) -> "FeaturePyramid":
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != PYRAMID_MAGIC:
            raise AggregationError(f"'{path}' is not a feature pyramid dump")
        offset = 4
        (num_views,) = struct.unpack_from("<I", data, offset)
        offset += 4
        views = {}
        for _ in range(num_views):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            view = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (num_levels,) = struct.unpack_from("<I", data, offset)
            offset += 4
            levels = []
            for _ in range(num_levels):
                h, w, c, stride = struct.unpack_from("<IIII", data, offset)
                offset += 16
                count = h * w * c
                grid = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(h, w, c)
                offset += 8 * count
                levels.append(FeatureLevel(grid.astype(np.float64), stride))
            views[view] = levels
        return FeaturePyramid(views)


@dataclass(frozen=True, eq=False)
class GateParams:
    """Squeeze-and-excitation block conditioned on the 16 camera parameters"""

    mlp: Mlp

    def __post_init__(self):
        if self.mlp.in_dim != 16:
            raise AggregationError(f"Gate input must be the 16-value camera vector, got {self.mlp.in_dim}")

    @property
    def channels(self) -> int:
        return self.mlp.out_dim

    def gate(self, camera_vector: np.ndarray) -> np.ndarray:
        return expit(self.mlp(camera_vector))

    @staticmethod
    def zeros(channels: int, hidden: int = 32) -> "GateParams":
        return GateParams(Mlp.zeros(16, hidden, channels))

    @staticmethod
    def random(channels: int, hidden: int = 32, seed: int = 0, scale: float = 1e-3) -> "GateParams":
        """Small first-layer weights keep pixel-scale intrinsics from saturating the gate"""
        rng = np.random.default_rng(seed)
        return GateParams(
            Mlp(
                rng.normal(0.0, scale, (hidden, 16)),
                np.zeros(hidden),
                rng.normal(0.0, 1.0 / math.sqrt(hidden), (channels, hidden)),
                np.zeros(channels),
            )
        )


def camera_gate(pyr: FeaturePyramid, rig: CameraRig, g: GateParams) -> FeaturePyramid:
    if set(pyr.views) != set(rig.camera_ids):
        raise AggregationError(f"Pyramid views {pyr.views} do not match rig views {rig.camera_ids}")
    if g.channels != pyr.channels:
        raise AggregationError(f"Gate produces {g.channels} channels, pyramid has {pyr.channels}")
    gates = {camera.camera_id: g.gate(camera.camera_vector()) for camera in rig.cameras}
    return pyr.map_levels(lambda view, level: FeatureLevel(level.grid * gates[view], level.stride))


class SampleResult(NamedTuple):
    value: np.ndarray
    valid: bool


def _grid_coordinates(level: FeatureLevel, u, v):
    x = np.asarray(u, dtype=np.float64) / level.stride
    y = np.asarray(v, dtype=np.float64) / level.stride
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x <= level.width - 1) & (y >= 0) & (y <= level.height - 1)
    x = np.where(valid, x, 0.0)
    y = np.where(valid, y, 0.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, level.width - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, level.height - 2)
    return x - x0, y - y0, x0, y0, valid


def bilinear_sample_many(level: FeatureLevel, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Samples (N, 2) full-image pixel coordinates. Out-of-bounds and non-finite samples
    come back as zero vectors with a False validity flag.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    fx, fy, x0, y0, valid = _grid_coordinates(level, uv[:, 0], uv[:, 1])
    g = level.grid
    fx = fx[:, None]
    fy = fy[:, None]
    values = (
        (1 - fx) * (1 - fy) * g[y0, x0]
        + fx * (1 - fy) * g[y0, x0 + 1]
        + (1 - fx) * fy * g[y0 + 1, x0]
        + fx * fy * g[y0 + 1, x0 + 1]
    )
    values[~valid] = 0.0
    return values, valid


def bilinear_sample(level: FeatureLevel, u: float, v: float) -> SampleResult:
    values, valid = bilinear_sample_many(level, np.array([[u, v]]))
    return SampleResult(values[0], bool(valid[0]))


def bilinear_sample_grad(level: FeatureLevel, u: float, v: float) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of the bilinear sample with respect to full-image u and v"""
    fx, fy, x0, y0, valid = _grid_coordinates(level, u, v)
    if not valid:
        raise AggregationError(f"Sample at ({u}, {v}) is outside the level grid")
    fx, fy, x0, y0 = float(fx), float(fy), int(x0), int(y0)
    g = level.grid
    d_dx = (1 - fy) * (g[y0, x0 + 1] - g[y0, x0]) + fy * (g[y0 + 1, x0 + 1] - g[y0 + 1, x0])
    d_dy = (1 - fx) * (g[y0 + 1, x0] - g[y0, x0]) + fx * (g[y0 + 1, x0 + 1] - g[y0, x0 + 1])
    return d_dx / level.stride, d_dy / level.stride


@dataclass(frozen=True, eq=False)
class SamplePlan:
    """M offsets in meters (ego frame) and raw weights per (offset, level, view)"""

    offsets: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        offsets = np.array(self.offsets, dtype=np.float64).reshape(-1, 3)
        weights = np.array(self.weights, dtype=np.float64)
        if offsets.shape[0] < 1:
            raise AggregationError("Sample plan needs at least one offset")
        if weights.ndim != 3 or weights.shape[0] != offsets.shape[0]:
            raise AggregationError(f"Weights must have shape (M, L, V) with M={offsets.shape[0]}, got {weights.shape}")
        if not np.all(np.isfinite(weights)) or not np.all(np.isfinite(offsets)):
            raise AggregationError("Sample plan must be finite")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "weights", weights)

    @property
    def num_offsets(self) -> int:
        return self.offsets.shape[0]

    @staticmethod
    def ring(num_levels: int, num_views: int, m: int = DEFAULT_OFFSETS, radius: float = 1.0) -> "SamplePlan":
        """Zero offset plus m-1 ground-plane offsets evenly spaced on a circle, uniform weights"""
        angles = 2 * np.pi * np.arange(m - 1) / max(m - 1, 1)
        ring = np.column_stack([radius * np.cos(angles), radius * np.sin(angles), np.zeros(m - 1)])
        offsets = np.vstack([np.zeros((1, 3)), ring])
        return SamplePlan(offsets, np.zeros((m, num_levels, num_views)))

    @staticmethod
    def random(
        num_levels: int, num_views: int, m: int = DEFAULT_OFFSETS, radius: float = 1.0, rng: np.random.Generator = None
    ) -> "SamplePlan":
        rng = rng if rng is not None else np.random.default_rng(0)
        return SamplePlan(rng.uniform(-radius, radius, (m, 3)), rng.normal(0.0, 1.0, (m, num_levels, num_views)))


class AggregateResult(NamedTuple):
    value: np.ndarray
    valid_count: int

    @property
    def all_invalid(self) -> bool:
        return self.valid_count == 0


def sample_points(
    points: np.ndarray, pyr: FeaturePyramid, rig: CameraRig, level_mask: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """
    Samples every (N, 3) ego-frame point in every level and view.

    Returns:
        (values, valid): features of shape (N, L, V, C) and the validity mask (N, L, V).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n, num_levels, views = points.shape[0], pyr.num_levels, rig.camera_ids
    values = np.zeros((n, num_levels, len(views), pyr.channels))
    valid = np.zeros((n, num_levels, len(views)), dtype=bool)
    for vi, view in enumerate(views):
        uv, _, in_front = project_points(points, rig.camera(view))
        for li, level in enumerate(pyr.levels(view)):
            level_values, level_valid = bilinear_sample_many(level, uv)
            values[:, li, vi] = level_values
            valid[:, li, vi] = level_valid & in_front
    if level_mask is not None:
        level_mask = np.asarray(level_mask, dtype=bool)
        if level_mask.shape[-1] != num_levels:
            raise AggregationError(f"Level mask covers {level_mask.shape[-1]} levels, pyramid has {num_levels}")
        mask = level_mask if level_mask.ndim == 2 else np.broadcast_to(level_mask, (n, num_levels))
        valid &= mask[:, :, None]
    return values, valid


def deformable_aggregate_batch(
    ref_points: np.ndarray,
    plan: SamplePlan,
    pyr: FeaturePyramid,
    rig: CameraRig,
    level_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Aggregates features for (N, 3) reference points with a shared sample plan.

    The raw weights of all valid (offset, level, view) samples of one point are normalized with a
    single softmax. Points without any valid sample get a zero vector.

    Returns:
        (values, valid_counts) of shapes (N, C) and (N,).
    """
    _, num_levels, num_views = plan.weights.shape
    if num_levels != pyr.num_levels or num_views != len(rig):
        raise AggregationError(
            f"Plan covers {num_levels} levels x {num_views} views, "
            f"pyramid has {pyr.num_levels} levels x {len(rig)} views"
        )
    ref_points = np.asarray(ref_points, dtype=np.float64).reshape(-1, 3)
    n, m = ref_points.shape[0], plan.num_offsets
    shifted = (ref_points[:, None, :] + plan.offsets[None, :, :]).reshape(-1, 3)
    if level_mask is not None and np.asarray(level_mask).ndim == 2:
        level_mask = np.repeat(np.asarray(level_mask, dtype=bool), m, axis=0)
    values, valid = sample_points(shifted, pyr, rig, level_mask)
    values = values.reshape(n, m * num_levels * num_views, pyr.channels)
    valid = valid.reshape(n, m * num_levels * num_views)

    valid_counts = valid.sum(axis=1)
    logits = np.where(valid, plan.weights.reshape(1, -1), -np.inf)
    logits[valid_counts == 0] = 0.0
    probs = softmax(logits, axis=1)
    probs[valid_counts == 0] = 0.0
    return np.einsum("ns,nsc->nc", probs, values), valid_counts


def deformable_aggregate(
    q: Query, plan: SamplePlan, pyr: FeaturePyramid, rig: CameraRig, level_mask: np.ndarray | None = None
) -> AggregateResult:
    values, counts = deformable_aggregate_batch(q.ref_point[None, :], plan, pyr, rig, level_mask)
    return AggregateResult(values[0], int(counts[0]))


def select_levels_for_range(range_m: float, num_levels: int, near: float = 50.0, far: float = 100.0) -> np.ndarray:
    """
    Allowed pyramid levels for an object at ground range `range_m`. Far objects use the finer half of
    the pyramid, near objects the coarser half, anything in between every level.
    """
    mask = np.zeros(num_levels, dtype=bool)
    half = max(num_levels // 2, 1)
    if range_m >= far:
        mask[:half] = True
    elif range_m < near:
        mask[num_levels - half :] = True
    else:
        mask[:] = True
    return mask
