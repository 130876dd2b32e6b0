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
Pinhole projection between per-view pixels and the ego frame.

Camera frame: x right, y down, z forward. Ego frame: x forward, y left, z up.
A pose maps camera coordinates into the ego frame: p_ego = R @ p_cam + t.
"""

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from far_errors import GeometryError

BEHIND_CAMERA_EPS = 1e-9
ORTHONORMAL_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(f"Principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, u, v):
        """Works on scalars and arrays alike."""
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise GeometryError("Pose contains non-finite values")
        if not np.allclose(rotation @ rotation.T, np.eye(3), rtol=0.0, atol=ORTHONORMAL_TOLERANCE):
            raise GeometryError("Pose rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise GeometryError("Pose rotation must have determinant +1")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @property
    def matrix(self) -> np.ndarray:
        """4x4 homogeneous camera-to-ego transform"""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_ego(self, points_cam: np.ndarray) -> np.ndarray:
        return points_cam @ self.rotation.T + self.translation

    def to_camera(self, points_ego: np.ndarray) -> np.ndarray:
        return (points_ego - self.translation) @ self.rotation


@dataclass(frozen=True, eq=False)
class Camera:
    camera_id: str
    intrinsics: Intrinsics
    pose: Pose

    def camera_vector(self) -> np.ndarray:
        """Flattened camera parameters: fx, fy, cx, cy, rotation (row-major), translation"""
        k = self.intrinsics
        return np.concatenate([[k.fx, k.fy, k.cx, k.cy], self.pose.rotation.ravel(), self.pose.translation])

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            "id": self.camera_id,
            "fx": k.fx,
            "fy": k.fy,
            "cx": k.cx,
            "cy": k.cy,
            "width": k.width,
            "height": k.height,
            "rotation": [float(x) for x in self.pose.rotation.ravel()],
            "translation": [float(x) for x in self.pose.translation],
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        try:
            return Camera(
                camera_id=str(d["id"]),
                intrinsics=Intrinsics(
                    float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"])
                ),
                pose=Pose(np.array(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"]),
            )
        except KeyError as e:
            raise GeometryError(f"Camera definition is missing field {e}")
        except (TypeError, ValueError) as e:
            if isinstance(e, GeometryError):
                raise
            raise GeometryError(f"Malformed camera definition: {e}")


@dataclass(frozen=True)
class Pixel:
    u: float
    v: float
    view: str


class Projection(NamedTuple):
    """Result of projecting a point into one view. pixel is None when the point is behind the camera."""

    pixel: Pixel | None
    depth: float

    @property
    def behind_camera(self) -> bool:
        return self.pixel is None


class CameraRig:
    """Ordered, immutable collection of calibrated cameras"""

    def __init__(self, cameras: list[Camera]):
        if not cameras:
            raise GeometryError("Camera rig must contain at least one camera")
        ids = [c.camera_id for c in cameras]
        if len(set(ids)) != len(ids):
            raise GeometryError(f"Camera ids must be unique, got {ids}")
        self.__cameras = tuple(cameras)
        self.__by_id = {c.camera_id: c for c in cameras}

    @property
    def cameras(self) -> tuple[Camera, ...]:
        return self.__cameras

    @property
    def camera_ids(self) -> list[str]:
        return [c.camera_id for c in self.__cameras]

    def __len__(self) -> int:
        return len(self.__cameras)

    def camera(self, view: str) -> Camera:
        try:
            return self.__by_id[view]
        except KeyError:
            raise GeometryError(f"Unknown view '{view}', rig has {self.camera_ids}")

    def to_dict(self) -> dict:
        return {"cameras": [c.to_dict() for c in self.__cameras]}

    @staticmethod
    def from_dict(d: dict) -> "CameraRig":
        if "cameras" not in d:
            raise GeometryError("Rig definition is missing field 'cameras'")
        return CameraRig([Camera.from_dict(c) for c in d["cameras"]])

    @staticmethod
    def from_file(path: str) -> "CameraRig":
        with open(path, "r") as f:
            return CameraRig.from_dict(json.load(f))


def yaw_camera_rotation(yaw: float) -> np.ndarray:
    """Rotation of a level camera looking along the ego-frame heading `yaw`"""
    s, c = math.sin(yaw), math.cos(yaw)
    return np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])


def default_ring_rig(
    width: int = 960, height: int = 640, ring_fov_deg: float = 62.0, front_fov_deg: float = 30.0
) -> CameraRig:
    """Six ring cameras at 60 degree spacing plus one long-focal front camera"""
    cameras = []
    ring_fx = (width / 2) / math.tan(math.radians(ring_fov_deg) / 2)
    for i in range(6):
        yaw = math.radians(60.0 * i)
        cameras.append(
            Camera(
                f"ring_{i}",
                Intrinsics(ring_fx, ring_fx, width / 2, height / 2, width, height),
                Pose(yaw_camera_rotation(yaw), [0.1 * math.cos(yaw), 0.1 * math.sin(yaw), 1.6]),
            )
        )
    front_fx = (width / 2) / math.tan(math.radians(front_fov_deg) / 2)
    cameras.append(
        Camera(
            "front_long",
            Intrinsics(front_fx, front_fx, width / 2, height / 2, width, height),
            Pose(yaw_camera_rotation(0.0), [0.15, 0.0, 1.7]),
        )
    )
    return CameraRig(cameras)


def unproject_pixels(uv: np.ndarray, depth: np.ndarray, camera: Camera) -> np.ndarray:
    """Vectorized back-projection of (N, 2) pixels at (N,) camera depths into the ego frame"""
    k = camera.intrinsics
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    points_cam = np.stack(
        [(uv[:, 0] - k.cx) / k.fx * depth, (uv[:, 1] - k.cy) / k.fy * depth, depth],
        axis=1,
    )
    return camera.pose.to_ego(points_cam)


def project_points(points: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorized projection of (N, 3) ego-frame points.

    Returns:
        (uv, depth, in_front): pixel coordinates (N, 2), camera-frame depths (N,) and the in-front mask (N,).
        Pixels of points behind the camera are NaN.
    """
    k = camera.intrinsics
    points_cam = camera.pose.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depth = points_cam[:, 2]
    in_front = depth > BEHIND_CAMERA_EPS
    safe_depth = np.where(in_front, depth, 1.0)
    uv = np.stack([k.fx * points_cam[:, 0] / safe_depth + k.cx, k.fy * points_cam[:, 1] / safe_depth + k.cy], axis=1)
    uv[~in_front] = np.nan
    return uv, depth, in_front


def unproject_pixel(pix: Pixel, depth: float, rig: CameraRig) -> np.ndarray:
    """Ego-frame point at the given camera depth along the ray through `pix`."""
    camera = rig.camera(pix.view)
    if not depth > 0 or not math.isfinite(depth):
        raise GeometryError(f"Depth must be positive, got {depth}")
    if not (math.isfinite(pix.u) and math.isfinite(pix.v)) or not camera.intrinsics.contains(pix.u, pix.v):
        raise GeometryError(f"Pixel ({pix.u}, {pix.v}) outside image of view '{pix.view}'")
    return unproject_pixels(np.array([[pix.u, pix.v]]), np.array([depth]), camera)[0]


def project_point(p: np.ndarray, view: str, rig: CameraRig) -> Projection:
    """Projects an ego-frame point into `view`. The pixel is not clamped to the image bounds."""
    camera = rig.camera(view)
    uv, depth, in_front = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), camera)
    if not in_front[0]:
        return Projection(None, float(depth[0]))
    return Projection(Pixel(float(uv[0, 0]), float(uv[0, 1]), view), float(depth[0]))


def visible_views(p: np.ndarray, rig: CameraRig) -> list[tuple[str, Pixel, float]]:
    """Every view, in rig order, where `p` is in front of the camera and inside the image."""
    result = []
    for camera in rig.cameras:
        projection = project_point(p, camera.camera_id, rig)
        if projection.behind_camera:
            continue
        if camera.intrinsics.contains(projection.pixel.u, projection.pixel.v):
            result.append((camera.camera_id, projection.pixel, projection.depth))
    return result


def pixel_error_deviation(pix: Pixel, depth: float, du: float, dv: float, rig: CameraRig) -> float:
    """3D displacement of the unprojected point caused by a pixel error (du, dv) at a fixed depth"""
    exact = unproject_pixel(pix, depth, rig)
    shifted = unproject_pixel(Pixel(pix.u + du, pix.v + dv, pix.view), depth, rig)
    return float(np.linalg.norm(shifted - exact))
