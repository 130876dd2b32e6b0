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
from dataclasses import dataclass

import numpy as np

from far_errors import GeometryError


def wrap_yaw(yaw: float) -> float:
    """Wraps an angle into [-pi, pi)"""
    wrapped = (yaw + math.pi) % (2 * math.pi) - math.pi
    return -math.pi if wrapped >= math.pi else wrapped


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Box3D:
    """
    Oriented box in the ego frame.

    size is (w, l, h): w spans the local x axis, l the local y axis, h the vertical axis.
    yaw rotates the local frame about the ego z axis.
    """

    center: np.ndarray
    size: tuple[float, float, float]
    yaw: float = 0.0
    category: str = "car"

    def __post_init__(self):
        center = np.array(self.center, dtype=np.float64).reshape(3)
        size = tuple(float(s) for s in self.size)
        if len(size) != 3 or not all(s > 0 for s in size):
            raise GeometryError(f"Box sizes must be positive, got {self.size}")
        if not np.all(np.isfinite(center)):
            raise GeometryError(f"Box center must be finite, got {center}")
        if not (-math.pi <= self.yaw < math.pi):
            raise GeometryError(f"Box yaw {self.yaw} outside [-pi, pi)")
        center.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", float(self.yaw))

    @property
    def half_size(self) -> np.ndarray:
        return np.array(self.size) / 2

    @property
    def volume(self) -> float:
        w, l, h = self.size
        return w * l * h

    @property
    def half_diagonal(self) -> float:
        w, l, h = self.size
        return 0.5 * math.sqrt(w * w + l * l + h * h)

    @property
    def ground_range(self) -> float:
        return float(np.hypot(self.center[0], self.center[1]))

    @property
    def rotation(self) -> np.ndarray:
        return yaw_rotation(self.yaw)

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.center) @ self.rotation

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        """Strict containment: points on a face are outside"""
        return np.all(np.abs(self.to_local(points)) < self.half_size, axis=1)

    def contains_point(self, point: np.ndarray) -> bool:
        return bool(self.contains_points(point)[0])

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return (signs * self.half_size) @ self.rotation.T + self.center

    def moved(self, center: np.ndarray, yaw: float | None = None) -> "Box3D":
        return Box3D(center, self.size, self.yaw if yaw is None else wrap_yaw(yaw), self.category)

    def to_dict(self) -> dict:
        return {
            "center": [float(x) for x in self.center],
            "size": list(self.size),
            "yaw": self.yaw,
            "category": self.category,
        }

    @staticmethod
    def from_dict(d: dict) -> "Box3D":
        return Box3D(d["center"], tuple(d["size"]), float(d.get("yaw", 0.0)), str(d.get("category", "car")))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Box3D):
            return NotImplemented
        return (
            np.array_equal(self.center, other.center)
            and self.size == other.size
            and self.yaw == other.yaw
            and self.category == other.category
        )

    __hash__ = None
