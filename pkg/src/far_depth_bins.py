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
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from far_errors import DepthBinError

SPACING_UNIFORM = "uniform"
SPACING_LOG_UNIFORM = "log-uniform"
NORMALIZATION_TOLERANCE = 1e-9


@dataclass(frozen=True)
class DepthBinConfig:
    """
    Discretization of the depth axis used by the classification-style depth head.

    Bins partition [d_min, d_max]. Boundary values belong to the lower bin, except d_min
    which belongs to the first bin.
    """

    d_min: float = 1.0
    d_max: float = 153.0
    n_bins: int = 64
    spacing: str = SPACING_LOG_UNIFORM

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise DepthBinError(f"Depth range must satisfy 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if self.n_bins < 2:
            raise DepthBinError(f"At least two depth bins are required, got {self.n_bins}")
        if self.spacing not in (SPACING_UNIFORM, SPACING_LOG_UNIFORM):
            raise DepthBinError(f"Unsupported bin spacing '{self.spacing}'")

    @cached_property
    def edges(self) -> np.ndarray:
        if self.spacing == SPACING_UNIFORM:
            edges = np.linspace(self.d_min, self.d_max, self.n_bins + 1)
        else:
            edges = np.geomspace(self.d_min, self.d_max, self.n_bins + 1)
        edges[0], edges[-1] = self.d_min, self.d_max
        edges.setflags(write=False)
        return edges

    @cached_property
    def centers(self) -> np.ndarray:
        e = self.edges
        centers = (e[:-1] + e[1:]) / 2 if self.spacing == SPACING_UNIFORM else np.sqrt(e[:-1] * e[1:])
        centers.setflags(write=False)
        return centers

    @property
    def ratio(self) -> float:
        """Ratio between consecutive log-uniform edges"""
        return (self.d_max / self.d_min) ** (1.0 / self.n_bins)

    def to_dict(self) -> dict:
        return {"d_min": self.d_min, "d_max": self.d_max, "n_bins": self.n_bins, "spacing": self.spacing}

    @staticmethod
    def from_dict(d: dict) -> "DepthBinConfig":
        unknown = set(d) - {"d_min", "d_max", "n_bins", "spacing"}
        if unknown:
            raise DepthBinError(f"Unknown depth bin fields {sorted(unknown)}")
        return DepthBinConfig(
            d_min=float(d.get("d_min", 1.0)),
            d_max=float(d.get("d_max", 153.0)),
            n_bins=int(d.get("n_bins", 64)),
            spacing=str(d.get("spacing", SPACING_LOG_UNIFORM)),
        )


@dataclass(frozen=True, eq=False)
class DepthDistribution:
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64).reshape(-1)
        if np.any(np.isnan(probs)) or np.any(probs < 0):
            raise DepthBinError("Depth distribution must contain non-negative numbers only")
        if abs(probs.sum() - 1.0) > NORMALIZATION_TOLERANCE:
            raise DepthBinError(f"Depth distribution is not normalized, sum={probs.sum()}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @staticmethod
    def one_hot(b: int, cfg: DepthBinConfig) -> "DepthDistribution":
        probs = np.zeros(cfg.n_bins)
        probs[b] = 1.0
        return DepthDistribution(probs)

    @staticmethod
    def interpolated(d: float, cfg: DepthBinConfig) -> "DepthDistribution":
        """
        Splits the mass between the two bin centers around `d` so that the expected depth equals `d`.
        Depths outside the first/last center collapse to that bin.
        """
        centers = cfg.centers
        probs = np.zeros(cfg.n_bins)
        if d <= centers[0]:
            probs[0] = 1.0
        elif d >= centers[-1]:
            probs[-1] = 1.0
        else:
            upper = int(np.searchsorted(centers, d, side="right"))
            lower = upper - 1
            t = (d - centers[lower]) / (centers[upper] - centers[lower])
            probs[lower] = 1.0 - t
            probs[upper] = t
        return DepthDistribution(probs)


def depth_to_bin(d: float, cfg: DepthBinConfig) -> int:
    if not (cfg.d_min <= d <= cfg.d_max):
        raise DepthBinError(f"Depth {d} outside [{cfg.d_min}, {cfg.d_max}]")
    index = int(np.searchsorted(cfg.edges, d, side="left")) - 1
    return min(max(index, 0), cfg.n_bins - 1)


def bin_to_depth(b: int, cfg: DepthBinConfig) -> float:
    """Arithmetic (uniform) or geometric (log-uniform) center of bin `b`"""
    if not (0 <= b < cfg.n_bins):
        raise DepthBinError(f"Bin index {b} outside [0, {cfg.n_bins})")
    return float(cfg.centers[b])


def expected_depth(dist: DepthDistribution, cfg: DepthBinConfig) -> float:
    if dist.probs.shape != (cfg.n_bins,):
        raise DepthBinError(f"Distribution has {dist.probs.size} bins, config has {cfg.n_bins}")
    return float(np.dot(dist.probs, cfg.centers))


def local_bin_width(d: float, cfg: DepthBinConfig) -> float:
    """Width of a bin centered at depth `d`. Linear in `d` for log-uniform spacing."""
    if cfg.spacing == SPACING_UNIFORM:
        return (cfg.d_max - cfg.d_min) / cfg.n_bins
    root = math.sqrt(cfg.ratio)
    return d * (root - 1.0 / root)


def bin_width(b: int, cfg: DepthBinConfig) -> float:
    if not (0 <= b < cfg.n_bins):
        raise DepthBinError(f"Bin index {b} outside [0, {cfg.n_bins})")
    return float(cfg.edges[b + 1] - cfg.edges[b])
