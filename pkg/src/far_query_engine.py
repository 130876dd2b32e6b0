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
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from far_camera_geometry import CameraRig, Pixel, unproject_pixel
from far_depth_bins import DepthBinConfig, DepthDistribution, expected_depth
from far_errors import QueryError

DEFAULT_TAU = 0.1
ANCHOR_LAYOUT_CARTESIAN = "cartesian"
ANCHOR_LAYOUT_POLAR = "polar"
ANCHOR_LAYOUTS = (ANCHOR_LAYOUT_CARTESIAN, ANCHOR_LAYOUT_POLAR)


class QueryKind(str, Enum):
    GLOBAL = "global"
    ADAPTIVE = "adaptive"
    PROPAGATED = "propagated"
    DENOISE_POSITIVE = "denoise_positive"
    DENOISE_NEGATIVE = "denoise_negative"

    @property
    def is_denoise(self) -> bool:
        return self in (QueryKind.DENOISE_POSITIVE, QueryKind.DENOISE_NEGATIVE)


@dataclass(frozen=True, eq=False)
class RangeBox:
    """Axis aligned perception range in the ego frame"""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=np.float64).reshape(3)
        hi = np.array(self.hi, dtype=np.float64).reshape(3)
        if not np.all(lo < hi):
            raise QueryError(f"Range box bounds must be strictly ordered, got {lo} and {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @staticmethod
    def square(half_extent: float = 76.2, z_min: float = -2.0, z_max: float = 4.0) -> "RangeBox":
        return RangeBox([-half_extent, -half_extent, z_min], [half_extent, half_extent, z_max])

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    @property
    def half_extent(self) -> float:
        return float(self.hi[0])

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((points >= self.lo) & (points <= self.hi), axis=1)

    def encloses(self, other: "RangeBox") -> bool:
        return bool(np.all(self.lo <= other.lo) and np.all(self.hi >= other.hi))


@dataclass(frozen=True, eq=False)
class Mlp:
    """Two affine layers with a ReLU in between. Works on single vectors and on row batches."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        if self.w1.shape[0] != self.b1.shape[0] or self.w2.shape[1] != self.w1.shape[0]:
            raise QueryError(f"Inconsistent MLP hidden sizes {self.w1.shape}, {self.b1.shape}, {self.w2.shape}")
        if self.w2.shape[0] != self.b2.shape[0]:
            raise QueryError(f"Inconsistent MLP output sizes {self.w2.shape}, {self.b2.shape}")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        hidden = np.maximum(x @ self.w1.T + self.b1, 0.0)
        return hidden @ self.w2.T + self.b2

    @staticmethod
    def random(rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int) -> "Mlp":
        return Mlp(
            rng.normal(0.0, 1.0 / math.sqrt(in_dim), (hidden, in_dim)),
            np.zeros(hidden),
            rng.normal(0.0, 1.0 / math.sqrt(hidden), (out_dim, hidden)),
            np.zeros(out_dim),
        )

    @staticmethod
    def zeros(in_dim: int, hidden: int, out_dim: int) -> "Mlp":
        return Mlp(np.zeros((hidden, in_dim)), np.zeros(hidden), np.zeros((out_dim, hidden)), np.zeros(out_dim))


@dataclass(frozen=True, eq=False)
class EmbedParams:
    dim: int
    frequencies: int
    context_dim: int
    pos_mlp: Mlp
    sem_mlp: Mlp
    range_box: RangeBox

    def __post_init__(self):
        if self.pos_mlp.in_dim != 6 * self.frequencies or self.pos_mlp.out_dim != self.dim:
            raise QueryError(
                f"Positional MLP must map {6 * self.frequencies} -> {self.dim}, "
                f"got {self.pos_mlp.in_dim} -> {self.pos_mlp.out_dim}"
            )
        if self.sem_mlp.in_dim != self.context_dim + 1 or self.sem_mlp.out_dim != self.dim:
            raise QueryError(
                f"Semantic MLP must map {self.context_dim + 1} -> {self.dim}, "
                f"got {self.sem_mlp.in_dim} -> {self.sem_mlp.out_dim}"
            )

    @staticmethod
    def random(
        dim: int = 32,
        context_dim: int = 16,
        frequencies: int = 4,
        hidden: int = 64,
        range_box: RangeBox | None = None,
        seed: int = 0,
    ) -> "EmbedParams":
        rng = np.random.default_rng(seed)
        return EmbedParams(
            dim=dim,
            frequencies=frequencies,
            context_dim=context_dim,
            pos_mlp=Mlp.random(rng, 6 * frequencies, hidden, dim),
            sem_mlp=Mlp.random(rng, context_dim + 1, hidden, dim),
            range_box=range_box if range_box is not None else RangeBox.square(),
        )


@dataclass(frozen=True, eq=False)
class Detection2D:
    view: str
    box: tuple[float, float, float, float]
    score: float
    category: str
    context: np.ndarray = field(repr=False)

    def __post_init__(self):
        u_min, v_min, u_max, v_max = self.box
        if not (u_min < u_max and v_min < v_max):
            raise QueryError(f"Degenerate 2D box {self.box}")
        if not (0.0 <= self.score <= 1.0):
            raise QueryError(f"Detection score {self.score} outside [0, 1]")
        object.__setattr__(self, "box", tuple(float(x) for x in self.box))
        object.__setattr__(self, "context", np.asarray(self.context, dtype=np.float64).reshape(-1))

    @property
    def center(self) -> tuple[float, float]:
        u_min, v_min, u_max, v_max = self.box
        return (u_min + u_max) / 2, (v_min + v_max) / 2

    @property
    def area(self) -> float:
        u_min, v_min, u_max, v_max = self.box
        return (u_max - u_min) * (v_max - v_min)

    def to_dict(self) -> dict:
        return {
            "view": self.view,
            "box": list(self.box),
            "score": self.score,
            "category": self.category,
            "center": list(self.center),
        }

    @staticmethod
    def from_dict(d: dict, context: np.ndarray | None = None) -> "Detection2D":
        """The context feature is not serialized; it is empty unless given"""
        return Detection2D(
            d["view"], tuple(d["box"]), float(d["score"]), d["category"], np.zeros(0) if context is None else context
        )


@dataclass(frozen=True)
class QuerySource:
    view: str | None = None
    detection_index: int | None = None
    gt_index: int | None = None
    noise_group: int | None = None
    category: str | None = None


@dataclass(frozen=True, eq=False)
class Query:
    kind: QueryKind
    ref_point: np.ndarray
    embedding: np.ndarray = field(repr=False)
    score: float = 0.0
    source: QuerySource | None = None

    def __post_init__(self):
        ref_point = np.array(self.ref_point, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(ref_point)):
            raise QueryError(f"Query reference point must be finite, got {ref_point}")
        if self.kind.is_denoise and (self.source is None or self.source.gt_index is None):
            raise QueryError(f"{self.kind.value} query must reference a GT box")
        object.__setattr__(self, "ref_point", ref_point)
        object.__setattr__(self, "embedding", np.asarray(self.embedding, dtype=np.float64).reshape(-1))

    @property
    def dim(self) -> int:
        return self.embedding.shape[0]

    def to_dict(self) -> dict:
        source = self.source if self.source is not None else QuerySource()
        d = {
            "kind": self.kind.value,
            "ref_point": [float(x) for x in self.ref_point],
            "score": float(self.score),
            "view": source.view,
            "category": source.category,
        }
        indices = {k: v for k, v in source.__dict__.items() if v is not None and k not in ("view", "category")}
        if indices:
            d["source"] = indices
        return d

    @staticmethod
    def from_dict(d: dict, embedding: np.ndarray | None = None) -> "Query":
        """The embedding is not serialized; it is empty unless given"""
        kind = QueryKind(d["kind"])
        fields = dict(d.get("source", {}), view=d.get("view"), category=d.get("category"))
        source = QuerySource(**fields) if any(v is not None for v in fields.values()) else None
        return Query(kind, d["ref_point"], np.zeros(0) if embedding is None else embedding, float(d["score"]), source)


def sinusoidal_features(p: np.ndarray, params: EmbedParams) -> np.ndarray:
    """
    Normalizes coordinates into the embedding range box and expands each one into
    (sin, cos)(2^k * pi * x) pairs for k = 0..F-1. Accepts (3,) or (N, 3) input.
    """
    p = np.asarray(p, dtype=np.float64)
    box = params.range_box
    normalized = (p - box.lo) / (box.hi - box.lo)
    angles = normalized[..., :, None] * (np.pi * 2.0 ** np.arange(params.frequencies))
    features = np.stack([np.sin(angles), np.cos(angles)], axis=-1)
    return features.reshape(*p.shape[:-1], 6 * params.frequencies)


def pos_embed(p: np.ndarray, params: EmbedParams) -> np.ndarray:
    return params.pos_mlp(sinusoidal_features(p, params))


def sem_embed(z_2d: np.ndarray, s_2d: float, params: EmbedParams) -> np.ndarray:
    z_2d = np.asarray(z_2d, dtype=np.float64).reshape(-1)
    if z_2d.shape[0] != params.context_dim:
        raise QueryError(f"Context has dimension {z_2d.shape[0]}, expected {params.context_dim}")
    return params.sem_mlp(np.concatenate([z_2d, [s_2d]]))


def filter_proposals(dets: list[Detection2D], tau: float) -> list[Detection2D]:
    """Keeps detections with score >= tau, preserving their order"""
    if not (0.0 <= tau <= 1.0):
        raise QueryError(f"Score threshold {tau} outside [0, 1]")
    return [d for d in dets if d.score >= tau]


def generate_adaptive_queries(
    dets: list[Detection2D],
    depth_lookup: list[DepthDistribution],
    rig: CameraRig,
    cfg: DepthBinConfig,
    params: EmbedParams,
    tau: float = DEFAULT_TAU,
    gt_depths: list[float] | None = None,
    use_gt_depth: bool = False,
    range_box: RangeBox | None = None,
) -> list[Query]:
    """
    Lifts thresholded 2D detections into 3D adaptive queries.

    The box center is unprojected at the expected depth of its depth distribution, or at the
    provided GT depth when `use_gt_depth` is set. Queries outside the range box are dropped.
    """
    log = logging.getLogger(generate_adaptive_queries.__name__)
    if len(depth_lookup) != len(dets):
        raise QueryError(f"Got {len(depth_lookup)} depth distributions for {len(dets)} detections")
    if use_gt_depth and (gt_depths is None or len(gt_depths) != len(dets)):
        raise QueryError("GT depth mode requires one GT depth per detection")
    if not (0.0 <= tau <= 1.0):
        raise QueryError(f"Score threshold {tau} outside [0, 1]")
    range_box = range_box if range_box is not None else params.range_box

    queries = []
    dropped = 0
    for index, det in enumerate(dets):
        if det.score < tau:
            continue
        depth = gt_depths[index] if use_gt_depth else expected_depth(depth_lookup[index], cfg)
        u, v = det.center
        c_3d = unproject_pixel(Pixel(u, v, det.view), depth, rig)
        if not range_box.contains(c_3d)[0]:
            dropped += 1
            continue
        embedding = pos_embed(c_3d, params) + sem_embed(det.context, det.score, params)
        queries.append(
            Query(
                QueryKind.ADAPTIVE,
                c_3d,
                embedding,
                det.score,
                QuerySource(view=det.view, detection_index=index, category=det.category),
            )
        )
    if dropped:
        log.debug("Dropped %d adaptive queries outside the perception range", dropped)
    return queries


def assemble_query_set(global_: list[Query], adaptive: list[Query], propagated: list[Query]) -> list[Query]:
    queries = list(global_) + list(adaptive) + list(propagated)
    dims = {q.dim for q in queries}
    if len(dims) > 1:
        raise QueryError(f"Queries have mixed embedding dimensions {sorted(dims)}")
    return queries


def sample_anchor_points(
    n: int, rng: np.random.Generator, range_box: RangeBox, layout: str = ANCHOR_LAYOUT_CARTESIAN
) -> np.ndarray:
    """
    Draws `n` anchor points inside the range box.

    "cartesian" draws uniformly over the box volume. "polar" draws ground range uniformly in
    [0, half_extent * sqrt(2)] with a uniform bearing, rejecting points outside the square, so
    anchors crowd the near field.
    """
    if layout not in ANCHOR_LAYOUTS:
        raise QueryError(f"Unsupported anchor layout '{layout}'")
    lo, hi = range_box.lo, range_box.hi
    if n == 0:
        return np.zeros((0, 3))
    if layout == ANCHOR_LAYOUT_CARTESIAN:
        return rng.uniform(lo, hi, size=(n, 3))
    center = range_box.center
    half = (hi[:2] - lo[:2]) / 2
    max_range = float(np.linalg.norm(half))
    accepted = []
    count = 0
    while count < n:
        r = rng.uniform(0.0, max_range, 2 * n)
        theta = rng.uniform(-math.pi, math.pi, 2 * n)
        xy = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        inside = np.all(np.abs(xy) <= half, axis=1)
        accepted.append(xy[inside] + center[:2])
        count += int(inside.sum())
    xy = np.concatenate(accepted)[:n]
    z = rng.uniform(lo[2], hi[2], n)
    return np.column_stack([xy, z])


def make_global_queries(
    n: int, seed: int, params: EmbedParams, range_box: RangeBox | None = None, layout: str = ANCHOR_LAYOUT_CARTESIAN
) -> list[Query]:
    """Seeded stand-ins for learned global anchors, uniform over the range box by default"""
    if n < 0:
        raise QueryError(f"Global query count must be non-negative, got {n}")
    range_box = range_box if range_box is not None else params.range_box
    rng = np.random.default_rng(seed)
    points = sample_anchor_points(n, rng, range_box, layout)
    if n == 0:
        return []
    embeddings = pos_embed(points, params)
    return [Query(QueryKind.GLOBAL, points[i], embeddings[i]) for i in range(n)]


def requery(q: Query, ref_point: np.ndarray, params: EmbedParams, **changes) -> Query:
    """Moves a query, replacing the positional part of its embedding and keeping the rest"""
    embedding = q.embedding - pos_embed(q.ref_point, params) + pos_embed(ref_point, params)
    return replace(q, ref_point=np.asarray(ref_point, dtype=np.float64), embedding=embedding, **changes)
