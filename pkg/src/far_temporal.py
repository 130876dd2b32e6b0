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
from dataclasses import dataclass, field

import numpy as np

from far_errors import GeometryError, QueryError
from far_query_engine import EmbedParams, Query, QueryKind, requery

DEFAULT_MEMORY_CAPACITY = 128


@dataclass(frozen=True, eq=False)
class EgoMotion:
    """Rigid transform from the previous ego frame into the current one: p_curr = R @ p_prev + t"""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rotation @ rotation.T, np.eye(3), rtol=0.0, atol=1e-9):
            raise GeometryError("Ego motion rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-9:
            raise GeometryError("Ego motion rotation must have determinant +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @staticmethod
    def identity() -> "EgoMotion":
        return EgoMotion(np.eye(3), np.zeros(3))

    @staticmethod
    def planar(dx: float, dy: float, dyaw: float) -> "EgoMotion":
        c, s = math.cos(dyaw), math.sin(dyaw)
        return EgoMotion([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], [dx, dy, 0.0])

    @staticmethod
    def from_vehicle_step(forward: float, yaw: float) -> "EgoMotion":
        """Motion of static world points when the vehicle drives `forward` meters then turns by `yaw`"""
        return EgoMotion.planar(0.0, 0.0, -yaw).compose(EgoMotion.planar(-forward, 0.0, 0.0))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, first: "EgoMotion") -> "EgoMotion":
        """Motion equivalent to applying `first` and then self"""
        return EgoMotion(self.rotation @ first.rotation, self.rotation @ first.translation + self.translation)

    def inverse(self) -> "EgoMotion":
        return EgoMotion(self.rotation.T, -self.rotation.T @ self.translation)

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
        }

    @staticmethod
    def from_dict(d: dict) -> "EgoMotion":
        return EgoMotion(np.array(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"])


@dataclass(frozen=True, eq=False)
class QueryMemory:
    capacity: int = DEFAULT_MEMORY_CAPACITY
    queries: list[Query] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 0:
            raise QueryError(f"Memory capacity must be non-negative, got {self.capacity}")
        if len(self.queries) > self.capacity:
            raise QueryError(f"Memory holds {len(self.queries)} queries, capacity is {self.capacity}")
        if len(self.queries) != len(self.scores):
            raise QueryError("Memory scores are not aligned with queries")

    def __len__(self) -> int:
        return len(self.queries)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best scores, descending, ties resolved towards the lower index"""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return order[:k]


def select_propagated(queries: list[Query], scores, k: int) -> list[Query]:
    if len(scores) != len(queries):
        raise QueryError(f"Got {len(scores)} scores for {len(queries)} queries")
    if k < 0:
        raise QueryError(f"k must be non-negative, got {k}")
    candidates = [i for i, q in enumerate(queries) if not q.kind.is_denoise]
    if not candidates or k == 0:
        return []
    candidate_scores = np.asarray(scores, dtype=np.float64)[candidates]
    selected = top_k_indices(candidate_scores, k)
    return [_as_propagated(queries[candidates[i]], float(candidate_scores[i])) for i in selected]


def _as_propagated(q: Query, score: float) -> Query:
    return Query(QueryKind.PROPAGATED, q.ref_point, q.embedding, score, q.source)


def ego_compensate(q: Query, motion: EgoMotion, params: EmbedParams) -> Query:
    """Moves the reference point into the current frame and re-encodes the positional embedding part"""
    return requery(q, motion.apply(q.ref_point), params)


class TemporalPropagator:
    """Single-sequence query memory. Not shared between sequences."""

    def __init__(self, params: EmbedParams, capacity: int = DEFAULT_MEMORY_CAPACITY):
        self.__log = logging.getLogger(TemporalPropagator.__name__)
        self.__params = params
        self.__memory = QueryMemory(capacity)

    @property
    def memory(self) -> QueryMemory:
        return self.__memory

    def propagate(self, motion: EgoMotion) -> list[Query]:
        """Propagated queries for the frame reached by `motion`"""
        propagated = emit_propagated(self.__memory, motion, self.__params)
        self.__log.debug("Propagated %d queries", len(propagated))
        return propagated

    def update(self, frame_queries: list[Query], frame_scores):
        self.__memory = refill_memory(self.__memory, frame_queries, frame_scores)
        self.__log.debug("Memory holds %d queries", len(self.__memory))


def emit_propagated(mem: QueryMemory, motion: EgoMotion, params: EmbedParams) -> list[Query]:
    return [ego_compensate(q, motion, params) for q in mem.queries]


def refill_memory(mem: QueryMemory, frame_queries: list[Query], frame_scores) -> QueryMemory:
    selected = select_propagated(frame_queries, frame_scores, mem.capacity)
    return QueryMemory(mem.capacity, selected, [q.score for q in selected])


def step_memory(
    mem: QueryMemory, frame_queries: list[Query], frame_scores, motion: EgoMotion, params: EmbedParams
) -> tuple[QueryMemory, list[Query]]:
    """
    Emits the ego-compensated content of `mem` as this frame's propagated queries and refills
    the memory with the top-k queries of this frame.
    """
    propagated = emit_propagated(mem, motion, params)
    return refill_memory(mem, frame_queries, frame_scores), propagated
