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

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from far_box3d import Box3D
from far_errors import MatchingError


@dataclass(frozen=True, eq=False)
class Prediction:
    box: Box3D
    score: float

    def to_dict(self) -> dict:
        return {"box": self.box.to_dict(), "score": self.score}


@dataclass(frozen=True)
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_preds: list[int]
    unmatched_gts: list[int]
    distances: list[float] = field(default_factory=list)

    @property
    def num_matches(self) -> int:
        return len(self.pairs)


def center_distances(preds: list[Prediction], gts: list[Box3D]) -> np.ndarray:
    """(n_preds, n_gts) matrix of 3D center distances"""
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    p = np.stack([pred.box.center for pred in preds])
    g = np.stack([gt.center for gt in gts])
    return np.linalg.norm(p[:, None, :] - g[None, :, :], axis=2)


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimum total cost one-to-one assignment of min(n, m) pairs. distances carries the per-pair cost."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchingError(f"Cost matrix must be two dimensional, got shape {cost.shape}")
    if np.any(np.isnan(cost)):
        raise MatchingError("Cost matrix contains NaN")
    if not np.all(np.isfinite(cost)):
        raise MatchingError("Cost matrix contains infinite values")
    n, m = cost.shape
    if n == 0 or m == 0:
        return MatchResult([], list(range(n)), list(range(m)), [])
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    return MatchResult(
        pairs,
        sorted(set(range(n)) - set(int(r) for r in rows)),
        sorted(set(range(m)) - set(int(c) for c in cols)),
        [float(cost[r, c]) for r, c in pairs],
    )


def match_boxes(preds: list[Prediction], gts: list[Box3D]) -> MatchResult:
    return hungarian_match(center_distances(preds, gts))


def score_order(preds: list[Prediction]) -> np.ndarray:
    """Descending score order, stable on ties"""
    return np.argsort(-np.array([p.score for p in preds], dtype=np.float64), kind="stable")


def greedy_match(preds: list[Prediction], gts: list[Box3D], threshold: float) -> MatchResult:
    """
    Detection-eval matching: in descending score order every prediction takes the nearest
    unmatched GT whose center lies within `threshold` meters.
    """
    if threshold <= 0:
        raise MatchingError(f"Matching threshold must be positive, got {threshold}")
    distances = center_distances(preds, gts)
    taken = np.zeros(len(gts), dtype=bool)
    pairs = []
    pair_distances = []
    unmatched_preds = []
    for pi in score_order(preds):
        candidates = np.where(~taken & (distances[pi] <= threshold), distances[pi], np.inf) if gts else []
        if len(candidates) == 0 or not np.isfinite(np.min(candidates)):
            unmatched_preds.append(int(pi))
            continue
        gi = int(np.argmin(candidates))
        taken[gi] = True
        pairs.append((int(pi), gi))
        pair_distances.append(float(distances[pi, gi]))
    return MatchResult(pairs, sorted(unmatched_preds), [int(i) for i in np.flatnonzero(~taken)], pair_distances)
