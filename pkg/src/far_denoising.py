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
Range-modulated denoising groups built around GT boxes. These are training-only queries:
positives must recover their GT box, negatives must be scored 0.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from far_box3d import Box3D
from far_errors import DenoiseError
from far_query_engine import EmbedParams, Query, QueryKind, QuerySource, pos_embed


class NoiseForm(str, Enum):
    LOG = "log"
    LINEAR = "linear"
    SQRT = "sqrt"
    FIXED = "fixed"


def range_modulation(r, form: NoiseForm):
    """Range law g(r) scaling the negative offset magnitude. Vectorizes over r."""
    r = np.asarray(r, dtype=np.float64)
    if form == NoiseForm.LOG:
        return np.log1p(r)
    if form == NoiseForm.LINEAR:
        return r
    if form == NoiseForm.SQRT:
        return np.sqrt(r)
    return np.ones_like(r)


@dataclass(frozen=True)
class NoiseSpec:
    form: NoiseForm = NoiseForm.LOG
    scale: float = 2.0
    groups: int = 3
    negatives_per_group: int = 2

    def __post_init__(self):
        object.__setattr__(self, "form", NoiseForm(self.form))
        if self.groups < 1:
            raise DenoiseError(f"At least one denoising group is required, got {self.groups}")
        if self.negatives_per_group < 0:
            raise DenoiseError(f"Negative count must be non-negative, got {self.negatives_per_group}")
        if not self.scale > 0:
            raise DenoiseError(f"Noise scale must be positive, got {self.scale}")

    @property
    def queries_per_gt(self) -> int:
        return self.groups * (1 + self.negatives_per_group)

    def to_dict(self) -> dict:
        return {
            "form": self.form.value,
            "scale": self.scale,
            "groups": self.groups,
            "negatives_per_group": self.negatives_per_group,
        }

    @staticmethod
    def from_dict(d: dict) -> "NoiseSpec":
        unknown = set(d) - {"form", "scale", "groups", "negatives_per_group"}
        if unknown:
            raise DenoiseError(f"Unknown denoise fields {sorted(unknown)}")
        try:
            form = NoiseForm(d.get("form", NoiseForm.LOG.value))
        except ValueError:
            raise DenoiseError(f"Unsupported noise form '{d.get('form')}'")
        return NoiseSpec(
            form=form,
            scale=float(d.get("scale", 2.0)),
            groups=int(d.get("groups", 3)),
            negatives_per_group=int(d.get("negatives_per_group", 2)),
        )


def positive_offset(box: Box3D, rng: np.random.Generator) -> np.ndarray:
    """Offset keeping the noisy center strictly inside `box`: u * size / 2 in the box frame, u in (-1, 1)"""
    u = rng.uniform(np.nextafter(-1.0, 0.0), 1.0, 3)
    return box.rotation @ (u * box.half_size)


def negative_offset(center: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Ground-plane offset of magnitude scale * g(range) in a uniformly drawn direction"""
    r = math.hypot(center[0], center[1])
    magnitude = spec.scale * float(range_modulation(r, spec.form))
    theta = rng.uniform(-math.pi, math.pi)
    return np.array([magnitude * math.cos(theta), magnitude * math.sin(theta), 0.0])


@dataclass(frozen=True, eq=False)
class DenoiseGroup:
    gt_index: int
    group: int
    positive: Query
    negatives: list[Query]

    @property
    def queries(self) -> list[Query]:
        return [self.positive] + list(self.negatives)


@dataclass(frozen=True, eq=False)
class DenoiseTarget:
    """Targets aligned with the flattened group queries: a GT box for positives, None for negatives"""

    boxes: list[Box3D | None]
    class_scores: list[float | None]

    def __len__(self) -> int:
        return len(self.boxes)


def _denoise_query(kind: QueryKind, point: np.ndarray, params: EmbedParams, gt_index: int, group: int, category):
    return Query(
        kind,
        point,
        pos_embed(point, params),
        0.0,
        QuerySource(gt_index=gt_index, noise_group=group, category=category),
    )


def make_noise_groups(
    gts: list[Box3D], spec: NoiseSpec, params: EmbedParams, seed: int = 0
) -> tuple[list[DenoiseGroup], DenoiseTarget]:
    """
    Builds spec.groups groups of one positive and spec.negatives_per_group negatives per GT box.
    Every GT draws from its own generator seeded with seed XOR gt_index.
    """
    groups = []
    boxes = []
    class_scores = []
    for gt_index, gt in enumerate(gts):
        rng = np.random.default_rng(seed ^ gt_index)
        for group in range(spec.groups):
            positive = _denoise_query(
                QueryKind.DENOISE_POSITIVE, gt.center + positive_offset(gt, rng), params, gt_index, group, gt.category
            )
            negatives = [
                _denoise_query(
                    QueryKind.DENOISE_NEGATIVE,
                    gt.center + negative_offset(gt.center, spec, rng),
                    params,
                    gt_index,
                    group,
                    gt.category,
                )
                for _ in range(spec.negatives_per_group)
            ]
            groups.append(DenoiseGroup(gt_index, group, positive, negatives))
            boxes.append(gt)
            class_scores.append(None)
            boxes.extend([None] * len(negatives))
            class_scores.extend([0.0] * len(negatives))
    return groups, DenoiseTarget(boxes, class_scores)


def separation_margin(groups: list[DenoiseGroup], gts: list[Box3D]) -> np.ndarray:
    """Distance of every negative from its GT center minus the GT half diagonal, in group order"""
    margins = []
    for group in groups:
        if not (0 <= group.gt_index < len(gts)):
            raise DenoiseError(f"Denoise group references missing GT {group.gt_index}")
        gt = gts[group.gt_index]
        for negative in group.negatives:
            margins.append(float(np.linalg.norm(negative.ref_point - gt.center)) - gt.half_diagonal)
    return np.array(margins, dtype=np.float64)
