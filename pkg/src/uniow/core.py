"""Geometry primitives and scene containers.

Boxes are axis-aligned rectangles in xyxy corner form. A scene bundles
precomputed region features (anchors) with ground-truth boxes; no pixel
data exists anywhere in the library.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Reserved category id for ground truth and detections outside the
# vocabulary. Real categories use dense non-negative ids.
UNKNOWN_ID = -1


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with strictly positive extent."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate: {v!r}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(
                f"degenerate box: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def contains_point(self, x: float, y: float) -> bool:
        # Edge-inclusive on all four sides.
        return self.x1 <= x <= self.x2 and self.y1 <= y <= self.y2


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: list[BBox]) -> np.ndarray:
    """Stack boxes into an (n, 4) float64 array in xyxy order."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


def pairwise_iou(boxes_a: list[BBox], boxes_b: list[BBox]) -> np.ndarray:
    """IoU for every pair: returns an (len(a), len(b)) matrix."""
    a = boxes_to_array(boxes_a)
    b = boxes_to_array(boxes_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def region_feature(values: np.ndarray | list[float]) -> np.ndarray:
    """Validate and coerce a precomputed region feature vector."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] == 0:
        raise ValueError(f"feature must be a non-empty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("feature contains non-finite values")
    return v


@dataclass(frozen=True)
class GroundTruth:
    """Annotated object: box plus category id (UNKNOWN_ID allowed)."""

    box: BBox
    category_id: int

    def __post_init__(self) -> None:
        if self.category_id < 0 and self.category_id != UNKNOWN_ID:
            raise ValueError(f"bad category id: {self.category_id}")


@dataclass(frozen=True)
class Anchor:
    """Candidate region: precomputed feature vector plus its box."""

    feature: np.ndarray
    box: BBox

    def __post_init__(self) -> None:
        object.__setattr__(self, "feature", region_feature(self.feature))


@dataclass
class Scene:
    """One image-worth of anchors and ground truth."""

    id: str
    anchors: list[Anchor] = field(default_factory=list)
    ground_truth: list[GroundTruth] = field(default_factory=list)

    def __post_init__(self) -> None:
        dims = {a.feature.shape[0] for a in self.anchors}
        if len(dims) > 1:
            raise ValueError(f"mixed feature dims in scene {self.id!r}: {sorted(dims)}")

    def anchor_boxes(self) -> list[BBox]:
        return [a.box for a in self.anchors]

    def gt_boxes(self) -> list[BBox]:
        return [g.box for g in self.ground_truth]

    def feature_matrix(self) -> np.ndarray:
        """Anchor features stacked into an (n, dim) array."""
        if not self.anchors:
            return np.zeros((0, 0), dtype=np.float64)
        return np.stack([a.feature for a in self.anchors])


@dataclass(frozen=True)
class Detection:
    """Scored output box; category_id may be UNKNOWN_ID."""

    box: BBox
    category_id: int
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score outside [0, 1]: {self.score}")
        if self.category_id < 0 and self.category_id != UNKNOWN_ID:
            raise ValueError(f"bad category id: {self.category_id}")
