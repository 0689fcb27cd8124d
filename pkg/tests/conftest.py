"""Shared fixtures and random-instance builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from uniow import Anchor, BBox, GroundTruth, Scene

settings.register_profile("suite", deadline=None, max_examples=60)
settings.load_profile("suite")


def grid_box(rng: np.random.Generator, span: int = 12) -> BBox:
    """Integer-cornered box; quantization makes exact ties common."""
    x1 = int(rng.integers(0, span - 1))
    y1 = int(rng.integers(0, span - 1))
    x2 = x1 + int(rng.integers(1, span - x1))
    y2 = y1 + int(rng.integers(1, span - y1))
    return BBox(float(x1), float(y1), float(x2), float(y2))


def quantized_scores(rng: np.random.Generator, n: int, g: int, steps: int = 8) -> np.ndarray:
    """Scores on a coarse grid in (0, 1] so metric ties occur."""
    return rng.integers(1, steps + 1, size=(n, g)).astype(np.float64) / steps


def random_scene(
    rng: np.random.Generator, n_anchors: int, n_gts: int, dim: int = 4
) -> Scene:
    anchors = [
        Anchor(rng.normal(size=dim) + 2.0, grid_box(rng)) for _ in range(n_anchors)
    ]
    gts = [GroundTruth(grid_box(rng), int(rng.integers(0, 3))) for _ in range(n_gts)]
    return Scene("rnd", anchors, gts)


def box_tuple(b: BBox) -> tuple:
    return (b.x1, b.y1, b.x2, b.y2)


@pytest.fixture
def np_rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
