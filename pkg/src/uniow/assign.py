"""Task-aligned label assignment with one-to-many and one-to-one heads.

Anchors are matched to ground truth by the alignment metric
m = score**alpha * iou**beta. The one-to-many head hands each ground
truth its top-k candidates (training signal); the one-to-one head picks
a single anchor per ground truth, which is what lets inference skip NMS.

All ties break deterministically: higher metric first, then lower ground
truth index, then lower anchor index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Scene, pairwise_iou


@dataclass(frozen=True)
class AssignConfig:
    alpha: float = 0.5
    beta: float = 6.0
    topk: int = 10
    center_prior: bool = True
    # "iou": target is the pair's IoU. "normalized": per ground truth,
    # targets are rescaled so the best pair lands on that ground truth's
    # maximum IoU (o = m / m_max * u_max over its assigned pairs).
    target_mode: str = "iou"

    def __post_init__(self) -> None:
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError(f"alpha/beta must be non-negative: {self.alpha}, {self.beta}")
        if self.topk < 1:
            raise ValueError(f"topk must be at least 1: {self.topk}")
        if self.target_mode not in ("iou", "normalized"):
            raise ValueError(f"unknown target_mode: {self.target_mode!r}")


@dataclass(frozen=True)
class AssignedPair:
    anchor_index: int
    gt_index: int
    metric: float
    iou: float
    target: float


@dataclass
class Assignment:
    """Anchor-to-ground-truth matches from one head."""

    pairs: list[AssignedPair]
    num_anchors: int
    num_gts: int

    def anchor_indices(self) -> list[int]:
        return [p.anchor_index for p in self.pairs]

    def by_anchor(self) -> dict[int, AssignedPair]:
        return {p.anchor_index: p for p in self.pairs}


def _fixed_pow(x: np.ndarray, p: float) -> np.ndarray:
    """x**p through correctly-rounded primitives for half-integer p.

    sqrt and multiplication round identically on every platform and in
    every numpy loop flavor; libm pow drifts in the last ulp between
    them. Fixed-order square-and-multiply keeps the metric bit-stable
    for the exponents real configs use; anything else falls back to pow.
    """
    two_p = p * 2.0
    if two_p != int(two_p) or not (0 < int(two_p) <= 64):
        return np.power(x, p)
    n = int(two_p)
    base = np.sqrt(x) if n % 2 else x
    if n % 2 == 0:
        n //= 2
    out = base.copy()
    for bit in bin(n)[3:]:
        out = out * out
        if bit == "1":
            out = out * base
    return out


def align_metric(scores: np.ndarray, ious: np.ndarray, cfg: AssignConfig) -> np.ndarray:
    """Elementwise score**alpha * iou**beta for matched shapes."""
    s = np.asarray(scores, dtype=np.float64)
    u = np.asarray(ious, dtype=np.float64)
    if s.shape != u.shape:
        raise ValueError(f"shape mismatch: scores {s.shape} vs ious {u.shape}")
    if s.size and (s.min() < 0.0 or s.max() > 1.0):
        raise ValueError("scores outside [0, 1]")
    if u.size and (u.min() < 0.0 or u.max() > 1.0):
        raise ValueError("ious outside [0, 1]")
    return _fixed_pow(s, cfg.alpha) * _fixed_pow(u, cfg.beta)


def _candidates(
    scene: Scene, scores: np.ndarray, cfg: AssignConfig
) -> tuple[np.ndarray, np.ndarray, list[list[int]]]:
    """Per-ground-truth candidate anchor lists, best metric first.

    A candidate must overlap its ground truth (iou > 0), have positive
    alignment metric, and, when the center prior is on, have its anchor
    box center inside the ground truth box.
    """
    a_boxes = scene.anchor_boxes()
    g_boxes = scene.gt_boxes()
    n, g = len(a_boxes), len(g_boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (n, g):
        raise ValueError(f"scores shape {scores.shape}, expected ({n}, {g})")
    u = pairwise_iou(a_boxes, g_boxes)
    m = align_metric(scores, u, cfg)
    ok = (u > 0.0) & (m > 0.0)
    if cfg.center_prior and n and g:
        inside = np.zeros((n, g), dtype=bool)
        for i, ab in enumerate(a_boxes):
            cx, cy = ab.center
            for j, gb in enumerate(g_boxes):
                inside[i, j] = gb.contains_point(cx, cy)
        ok &= inside
    lists: list[list[int]] = []
    for j in range(g):
        idxs = np.nonzero(ok[:, j])[0].tolist()
        idxs.sort(key=lambda i: (-m[i, j], i))
        lists.append(idxs)
    return u, m, lists


def _finish(
    raw: list[tuple[int, int]],
    u: np.ndarray,
    m: np.ndarray,
    cfg: AssignConfig,
    num_anchors: int,
    num_gts: int,
) -> Assignment:
    """Attach targets to (anchor, gt) matches and freeze ordering."""
    if cfg.target_mode == "iou":
        tgt = {(i, j): u[i, j] for i, j in raw}
    else:
        tgt = {}
        for gt in {j for _, j in raw}:
            group = [(i, j) for i, j in raw if j == gt]
            m_max = max(m[i, j] for i, j in group)
            u_max = max(u[i, j] for i, j in group)
            for i, j in group:
                tgt[(i, j)] = m[i, j] / m_max * u_max
    pairs = [
        AssignedPair(i, j, float(m[i, j]), float(u[i, j]), float(tgt[(i, j)]))
        for i, j in sorted(raw, key=lambda p: (p[1], p[0]))
    ]
    return Assignment(pairs, num_anchors, num_gts)


def assign_o2m(scene: Scene, scores: np.ndarray, cfg: AssignConfig) -> Assignment:
    """One-to-many head: up to top-k anchors per ground truth.

    An anchor claimed by several ground truths keeps only the pair with
    the larger metric (ties: lower ground truth index).
    """
    u, m, lists = _candidates(scene, scores, cfg)
    best: dict[int, tuple[float, int]] = {}
    for j, lst in enumerate(lists):
        for i in lst[: cfg.topk]:
            prev = best.get(i)
            # Strictly-greater keeps the earlier (lower-index) ground
            # truth on metric ties, since j only increases.
            if prev is None or m[i, j] > prev[0]:
                best[i] = (m[i, j], j)
    raw = [(i, j) for i, (_, j) in best.items()]
    return _finish(raw, u, m, cfg, len(scene.anchors), len(scene.ground_truth))


def assign_o2o(scene: Scene, scores: np.ndarray, cfg: AssignConfig) -> Assignment:
    """One-to-one head: at most one anchor per ground truth, no sharing.

    Ground truths pick greedily in order of their best candidate metric
    (ties: lower index); each takes its best still-unclaimed candidate.
    """
    u, m, lists = _candidates(scene, scores, cfg)
    order = sorted(
        (j for j in range(len(lists)) if lists[j]),
        key=lambda j: (-m[lists[j][0], j], j),
    )
    claimed: set[int] = set()
    raw: list[tuple[int, int]] = []
    for j in order:
        for i in lists[j]:
            if i not in claimed:
                claimed.add(i)
                raw.append((i, j))
                break
    return _finish(raw, u, m, cfg, len(scene.anchors), len(scene.ground_truth))


def targets(
    assignment: Assignment, gt_category_ids: list[int], num_categories: int
) -> np.ndarray:
    """Scatter per-pair targets into an (anchors, categories) matrix.

    Unassigned entries are 0 (pure negatives). Each anchor carries at
    most one positive, in its assigned ground truth's category column.
    """
    if len(gt_category_ids) != assignment.num_gts:
        raise ValueError(
            f"{len(gt_category_ids)} category ids for {assignment.num_gts} ground truths"
        )
    out = np.zeros((assignment.num_anchors, num_categories), dtype=np.float64)
    for p in assignment.pairs:
        cat = gt_category_ids[p.gt_index]
        if not (0 <= cat < num_categories):
            raise ValueError(f"category id {cat} outside [0, {num_categories})")
        out[p.anchor_index, cat] = p.target
    return out
