"""Assignment heads against a brute-force reference."""

import numpy as np
import pytest

from uniow import (
    Anchor,
    AssignConfig,
    BBox,
    GroundTruth,
    Scene,
    align_metric,
    assign_o2m,
    assign_o2o,
    targets,
)

from conftest import box_tuple, grid_box, quantized_scores
from oracles import ref_o2m, ref_o2o


def _scene(anchor_boxes, gt_boxes, cats=None):
    cats = cats or [0] * len(gt_boxes)
    anchors = [Anchor(np.ones(3), b) for b in anchor_boxes]
    gts = [GroundTruth(b, c) for b, c in zip(gt_boxes, cats)]
    return Scene("s", anchors, gts)


def _as_pairs(assignment):
    return {(p.anchor_index, p.gt_index): p.target for p in assignment.pairs}


def test_align_metric_worked_example():
    cfg = AssignConfig(alpha=0.5, beta=6.0)
    m = align_metric(np.array([[0.81]]), np.array([[0.9]]), cfg)
    assert m[0, 0] == pytest.approx(0.4782969, abs=1e-7)


def test_align_metric_validation():
    cfg = AssignConfig()
    with pytest.raises(ValueError, match="mismatch"):
        align_metric(np.zeros((2, 1)), np.zeros((1, 2)), cfg)
    with pytest.raises(ValueError, match="outside"):
        align_metric(np.array([[1.5]]), np.array([[0.5]]), cfg)
    with pytest.raises(ValueError):
        AssignConfig(topk=0)
    with pytest.raises(ValueError):
        AssignConfig(target_mode="weird")


def test_zero_iou_anchor_never_assigned():
    # Anchor 1 is far away from the single ground truth.
    sc = _scene([BBox(0, 0, 4, 4), BBox(50, 50, 60, 60)], [BBox(0, 0, 4, 4)])
    scores = np.array([[0.9], [0.99]])
    for fn in (assign_o2m, assign_o2o):
        a = fn(sc, scores, AssignConfig())
        assert a.anchor_indices() == [0]


def test_center_prior_gates_candidates():
    # Anchor overlaps but its center lies outside the ground truth box.
    sc = _scene([BBox(3, 0, 9, 4)], [BBox(0, 0, 4, 4)])
    scores = np.array([[0.9]])
    assert assign_o2m(sc, scores, AssignConfig()).pairs == []
    off = AssignConfig(center_prior=False)
    assert len(assign_o2m(sc, scores, off).pairs) == 1


def test_o2m_topk_and_conflict_resolution():
    # Three anchors nested inside both ground truths; gt 0 is the better
    # fit for anchor 0, gt 1 for anchor 2.
    boxes = [BBox(0, 0, 4, 4), BBox(1, 1, 5, 5), BBox(2, 2, 6, 6)]
    gts = [BBox(0, 0, 4, 4), BBox(2, 2, 6, 6)]
    sc = _scene(boxes, gts, cats=[0, 1])
    scores = np.full((3, 2), 0.5)
    a = assign_o2m(sc, scores, AssignConfig(topk=3))
    got = {(p.anchor_index, p.gt_index) for p in a.pairs}
    assert got == {(0, 0), (1, 0), (2, 1)} or got == {(0, 0), (1, 1), (2, 1)}
    # Anchor 1 overlaps both equally; the tie goes to the lower gt index.
    mid = next(p for p in a.pairs if p.anchor_index == 1)
    assert mid.gt_index == 0


def test_o2o_shared_best_anchor():
    # Both ground truths prefer anchor 0; the higher-metric one takes it
    # and the other falls back to its next candidate.
    boxes = [BBox(0, 0, 4, 4), BBox(0, 0, 5, 5)]
    gts = [BBox(0, 0, 4, 4), BBox(0, 0, 4, 4)]
    sc = _scene(boxes, gts, cats=[0, 1])
    scores = np.array([[0.9, 0.8], [0.9, 0.8]])
    a = assign_o2o(sc, scores, AssignConfig(topk=2))
    got = {(p.anchor_index, p.gt_index) for p in a.pairs}
    assert got == {(0, 0), (1, 1)}


def test_uniqueness_invariants(np_rng):
    cfg = AssignConfig(topk=3)
    for _ in range(50):
        n, g = int(np_rng.integers(1, 9)), int(np_rng.integers(1, 5))
        sc = _scene(
            [grid_box(np_rng) for _ in range(n)],
            [grid_box(np_rng) for _ in range(g)],
            cats=[0] * g,
        )
        scores = quantized_scores(np_rng, n, g)
        o2m = assign_o2m(sc, scores, cfg)
        anchors = o2m.anchor_indices()
        assert len(anchors) == len(set(anchors))
        per_gt = {}
        for p in o2m.pairs:
            per_gt[p.gt_index] = per_gt.get(p.gt_index, 0) + 1
        assert all(v <= cfg.topk for v in per_gt.values())
        o2o = assign_o2o(sc, scores, cfg)
        assert len(o2o.anchor_indices()) == len(set(o2o.anchor_indices()))
        gt_ids = [p.gt_index for p in o2o.pairs]
        assert len(gt_ids) == len(set(gt_ids))


@pytest.mark.parametrize("target_mode", ["iou", "normalized"])
def test_assignment_matches_reference(np_rng, target_mode):
    cfg = AssignConfig(topk=3, target_mode=target_mode)
    for _ in range(120):
        n, g = int(np_rng.integers(0, 10)), int(np_rng.integers(0, 6))
        a_boxes = [grid_box(np_rng) for _ in range(n)]
        g_boxes = [grid_box(np_rng) for _ in range(g)]
        sc = _scene(a_boxes, g_boxes, cats=[0] * g)
        scores = quantized_scores(np_rng, n, g)
        at = [box_tuple(b) for b in a_boxes]
        gt = [box_tuple(b) for b in g_boxes]
        s_list = scores.tolist()
        got_m = _as_pairs(assign_o2m(sc, scores, cfg))
        ref_m = ref_o2m(at, gt, s_list, cfg.alpha, cfg.beta, cfg.topk, True, target_mode)
        assert set(got_m) == set(ref_m)
        for k in got_m:
            assert got_m[k] == pytest.approx(ref_m[k], abs=1e-12)
        got_o = _as_pairs(assign_o2o(sc, scores, cfg))
        ref_o = ref_o2o(at, gt, s_list, cfg.alpha, cfg.beta, cfg.topk, True, target_mode)
        assert set(got_o) == set(ref_o)
        for k in got_o:
            assert got_o[k] == pytest.approx(ref_o[k], abs=1e-12)


def test_iou_targets_equal_pair_iou():
    sc = _scene([BBox(0, 0, 4, 4)], [BBox(0, 0, 4, 2)])
    a = assign_o2m(sc, np.array([[0.5]]), AssignConfig())
    assert a.pairs[0].target == pytest.approx(a.pairs[0].iou, abs=1e-15)
    assert a.pairs[0].iou == pytest.approx(0.5, abs=1e-12)


def test_normalized_targets_peak_at_u_max():
    # Two candidates for one gt: the best-metric pair gets exactly u_max.
    boxes = [BBox(0, 0, 4, 4), BBox(0, 0, 4, 3)]
    sc = _scene(boxes, [BBox(0, 0, 4, 4)])
    scores = np.array([[0.9], [0.9]])
    a = assign_o2m(sc, scores, AssignConfig(topk=2, target_mode="normalized"))
    by_anchor = a.by_anchor()
    assert by_anchor[0].target == pytest.approx(1.0, abs=1e-12)
    assert 0.0 < by_anchor[1].target < 1.0


def test_targets_scatter():
    sc = _scene([BBox(0, 0, 4, 4), BBox(10, 10, 14, 14)], [BBox(0, 0, 4, 4)], cats=[2])
    a = assign_o2m(sc, np.array([[0.5], [0.5]]), AssignConfig())
    t = targets(a, [2], 4)
    assert t.shape == (2, 4)
    assert t[0, 2] == pytest.approx(1.0, abs=1e-12)
    assert np.count_nonzero(t) == 1
    with pytest.raises(ValueError, match="outside"):
        targets(a, [7], 4)
    with pytest.raises(ValueError, match="category ids"):
        targets(a, [1, 2], 4)
