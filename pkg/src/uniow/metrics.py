"""Open-world detection metrics.

Beyond per-category AP and the previous/current known mAP splits, the
open-world quantities are:

  U-Recall  fraction of unknown ground truth matched by detections
            labeled unknown
  A-OSE     count of known-category detections that match no known
            ground truth but land on unknown ground truth (open-set
            errors), over the whole detection list
  WI        wilderness impact: how much precision at a fixed recall
            level degrades once those open-set detections are counted
            as false positives

Known-category detections sitting on unknown ground truth are ignored
by the known AP curves (neither TP nor FP): the model found a real
object it cannot yet name, and only A-OSE and WI account for it.

Undefined quantities (no ground truth in a split, recall level never
reached) are reported as absent rather than zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import UNKNOWN_ID, Detection, GroundTruth, iou as box_iou
from .embedding import CategoryStatus
from .fileutil import atomic_write_text


@dataclass(frozen=True)
class EvalConfig:
    iou_thresh: float = 0.5
    wi_recall_level: float = 0.8

    def __post_init__(self) -> None:
        if not (0.0 < self.iou_thresh <= 1.0):
            raise ValueError(f"iou_thresh must lie in (0, 1]: {self.iou_thresh}")
        if not (0.0 < self.wi_recall_level <= 1.0):
            raise ValueError(f"wi_recall_level must lie in (0, 1]: {self.wi_recall_level}")


@dataclass
class EvalReport:
    per_category_ap: dict[int, float] = field(default_factory=dict)
    map_prev_known: float | None = None
    map_curr_known: float | None = None
    map_both: float | None = None
    u_recall: float | None = None
    wi: float | None = None
    a_ose: int = 0


def match(
    dets: list[Detection], gts: list[GroundTruth], iou_thresh: float
) -> tuple[list[int], list[bool]]:
    """Greedy same-category matching within one scene.

    Detections are processed in descending score order (stable, so the
    given order breaks exact ties); each takes the highest-IoU unmatched
    ground truth of its own category at or above the threshold, lowest
    index on IoU ties. Returns the matched ground truth index per
    detection (-1 when unmatched, in input order) and a matched flag per
    ground truth.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    det_gt = [-1] * len(dets)
    taken = [False] * len(gts)
    for i in order:
        d = dets[i]
        best_j = -1
        best_iou = 0.0
        for j, g in enumerate(gts):
            if taken[j] or g.category_id != d.category_id:
                continue
            v = box_iou(d.box, g.box)
            if v >= iou_thresh and v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            det_gt[i] = best_j
            taken[best_j] = True
    return det_gt, taken


def average_precision(tp_flags: list[bool], num_gt: int) -> float:
    """All-point interpolated AP from score-ordered TP/FP flags.

    Precision is replaced by its running maximum from the right (the
    envelope), and the curve is integrated over recall.
    """
    if num_gt <= 0:
        raise ValueError("average precision needs at least one ground truth")
    if not tp_flags:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p, is_tp in zip(recall, env, tp_flags):
        if is_tp:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


@dataclass
class _PooledDet:
    score: float
    tp: bool
    open_set: bool  # unmatched known det covering unknown ground truth


def owod_report(
    dets_by_scene: dict[str, list[Detection]],
    gts_by_scene: dict[str, list[GroundTruth]],
    labeling: dict[int, CategoryStatus],
    cfg: EvalConfig,
) -> EvalReport:
    """Evaluate detections against an open-world labeling.

    labeling maps every known category id to its lifecycle status;
    UNKNOWN_ID ground truth and detections are the unknown class. A
    detection or ground truth with an unlabeled category id is an error.
    """
    for sid in dets_by_scene:
        if sid not in gts_by_scene:
            raise ValueError(f"detections reference unannotated scene {sid!r}")
    for sid, gts in gts_by_scene.items():
        for g in gts:
            if g.category_id != UNKNOWN_ID and g.category_id not in labeling:
                raise ValueError(f"scene {sid!r}: ground truth id {g.category_id} unlabeled")
    scene_ids = sorted(gts_by_scene)

    pooled: dict[int, list[_PooledDet]] = {c: [] for c in labeling}
    gt_count = {c: 0 for c in labeling}
    unknown_gt_total = 0
    unknown_gt_matched = 0
    a_ose = 0

    for sid in scene_ids:
        gts = gts_by_scene[sid]
        dets = dets_by_scene.get(sid, [])
        for d in dets:
            if d.category_id != UNKNOWN_ID and d.category_id not in labeling:
                raise ValueError(f"scene {sid!r}: detection id {d.category_id} unlabeled")
        unk_gts = [g for g in gts if g.category_id == UNKNOWN_ID]
        unknown_gt_total += len(unk_gts)
        for g in gts:
            if g.category_id != UNKNOWN_ID:
                gt_count[g.category_id] += 1

        known_dets = [d for d in dets if d.category_id != UNKNOWN_ID]
        det_gt, _ = match(known_dets, gts, cfg.iou_thresh)
        for d, j in zip(known_dets, det_gt):
            matched = j >= 0
            open_set = False
            if not matched and unk_gts:
                best = max(box_iou(d.box, g.box) for g in unk_gts)
                open_set = best >= cfg.iou_thresh
            if open_set:
                a_ose += 1
            pooled[d.category_id].append(_PooledDet(d.score, matched, open_set))

        unk_dets = [d for d in dets if d.category_id == UNKNOWN_ID]
        _, taken = match(unk_dets, unk_gts, cfg.iou_thresh)
        unknown_gt_matched += sum(taken)

    report = EvalReport(a_ose=a_ose)

    role_aps: dict[CategoryStatus, list[float]] = {s: [] for s in CategoryStatus}
    for c in sorted(labeling):
        if gt_count[c] == 0:
            continue
        rows = sorted(pooled[c], key=lambda r: -r.score)
        flags = [r.tp for r in rows if not r.open_set]
        ap = average_precision(flags, gt_count[c])
        report.per_category_ap[c] = ap
        role_aps[labeling[c]].append(ap)

    prev = role_aps[CategoryStatus.PREVIOUSLY_KNOWN]
    curr = role_aps[CategoryStatus.CURRENT_KNOWN]
    if prev:
        report.map_prev_known = float(np.mean(prev))
    if curr:
        report.map_curr_known = float(np.mean(curr))
    if prev or curr:
        report.map_both = float(np.mean(prev + curr))

    if unknown_gt_total > 0:
        report.u_recall = unknown_gt_matched / unknown_gt_total

    report.wi = _wilderness_impact(pooled, sum(gt_count.values()), cfg)
    return report


def _wilderness_impact(
    pooled: dict[int, list[_PooledDet]], total_known_gt: int, cfg: EvalConfig
) -> float | None:
    """WI = P_known_only / P_wilderness - 1 at the configured recall.

    Both precisions pool every known category (micro-average). The
    cutoff is the score of the detection where the known-only curve
    first reaches the recall level (the whole list if it never does);
    the wilderness precision additionally counts open-set detections at
    or above that score as false positives, which algebraically reduces
    WI to open_set / (TP + FP) over the cutoff prefix.
    """
    if total_known_gt == 0:
        return None
    rows = sorted(
        (r for cat_rows in pooled.values() for r in cat_rows), key=lambda r: -r.score
    )
    plain = [r for r in rows if not r.open_set]
    if not plain:
        return None
    cutoff: float | None = None
    tp_cum = 0
    for r in plain:
        tp_cum += r.tp
        if tp_cum / total_known_gt >= cfg.wi_recall_level:
            cutoff = r.score
            break
    if cutoff is None:
        denom = len(plain)
        open_set = sum(1 for r in rows if r.open_set)
    else:
        denom = sum(1 for r in plain if r.score >= cutoff)
        open_set = sum(1 for r in rows if r.open_set and r.score >= cutoff)
    return open_set / denom


_SCALAR_KEYS = ("map_prev_known", "map_curr_known", "map_both", "u_recall", "wi")


def format_report(report: EvalReport) -> str:
    """Render as deterministic key: value lines; None prints as absent."""
    lines = []
    for k in _SCALAR_KEYS:
        v = getattr(report, k)
        lines.append(f"{k}: {'absent' if v is None else repr(v)}\n")
    lines.append(f"a_ose: {report.a_ose}\n")
    for c in sorted(report.per_category_ap):
        lines.append(f"ap[{c}]: {report.per_category_ap[c]!r}\n")
    return "".join(lines)


def write_report(report: EvalReport, path: str) -> None:
    atomic_write_text(path, format_report(report))
