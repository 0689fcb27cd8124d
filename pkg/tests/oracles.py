"""Independent reference implementations used only by tests.

Everything here is deliberately written from the definitions in plain
Python loops, sharing no code with the package, so that agreement is
evidence rather than tautology. Tie rules mirror the documented
contracts: higher metric, then lower ground truth index, then lower
anchor index; matching prefers higher IoU, then lower index.
"""

from __future__ import annotations

import math


# --- geometry ---------------------------------------------------------------

def iou_ref(a: tuple, b: tuple) -> float:
    """IoU from corner tuples (x1, y1, x2, y2), by explicit rectangles."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    w = min(ax2, bx2) - max(ax1, bx1)
    h = min(ay2, by2) - max(ay1, by1)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    return inter / (area_a + area_b - inter)


def center_in(box: tuple, container: tuple) -> bool:
    cx = (box[0] + box[2]) / 2
    cy = (box[1] + box[3]) / 2
    return container[0] <= cx <= container[2] and container[1] <= cy <= container[3]


# --- finite differences -----------------------------------------------------

def fd_grad(fn, arr, h: float = 1e-4):
    """Central-difference gradient of scalar fn w.r.t. a numpy array."""
    import numpy as np

    out = np.zeros_like(arr, dtype=float)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        old = arr[ix]
        arr[ix] = old + h
        lp = fn()
        arr[ix] = old - h
        lm = fn()
        arr[ix] = old
        out[ix] = (lp - lm) / (2 * h)
    return out


# --- assignment -------------------------------------------------------------

def _halfpow(x, p):
    """Scalar x**p by sqrt plus square-and-multiply, matching how the
    library evaluates half-integer exponents bit for bit."""
    two_p = p * 2.0
    if two_p != int(two_p) or not (0 < int(two_p) <= 64):
        return x ** p
    n = int(two_p)
    base = math.sqrt(x) if n % 2 else x
    if n % 2 == 0:
        n //= 2
    out = base
    for bit in bin(n)[3:]:
        out = out * out
        if bit == "1":
            out = out * base
    return out


def _candidate_lists(anchor_boxes, gt_boxes, scores, alpha, beta, topk, center_prior):
    per_gt = []
    for j, gb in enumerate(gt_boxes):
        cand = []
        for i, ab in enumerate(anchor_boxes):
            u = iou_ref(ab, gb)
            if u <= 0.0:
                continue
            m = _halfpow(scores[i][j], alpha) * _halfpow(u, beta)
            if m <= 0.0:
                continue
            if center_prior and not center_in(ab, gb):
                continue
            cand.append((i, m, u))
        cand.sort(key=lambda t: (-t[1], t[0]))
        per_gt.append(cand)
    return per_gt


def _attach_targets(raw, target_mode):
    """raw: list of (anchor, gt, m, u). Returns {(anchor, gt): target}."""
    if target_mode == "iou":
        return {(i, j): u for i, j, m, u in raw}
    out = {}
    gts = {j for _, j, _, _ in raw}
    for g in gts:
        group = [(i, j, m, u) for i, j, m, u in raw if j == g]
        m_max = max(m for _, _, m, _ in group)
        u_max = max(u for _, _, _, u in group)
        for i, j, m, u in group:
            out[(i, j)] = m / m_max * u_max
    return out


def ref_o2m(anchor_boxes, gt_boxes, scores, alpha, beta, topk, center_prior, target_mode):
    """Reference one-to-many assignment: {(anchor, gt): target}."""
    per_gt = _candidate_lists(anchor_boxes, gt_boxes, scores, alpha, beta, topk, center_prior)
    claims = {}
    for j, cand in enumerate(per_gt):
        for i, m, u in cand[:topk]:
            if i not in claims:
                claims[i] = (m, j, u)
            else:
                pm, pj, _ = claims[i]
                if m > pm or (m == pm and j < pj):
                    claims[i] = (m, j, u)
    raw = [(i, j, m, u) for i, (m, j, u) in claims.items()]
    return _attach_targets(raw, target_mode)


def ref_o2o(anchor_boxes, gt_boxes, scores, alpha, beta, topk, center_prior, target_mode):
    """Reference one-to-one assignment: {(anchor, gt): target}."""
    per_gt = _candidate_lists(anchor_boxes, gt_boxes, scores, alpha, beta, topk, center_prior)
    order = sorted(
        (j for j in range(len(gt_boxes)) if per_gt[j]),
        key=lambda j: (-per_gt[j][0][1], j),
    )
    claimed = set()
    raw = []
    for j in order:
        for i, m, u in per_gt[j]:
            if i not in claimed:
                claimed.add(i)
                raw.append((i, j, m, u))
                break
    return _attach_targets(raw, target_mode)


# --- metrics ----------------------------------------------------------------

def ref_match(dets, gts, thresh):
    """dets: [(score, box, cat)], gts: [(box, cat)]. Greedy same-category.

    Returns (matched flag per det in input order, matched flag per gt).
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][0])
    det_matched = [False] * len(dets)
    gt_taken = [False] * len(gts)
    for i in order:
        _, dbox, dcat = dets[i]
        best_j, best_v = -1, 0.0
        for j, (gbox, gcat) in enumerate(gts):
            if gt_taken[j] or gcat != dcat:
                continue
            v = iou_ref(dbox, gbox)
            if v >= thresh and v > best_v:
                best_j, best_v = j, v
        if best_j >= 0:
            det_matched[i] = True
            gt_taken[best_j] = True
    return det_matched, gt_taken


def ref_ap(flags, num_gt):
    """All-point interpolated AP from ordered TP flags, by direct scan."""
    if not flags:
        return 0.0
    n = len(flags)
    prec = []
    rec = []
    tp = 0
    for k, f in enumerate(flags, 1):
        tp += 1 if f else 0
        prec.append(tp / k)
        rec.append(tp / num_gt)
    ap = 0.0
    prev_r = 0.0
    for k in range(n):
        if not flags[k]:
            continue
        envelope = max(prec[k:])
        ap += (rec[k] - prev_r) * envelope
        prev_r = rec[k]
    return ap


def ref_owod(dets_by_scene, gts_by_scene, roles, thresh, level):
    """Full open-world evaluation from scratch.

    dets_by_scene: {scene: [(score, box, cat)]} with cat -1 for unknown.
    gts_by_scene: {scene: [(box, cat)]} likewise.
    roles: {cat_id: "pk" | "ck"}.
    Returns a dict with ap (per category), map_pk, map_ck, map_both,
    u_recall, a_ose, wi (None where undefined).
    """
    UNK = -1
    scene_ids = sorted(gts_by_scene)
    pooled = {c: [] for c in roles}  # (score, tp, open_set)
    gt_count = {c: 0 for c in roles}
    unk_total = 0
    unk_matched = 0
    a_ose = 0

    for sid in scene_ids:
        gts = gts_by_scene[sid]
        dets = dets_by_scene.get(sid, [])
        unk_gts = [g for g in gts if g[1] == UNK]
        unk_total += len(unk_gts)
        for _, c in gts:
            if c != UNK:
                gt_count[c] += 1

        known = [d for d in dets if d[2] != UNK]
        matched, _ = ref_match(known, gts, thresh)
        for (score, box, cat), ok in zip(known, matched):
            open_set = False
            if not ok:
                for gbox, _ in unk_gts:
                    if iou_ref(box, gbox) >= thresh:
                        open_set = True
                        break
            if open_set:
                a_ose += 1
            pooled[cat].append((score, ok, open_set))

        unk_dets = [d for d in dets if d[2] == UNK]
        _, taken = ref_match(unk_dets, unk_gts, thresh)
        unk_matched += sum(taken)

    ap = {}
    for c in sorted(roles):
        if gt_count[c] == 0:
            continue
        rows = sorted(pooled[c], key=lambda r: -r[0])
        flags = [tp for _, tp, os_flag in rows if not os_flag]
        ap[c] = ref_ap(flags, gt_count[c])

    pk = [ap[c] for c in ap if roles[c] == "pk"]
    ck = [ap[c] for c in ap if roles[c] == "ck"]
    result = {
        "ap": ap,
        "map_pk": sum(pk) / len(pk) if pk else None,
        "map_ck": sum(ck) / len(ck) if ck else None,
        "map_both": (sum(pk) + sum(ck)) / (len(pk) + len(ck)) if pk or ck else None,
        "u_recall": unk_matched / unk_total if unk_total else None,
        "a_ose": a_ose,
    }

    total_gt = sum(gt_count.values())
    all_rows = sorted(
        (r for rows in pooled.values() for r in rows), key=lambda r: -r[0]
    )
    plain = [r for r in all_rows if not r[2]]
    if total_gt == 0 or not plain:
        result["wi"] = None
        return result
    cutoff = None
    tp_cum = 0
    for score, tp, _ in plain:
        tp_cum += 1 if tp else 0
        if tp_cum / total_gt >= level:
            cutoff = score
            break
    if cutoff is None:
        kept_plain = plain
        kept_os = [r for r in all_rows if r[2]]
    else:
        kept_plain = [r for r in plain if r[0] >= cutoff]
        kept_os = [r for r in all_rows if r[2] and r[0] >= cutoff]
    tp_k = sum(1 for _, tp, _ in kept_plain if tp)
    fp_k = len(kept_plain) - tp_k
    result["wi"] = len(kept_os) / (tp_k + fp_k)
    # Cross-check against the ratio definition when it is well posed.
    if tp_k > 0:
        p_known = tp_k / (tp_k + fp_k)
        p_wild = tp_k / (tp_k + fp_k + len(kept_os))
        assert math.isclose(result["wi"], p_known / p_wild - 1.0, rel_tol=1e-12)
    return result
