"""NMS-free inference over precomputed region features.

Each anchor produces at most one detection: the argmax over known
category embeddings plus the unknown wildcard (the object wildcard is a
training-time teacher and never predicts). Because training used a
one-to-one assignment head, duplicate suppression is unnecessary; the
only post-processing is a score floor and the unknown-overlap filter.

Detection dump format: one tab-separated record per detection,
  scene_id  category_id|unknown  score  x1  y1  x2  y2
with floats written as their shortest exact repr.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import UNKNOWN_ID, BBox, Detection, Scene, iou
from .embedding import ScoreParams, Vocabulary, score_matrix
from .errors import FileFormatError
from .fileutil import atomic_write_text


@dataclass(frozen=True)
class InferConfig:
    score_floor: float = 0.05
    confident_score: float = 0.2
    tau: float = 0.99
    max_detections: int = 300

    def __post_init__(self) -> None:
        if not (0.0 <= self.score_floor <= 1.0 and 0.0 <= self.confident_score <= 1.0):
            raise ValueError("score thresholds must lie in [0, 1]")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError(f"tau must lie in (0, 1]: {self.tau}")
        if self.max_detections < 1:
            raise ValueError(f"max_detections must be positive: {self.max_detections}")


def predict(
    scene: Scene, vocab: Vocabulary, params: ScoreParams, cfg: InferConfig
) -> list[Detection]:
    """Score every anchor and keep per-anchor argmax detections.

    Column order is vocabulary entries then the unknown wildcard, so an
    exact score tie resolves to the lower category id and known beats
    unknown. Results are sorted by descending score (stable in anchor
    order) and truncated to max_detections. Scores below the floor are
    dropped for known and unknown alike.
    """
    if len(vocab) == 0:
        raise ValueError("cannot predict with an empty vocabulary")
    if not scene.anchors:
        return []
    cols = [e.embedding for e in vocab.entries]
    ids = list(range(len(vocab)))
    if vocab.wildcard_unk is not None:
        cols.append(vocab.wildcard_unk)
        ids.append(UNKNOWN_ID)
    s = score_matrix(scene.feature_matrix(), np.stack(cols), params)
    dets: list[Detection] = []
    for i, anchor in enumerate(scene.anchors):
        j = int(np.argmax(s[i]))
        sc = float(s[i, j])
        if sc >= cfg.score_floor:
            dets.append(Detection(anchor.box, ids[j], sc))
    dets.sort(key=lambda d: -d.score)
    return dets[: cfg.max_detections]


def filter_unknown(dets: list[Detection], cfg: InferConfig) -> list[Detection]:
    """Drop unknown detections that sit on a confident known detection.

    An unknown is removed when its IoU with any known detection scoring
    strictly above confident_score reaches tau. Known detections always
    pass through, so the filter is idempotent. Input order is kept.
    """
    confident = [
        d for d in dets if d.category_id != UNKNOWN_ID and d.score > cfg.confident_score
    ]
    out: list[Detection] = []
    for d in dets:
        if d.category_id == UNKNOWN_ID and any(
            iou(d.box, k.box) >= cfg.tau for k in confident
        ):
            continue
        out.append(d)
    return out


def write_detections(rows: list[tuple[str, Detection]], path: str) -> None:
    lines = []
    for scene_id, d in rows:
        cat = "unknown" if d.category_id == UNKNOWN_ID else str(d.category_id)
        b = d.box
        lines.append(
            f"{scene_id}\t{cat}\t{d.score!r}\t{b.x1!r}\t{b.y1!r}\t{b.x2!r}\t{b.y2!r}\n"
        )
    atomic_write_text(path, "".join(lines))


def read_detections(path: str) -> list[tuple[str, Detection]]:
    rows: list[tuple[str, Detection]] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise FileFormatError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            scene_id, cat_s, score_s, *box_s = parts
            try:
                cat = UNKNOWN_ID if cat_s == "unknown" else int(cat_s)
                score = float(score_s)
                box = BBox(*(float(v) for v in box_s))
                rows.append((scene_id, Detection(box, cat, score)))
            except ValueError as e:
                raise FileFormatError(f"{path}:{lineno}: {e}") from e
    return rows
