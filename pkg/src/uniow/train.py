"""Training routines: encoder calibration and embedding fine-tuning.

Four stages, all plain SGD over binary cross-entropy:

  calibrate         trains the text encoder's LoRA adapters so encoded
                    category names score their regions well
  tune_wildcard_obj trains one "object" embedding on every ground truth
                    box as a single class (the wildcard teacher)
  tune_known        fine-tunes current-task category embeddings directly
  tune_unknown      trains the unknown wildcard against pseudo-labels
                    picked by the frozen teacher, alongside tune_known

Classification targets come from the two assignment heads; boxes are
taken as given, so no loss touches box regression. Gradients on a unit
embedding are projected onto the sphere's tangent space before the step
and the embedding is re-normalized after. Batch gradients are summed
over scenes, not averaged.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import IO

import numpy as np

from .assign import AssignConfig, assign_o2m, assign_o2o, targets
from .core import UNKNOWN_ID, BBox, Scene, pairwise_iou
from .embedding import (
    ScoreParams,
    Vocabulary,
    CategoryStatus,
    assert_unit,
    normalize,
    score_matrix,
    unit_embedding,
)
from .textenc import ToyTextEncoder, encode, encode_grad
from .rng import Rng, mix64

_BCE_EPS = 1e-7
_WILDCARD_NAME = "object"

# Purpose tags for per-stage shuffle streams.
_TAG_CALIBRATE = 0xCA11
_TAG_WILDCARD = 0x0B7E
_TAG_EMBED = 0xE4BE


@dataclass(frozen=True)
class TrainConfig:
    lr_calibrate: float = 5e-4
    lr_wildcard_obj: float = 1e-4
    lr_embed: float = 1e-3
    weight_decay_embed: float = 0.0
    epochs_calibrate: int = 40
    epochs_wildcard_obj: int = 3
    epochs_embed: int = 3
    batch_size: int = 16
    sigma1: float = 0.5
    sigma2: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        for k in ("lr_calibrate", "lr_wildcard_obj", "lr_embed"):
            if getattr(self, k) <= 0.0:
                raise ValueError(f"{k} must be positive")
        for k in ("epochs_calibrate", "epochs_wildcard_obj", "epochs_embed", "batch_size"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be at least 1")
        if not (0.0 <= self.sigma1 <= 1.0 and 0.0 <= self.sigma2 <= 1.0):
            raise ValueError("sigma thresholds must lie in [0, 1]")
        if self.weight_decay_embed < 0.0:
            raise ValueError("weight_decay_embed must be non-negative")


@dataclass(frozen=True)
class PseudoLabel:
    """Unlabeled-region training target proposed by the teacher."""

    anchor_index: int
    target: float


class TrainLogger:
    """Tab-separated per-step log: step, stage, L_k, L_unk, n_pseudo."""

    HEADER = "step\tstage\tl_k\tl_unk\tn_pseudo\n"

    def __init__(self, stream: IO[str]) -> None:
        self._stream = stream
        self._stream.write(self.HEADER)

    def log(self, step: int, stage: str, l_k: float, l_unk: float, n_pseudo: int) -> None:
        self._stream.write(f"{step}\t{stage}\t{l_k!r}\t{l_unk!r}\t{n_pseudo}\n")


def bce(s: float, o: float) -> float:
    """Binary cross-entropy with the prediction clamped to [eps, 1-eps]."""
    if not (0.0 <= o <= 1.0):
        raise ValueError(f"target outside [0, 1]: {o}")
    s = min(max(float(s), _BCE_EPS), 1.0 - _BCE_EPS)
    return float(-(o * np.log(s) + (1.0 - o) * np.log(1.0 - s)))


def _bce_sum(s: np.ndarray, o: np.ndarray) -> float:
    sc = np.clip(s, _BCE_EPS, 1.0 - _BCE_EPS)
    return float(-np.sum(o * np.log(sc) + (1.0 - o) * np.log(1.0 - sc)))


def grad_embedding(
    feature: np.ndarray, emb: np.ndarray, target: float, params: ScoreParams
) -> np.ndarray:
    """Gradient of bce(score(cos(f, e)), target) w.r.t. the unit embedding.

    Because score is logistic and the loss is binary cross-entropy, the
    chain through both collapses to (s - target) at the logit. The
    euclidean gradient is then tangent-projected so a gradient step
    followed by re-normalization moves along the sphere.
    """
    f = normalize(np.asarray(feature, dtype=np.float64))
    e = assert_unit(emb)
    s = score_matrix(f[None, :], e[None, :], params)[0, 0]
    g = (s - target) * params.scale * f
    return g - float(np.dot(g, e)) * e


def _project_step(e: np.ndarray, g: np.ndarray, lr: float, wd: float) -> np.ndarray:
    """One tangent-projected SGD step on the unit sphere."""
    g = g + wd * e
    g = g - float(np.dot(g, e)) * e
    return normalize(e - lr * g)


def _normalized_features(scene: Scene) -> np.ndarray:
    f = scene.feature_matrix()
    if f.shape[0] == 0:
        return f
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def _head_targets(
    scene: Scene,
    scores: np.ndarray,
    gt_cats: list[int],
    num_cats: int,
    assign_cfg: AssignConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Target matrices from both assignment heads for one scene."""
    n = len(scene.anchors)
    if not gt_cats:
        z = np.zeros((n, num_cats))
        return z, z.copy()
    per_gt = scores[:, gt_cats]
    t_m = targets(assign_o2m(scene, per_gt, assign_cfg), gt_cats, num_cats)
    t_o = targets(assign_o2o(scene, per_gt, assign_cfg), gt_cats, num_cats)
    return t_m, t_o


def _batches(order: list[int], size: int) -> list[list[int]]:
    return [order[i : i + size] for i in range(0, len(order), size)]


def calibrate(
    scenes: list[Scene],
    names: list[str],
    enc: ToyTextEncoder,
    cfg: TrainConfig,
    assign_cfg: AssignConfig | None = None,
    score_params: ScoreParams | None = None,
    logger: TrainLogger | None = None,
) -> ToyTextEncoder:
    """Train the encoder's adapters on labeled scenes; returns a copy.

    Ground-truth category ids index into names. Embeddings are
    re-encoded every step so the gradient always reflects the current
    adapters; the classification loss backpropagates through the
    encoder via encode_grad, never into the frozen base weights.
    """
    assign_cfg = assign_cfg or AssignConfig()
    score_params = score_params or ScoreParams()
    enc = copy.deepcopy(enc)
    num_cats = len(names)
    if num_cats == 0:
        raise ValueError("calibrate needs at least one category name")
    for sc in scenes:
        for gt in sc.ground_truth:
            if not (0 <= gt.category_id < num_cats):
                raise ValueError(
                    f"scene {sc.id!r}: ground truth id {gt.category_id} outside vocabulary"
                )
    rng = Rng(mix64(cfg.seed, _TAG_CALIBRATE))
    order = list(range(len(scenes)))
    step = 0
    for _ in range(cfg.epochs_calibrate):
        rng.shuffle(order)
        for batch in _batches(order, cfg.batch_size):
            embs = np.stack([encode(nm, enc) for nm in names])
            up = np.zeros((num_cats, enc.dim))
            loss = 0.0
            for si in batch:
                scene = scenes[si]
                fhat = _normalized_features(scene)
                if fhat.shape[0] == 0:
                    continue
                s = score_matrix(fhat, embs, score_params)
                gt_cats = [g.category_id for g in scene.ground_truth]
                t_m, t_o = _head_targets(scene, s, gt_cats, num_cats, assign_cfg)
                combined = (s - t_m) + (s - t_o)
                up += score_params.scale * (combined.T @ fhat)
                loss += _bce_sum(s, t_m) + _bce_sum(s, t_o)
            for c, nm in enumerate(names):
                if not np.any(up[c]):
                    continue
                for lname, (ga, gb) in encode_grad(nm, enc, up[c]).items():
                    layer = enc.layers[lname]
                    layer.a -= cfg.lr_calibrate * ga
                    layer.b -= cfg.lr_calibrate * gb
            if logger:
                logger.log(step, "calibrate", loss, 0.0, 0)
            step += 1
    return enc


def calibration_step_losses(
    scenes: list[Scene],
    names: list[str],
    enc: ToyTextEncoder,
    cfg: TrainConfig,
    steps: int,
    assign_cfg: AssignConfig | None = None,
    score_params: ScoreParams | None = None,
) -> list[float]:
    """Loss trajectory of repeated steps on one fixed batch of scenes.

    Exposed for verifying descent behavior without the epoch loop's
    shuffling in the way.
    """
    assign_cfg = assign_cfg or AssignConfig()
    score_params = score_params or ScoreParams()
    enc = copy.deepcopy(enc)
    num_cats = len(names)
    losses: list[float] = []
    for _ in range(steps):
        embs = np.stack([encode(nm, enc) for nm in names])
        up = np.zeros((num_cats, enc.dim))
        loss = 0.0
        for scene in scenes:
            fhat = _normalized_features(scene)
            if fhat.shape[0] == 0:
                continue
            s = score_matrix(fhat, embs, score_params)
            gt_cats = [g.category_id for g in scene.ground_truth]
            t_m, t_o = _head_targets(scene, s, gt_cats, num_cats, assign_cfg)
            combined = (s - t_m) + (s - t_o)
            up += score_params.scale * (combined.T @ fhat)
            loss += _bce_sum(s, t_m) + _bce_sum(s, t_o)
        losses.append(loss)
        for c, nm in enumerate(names):
            if not np.any(up[c]):
                continue
            for lname, (ga, gb) in encode_grad(nm, enc, up[c]).items():
                layer = enc.layers[lname]
                layer.a -= cfg.lr_calibrate * ga
                layer.b -= cfg.lr_calibrate * gb
    return losses


def tune_wildcard_obj(
    scenes: list[Scene],
    enc: ToyTextEncoder,
    cfg: TrainConfig,
    assign_cfg: AssignConfig | None = None,
    score_params: ScoreParams | None = None,
    logger: TrainLogger | None = None,
) -> np.ndarray:
    """Train the "object" wildcard on all ground truth as one class.

    Starts from encode("object") and updates only that single embedding;
    the encoder itself stays frozen here. Scenes without ground truth
    still contribute: every anchor is a negative for the object class.
    """
    assign_cfg = assign_cfg or AssignConfig()
    score_params = score_params or ScoreParams()
    t_obj = normalize(encode(_WILDCARD_NAME, enc))
    rng = Rng(mix64(cfg.seed, _TAG_WILDCARD))
    order = list(range(len(scenes)))
    step = 0
    for _ in range(cfg.epochs_wildcard_obj):
        rng.shuffle(order)
        for batch in _batches(order, cfg.batch_size):
            grad = np.zeros_like(t_obj)
            loss = 0.0
            for si in batch:
                scene = scenes[si]
                fhat = _normalized_features(scene)
                if fhat.shape[0] == 0:
                    continue
                s = score_matrix(fhat, t_obj[None, :], score_params)
                gt_cats = [0] * len(scene.ground_truth)
                t_m, t_o = _head_targets(scene, s, gt_cats, 1, assign_cfg)
                combined = (s - t_m) + (s - t_o)
                grad += score_params.scale * (fhat.T @ combined[:, 0])
                loss += _bce_sum(s, t_m) + _bce_sum(s, t_o)
            t_obj = _project_step(t_obj, grad, cfg.lr_wildcard_obj, 0.0)
            if logger:
                logger.log(step, "wildcard_obj", loss, 0.0, 0)
            step += 1
    return unit_embedding(t_obj)


def select_pseudo(
    s_obj: np.ndarray,
    obj_dominates: np.ndarray,
    anchor_boxes: list[BBox],
    known_gt_boxes: list[BBox],
    cfg: TrainConfig,
) -> list[PseudoLabel]:
    """Pick anchors the teacher believes are objects of no known class.

    A candidate anchor must out-score every known category (the
    obj_dominates flag), overlap known ground truth strictly below
    sigma1, and carry an object score strictly above sigma2. Its target
    is the teacher's own score.
    """
    s_obj = np.asarray(s_obj, dtype=np.float64)
    dom = np.asarray(obj_dominates, dtype=bool)
    if s_obj.shape != dom.shape or s_obj.ndim != 1 or len(anchor_boxes) != s_obj.shape[0]:
        raise ValueError("per-anchor inputs disagree on length")
    if known_gt_boxes:
        max_iou = pairwise_iou(anchor_boxes, known_gt_boxes).max(axis=1)
    else:
        max_iou = np.zeros(len(anchor_boxes))
    out: list[PseudoLabel] = []
    for i in range(len(anchor_boxes)):
        if dom[i] and max_iou[i] < cfg.sigma1 and s_obj[i] > cfg.sigma2:
            out.append(PseudoLabel(i, float(s_obj[i])))
    return out


def _check_current_known_labels(scenes: list[Scene], vocab: Vocabulary) -> list[int]:
    ck = vocab.ids_with_status(CategoryStatus.CURRENT_KNOWN)
    ck_set = set(ck)
    for sc in scenes:
        for gt in sc.ground_truth:
            if gt.category_id == UNKNOWN_ID or gt.category_id not in ck_set:
                raise ValueError(
                    f"scene {sc.id!r}: ground truth id {gt.category_id} is not a "
                    "current-known category"
                )
    return ck


def _tune_embeddings(
    scenes: list[Scene],
    vocab: Vocabulary,
    cfg: TrainConfig,
    assign_cfg: AssignConfig,
    score_params: ScoreParams,
    with_unknown: bool,
    enc: ToyTextEncoder | None,
    logger: TrainLogger | None,
) -> Vocabulary:
    """Shared loop behind tune_known and tune_unknown."""
    ck_ids = _check_current_known_labels(scenes, vocab)
    if not vocab.entries:
        raise ValueError("vocabulary has no known categories")
    t_obj = vocab.wildcard_obj
    if with_unknown:
        if t_obj is None:
            raise ValueError("object wildcard teacher absent; run tune_wildcard_obj first")
        if enc is not None:
            t_unk = normalize(encode(_WILDCARD_NAME, enc))
        elif vocab.wildcard_unk is not None:
            t_unk = vocab.wildcard_unk.copy()
        else:
            raise ValueError("unknown wildcard not initialized and no encoder given")
    else:
        t_unk = None

    work = {c: vocab.entries[c].embedding.copy() for c in ck_ids}
    col_of = {c: k for k, c in enumerate(ck_ids)}
    frozen = [e.embedding for e in vocab.entries if e.id not in work]

    rng = Rng(mix64(cfg.seed, _TAG_EMBED, 1 if with_unknown else 0))
    order = list(range(len(scenes)))
    step = 0
    stage = "unknown" if with_unknown else "known"
    for _ in range(cfg.epochs_embed):
        rng.shuffle(order)
        for batch in _batches(order, cfg.batch_size):
            g_ck = {c: np.zeros(vocab.dim) for c in ck_ids}
            g_unk = np.zeros(vocab.dim)
            l_k = 0.0
            l_unk = 0.0
            n_pseudo = 0
            for si in batch:
                scene = scenes[si]
                fhat = _normalized_features(scene)
                if fhat.shape[0] == 0:
                    continue
                ck_emb = np.stack([work[c] for c in ck_ids])
                s_ck = score_matrix(fhat, ck_emb, score_params)
                gt_cols = [col_of[g.category_id] for g in scene.ground_truth]
                t_m, t_o = _head_targets(scene, s_ck, gt_cols, len(ck_ids), assign_cfg)
                combined = (s_ck - t_m) + (s_ck - t_o)
                for c in ck_ids:
                    g_ck[c] += score_params.scale * (fhat.T @ combined[:, col_of[c]])
                l_k += _bce_sum(s_ck, t_m) + _bce_sum(s_ck, t_o)

                if with_unknown:
                    all_known = np.stack(frozen + [work[c] for c in ck_ids])
                    s_known = score_matrix(fhat, all_known, score_params)
                    s_obj = score_matrix(fhat, t_obj[None, :], score_params)[:, 0]
                    s_unk = score_matrix(fhat, t_unk[None, :], score_params)[:, 0]
                    dom = s_obj > s_known.max(axis=1)
                    pseudo = select_pseudo(
                        s_obj, dom, scene.anchor_boxes(), scene.gt_boxes(), cfg
                    )
                    n_pseudo += len(pseudo)
                    for p in pseudo:
                        l_unk += bce(s_unk[p.anchor_index], p.target)
                        g_unk += (
                            (s_unk[p.anchor_index] - p.target)
                            * score_params.scale
                            * fhat[p.anchor_index]
                        )
            for c in ck_ids:
                work[c] = _project_step(
                    work[c], g_ck[c], cfg.lr_embed, cfg.weight_decay_embed
                )
            if with_unknown and np.any(g_unk):
                t_unk = _project_step(t_unk, g_unk, cfg.lr_embed, cfg.weight_decay_embed)
            if logger:
                logger.log(step, stage, l_k, l_unk, n_pseudo)
            step += 1

    out = vocab
    for c in ck_ids:
        out = out.with_entry_embedding(c, unit_embedding(work[c]))
    if with_unknown:
        out = Vocabulary(out.entries, out.wildcard_obj, unit_embedding(t_unk))
    return out


def tune_known(
    scenes: list[Scene],
    vocab: Vocabulary,
    cfg: TrainConfig,
    assign_cfg: AssignConfig | None = None,
    score_params: ScoreParams | None = None,
    logger: TrainLogger | None = None,
) -> Vocabulary:
    """Fine-tune current-known category embeddings on labeled scenes.

    Previously-known embeddings and both wildcards are never touched.
    Ground truth must be labeled with current-known categories only.
    """
    return _tune_embeddings(
        scenes,
        vocab,
        cfg,
        assign_cfg or AssignConfig(),
        score_params or ScoreParams(),
        with_unknown=False,
        enc=None,
        logger=logger,
    )


def tune_unknown(
    scenes: list[Scene],
    vocab: Vocabulary,
    cfg: TrainConfig,
    assign_cfg: AssignConfig | None = None,
    score_params: ScoreParams | None = None,
    enc: ToyTextEncoder | None = None,
    logger: TrainLogger | None = None,
) -> Vocabulary:
    """Joint tuning: known loss plus pseudo-labeled unknown wildcard loss.

    The frozen object wildcard proposes anchors that look like objects
    but match no known category; the unknown wildcard regresses toward
    the teacher's scores there. The unknown wildcard starts fresh from
    encode("object") (re-encoded when an encoder is passed, otherwise
    taken from the vocabulary's unknown slot, which initial_state and
    expand keep primed with exactly that value).
    """
    return _tune_embeddings(
        scenes,
        vocab,
        cfg,
        assign_cfg or AssignConfig(),
        score_params or ScoreParams(),
        with_unknown=True,
        enc=enc,
        logger=logger,
    )
