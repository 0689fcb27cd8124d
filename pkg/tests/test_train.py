"""Loss plumbing, embedding gradients, and the four training stages."""

import io
import math

import numpy as np
import pytest

from uniow import (
    UNKNOWN_ID,
    Anchor,
    BBox,
    CategoryEntry,
    CategoryStatus,
    GroundTruth,
    PseudoLabel,
    Scene,
    ScoreParams,
    ToyTextEncoder,
    TrainConfig,
    TrainLogger,
    Vocabulary,
    bce,
    calibration_step_losses,
    encode,
    grad_embedding,
    normalize,
    select_pseudo,
    tune_known,
    tune_unknown,
    tune_wildcard_obj,
    unit_embedding,
)

from oracles import fd_grad


def _unit(v):
    return unit_embedding(np.asarray(v, dtype=np.float64))


def test_bce_worked_examples():
    assert bce(0.5, 1.0) == pytest.approx(math.log(2.0), abs=1e-15)
    assert bce(0.5, 0.0) == pytest.approx(math.log(2.0), abs=1e-15)
    # Perfect prediction costs only the clamp.
    assert 0.0 < bce(1.0, 1.0) < 2e-7
    assert 0.0 < bce(0.0, 0.0) < 2e-7
    with pytest.raises(ValueError, match="target"):
        bce(0.5, 1.5)


def test_grad_embedding_collapses_to_score_minus_target():
    rng = np.random.default_rng(7)
    p = ScoreParams()
    f = rng.normal(size=6)
    e = normalize(rng.normal(size=6))
    fhat = normalize(f)
    s = 1.0 / (1.0 + math.exp(-(p.scale * float(fhat @ e) + p.bias)))
    for o in (0.0, 0.37, 1.0):
        euclid = (s - o) * p.scale * fhat
        want = euclid - float(euclid @ e) * e
        got = grad_embedding(f, e, o, p)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)


def test_grad_embedding_matches_finite_differences():
    rng = np.random.default_rng(11)
    p = ScoreParams()
    for _ in range(20):
        f = normalize(rng.normal(size=5))
        e = normalize(rng.normal(size=5))
        o = float(rng.uniform(0.05, 0.95))

        def loss():
            en = e / np.linalg.norm(e)
            s = 1.0 / (1.0 + np.exp(-(p.scale * float(f @ en) + p.bias)))
            return bce(s, o)

        want = fd_grad(loss, e)
        got = grad_embedding(f, e, o, p)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-8)
        # Tangent: no radial component survives the projection.
        assert abs(float(got @ e)) < 1e-12


def test_select_pseudo_worked_example():
    cfg = TrainConfig()
    anchors = [BBox(0, 0, 4, 4), BBox(20, 20, 24, 24)]
    known = [BBox(0, 0, 4, 6)]  # iou with anchor 0 is 16/24 = 0.666..
    got = select_pseudo(
        np.array([0.9, 0.02]), np.array([True, True]), anchors, known, cfg
    )
    assert got == [PseudoLabel(1, 0.02)]


def test_select_pseudo_strict_boundaries():
    cfg = TrainConfig(sigma1=0.5, sigma2=0.01)
    # iou(anchor, gt) = 8/16 = 0.5 exactly: not strictly below sigma1.
    at_sigma1 = select_pseudo(
        np.array([0.9]), np.array([True]), [BBox(0, 0, 4, 2)], [BBox(0, 0, 4, 4)], cfg
    )
    assert at_sigma1 == []
    # Object score exactly sigma2: not strictly above.
    at_sigma2 = select_pseudo(
        np.array([0.01]), np.array([True]), [BBox(0, 0, 4, 2)], [], cfg
    )
    assert at_sigma2 == []
    just_above = select_pseudo(
        np.array([0.0100001]), np.array([True]), [BBox(0, 0, 4, 2)], [], cfg
    )
    assert len(just_above) == 1
    dominated = select_pseudo(
        np.array([0.9]), np.array([False]), [BBox(0, 0, 4, 2)], [], cfg
    )
    assert dominated == []
    with pytest.raises(ValueError, match="length"):
        select_pseudo(np.array([0.9, 0.1]), np.array([True]), [BBox(0, 0, 1, 1)], [], cfg)


def test_train_logger_format():
    buf = io.StringIO()
    log = TrainLogger(buf)
    log.log(0, "calibrate", 1.25, 0.0, 0)
    log.log(1, "unknown", 0.5, 0.125, 3)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step\tstage\tl_k\tl_unk\tn_pseudo"
    assert lines[1] == "0\tcalibrate\t1.25\t0.0\t0"
    assert lines[2] == "1\tunknown\t0.5\t0.125\t3"


def _labeled_scene(sid, cat_id, axis, dim=6):
    """One anchor sitting on its ground truth plus one background anchor."""
    f = np.zeros(dim)
    f[axis] = 1.0
    bg = np.zeros(dim)
    bg[dim - 1] = 1.0
    anchors = [Anchor(f, BBox(10, 10, 20, 20)), Anchor(bg, BBox(40, 40, 50, 50))]
    gts = [GroundTruth(BBox(10, 10, 20, 20), cat_id)]
    return Scene(sid, anchors, gts)


def test_calibration_losses_decrease_on_fixed_batch():
    enc = ToyTextEncoder(dim=6, rank=2, seed=3)
    scenes = [_labeled_scene("a", 0, 0), _labeled_scene("b", 1, 1)]
    losses = calibration_step_losses(scenes, ["alpha", "bravo"], enc, TrainConfig(), 10)
    assert len(losses) == 10
    assert all(y < x for x, y in zip(losses, losses[1:]))


def test_calibrate_rejects_out_of_vocab_labels():
    from uniow import calibrate

    enc = ToyTextEncoder(dim=6, rank=2, seed=3)
    with pytest.raises(ValueError, match="outside vocabulary"):
        calibrate([_labeled_scene("a", 2, 0)], ["alpha", "bravo"], enc, TrainConfig())
    with pytest.raises(ValueError, match="at least one"):
        calibrate([], [], enc, TrainConfig())


def test_tune_wildcard_obj_no_scenes_is_identity():
    enc = ToyTextEncoder(dim=6, rank=2, seed=1)
    got = tune_wildcard_obj([], enc, TrainConfig())
    want = unit_embedding(normalize(encode("object", enc)))
    assert np.array_equal(got, want)


def test_tune_wildcard_obj_learns_from_unlabeled_anchors():
    enc = ToyTextEncoder(dim=6, rank=2, seed=1)
    # Anchors but no ground truth: every anchor is a negative, so the
    # embedding must move (scores get pushed down).
    f = normalize(np.ones(6))
    sc = Scene("neg", [Anchor(f, BBox(0, 0, 5, 5))], [])
    got = tune_wildcard_obj([sc], enc, TrainConfig())
    want = unit_embedding(normalize(encode("object", enc)))
    assert not np.array_equal(got, want)
    assert got.dtype == np.float64
    assert abs(np.linalg.norm(got) - 1.0) < 1e-6


def _two_entry_vocab(dim=6, with_wildcards=True):
    e0 = _unit(np.eye(dim)[0])
    e1 = _unit(np.eye(dim)[1])
    obj = _unit(np.eye(dim)[2]) if with_wildcards else None
    unk = _unit(np.eye(dim)[3]) if with_wildcards else None
    return Vocabulary(
        [
            CategoryEntry(0, "alpha", e0, CategoryStatus.PREVIOUSLY_KNOWN),
            CategoryEntry(1, "bravo", e1, CategoryStatus.CURRENT_KNOWN),
        ],
        wildcard_obj=obj,
        wildcard_unk=unk,
    )


def test_tune_known_moves_current_and_freezes_previous():
    vocab = _two_entry_vocab()
    scenes = [_labeled_scene(f"s{i}", 1, 1) for i in range(3)]
    out = tune_known(scenes, vocab, TrainConfig(epochs_embed=2))
    assert np.array_equal(out.entries[0].embedding, vocab.entries[0].embedding)
    assert not np.array_equal(out.entries[1].embedding, vocab.entries[1].embedding)
    assert np.array_equal(out.wildcard_obj, vocab.wildcard_obj)
    assert np.array_equal(out.wildcard_unk, vocab.wildcard_unk)
    # Input vocabulary is left untouched.
    assert np.array_equal(vocab.entries[1].embedding, _unit(np.eye(6)[1]))


def test_tune_known_rejects_foreign_labels():
    vocab = _two_entry_vocab()
    with pytest.raises(ValueError, match="current-known"):
        tune_known([_labeled_scene("s", 0, 0)], vocab, TrainConfig())
    with pytest.raises(ValueError, match="current-known"):
        tune_known([_labeled_scene("s", UNKNOWN_ID, 0)], vocab, TrainConfig())


def _pseudo_scene(sid, dim=6):
    """A labeled anchor on its ground truth plus an objecty stray anchor.

    The stray matches the object wildcard direction, overlaps no ground
    truth, and out-scores the known categories, so it qualifies as a
    pseudo-label.
    """
    f_known = np.eye(dim)[1]
    f_stray = np.eye(dim)[2]
    anchors = [
        Anchor(f_known, BBox(10, 10, 20, 20)),
        Anchor(f_stray, BBox(60, 60, 70, 70)),
    ]
    return Scene(sid, anchors, [GroundTruth(BBox(10, 10, 20, 20), 1)])


def test_tune_unknown_trains_wildcard_on_pseudo_labels():
    vocab = _two_entry_vocab()
    scenes = [_pseudo_scene(f"s{i}") for i in range(3)]
    buf = io.StringIO()
    out = tune_unknown(scenes, vocab, TrainConfig(), logger=TrainLogger(buf))
    assert np.array_equal(out.entries[0].embedding, vocab.entries[0].embedding)
    assert np.array_equal(out.wildcard_obj, vocab.wildcard_obj)
    assert not np.array_equal(out.wildcard_unk, vocab.wildcard_unk)
    rows = [ln.split("\t") for ln in buf.getvalue().splitlines()[1:]]
    assert all(r[1] == "unknown" for r in rows)
    assert any(int(r[4]) > 0 for r in rows)


def test_tune_unknown_requires_teacher_and_start():
    scenes = [_pseudo_scene("s")]
    no_teacher = _two_entry_vocab(with_wildcards=False)
    with pytest.raises(ValueError, match="teacher absent"):
        tune_unknown(scenes, no_teacher, TrainConfig())
    teacher_only = Vocabulary(
        no_teacher.entries, wildcard_obj=_unit(np.eye(6)[2]), wildcard_unk=None
    )
    with pytest.raises(ValueError, match="not initialized"):
        tune_unknown(scenes, teacher_only, TrainConfig())
    # An encoder substitutes for the missing unknown slot.
    enc = ToyTextEncoder(dim=6, rank=2, seed=1)
    out = tune_unknown(scenes, teacher_only, TrainConfig(), enc=enc)
    assert out.wildcard_unk is not None


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_embed=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(sigma1=1.5)
    with pytest.raises(ValueError):
        TrainConfig(weight_decay_embed=-0.1)
