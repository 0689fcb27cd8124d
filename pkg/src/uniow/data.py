"""Synthetic worlds of precomputed region features.

A world consists of unit-norm category prototypes (kept at least a
minimum angle apart) and scenes whose object anchors carry noisy copies
of their prototype; background anchors are random directions rejected
until they are dissimilar to every prototype. Boxes live on a 100x100
canvas; each object contributes exactly one anchor whose box is a small
jitter of the ground truth box. Generation is a pure function of the
world spec, including its seed.

Prototypes share a latent objectness component (object_cosine along a
hidden seeded direction), mirroring how real region-text embedding
spaces give all object features a common signature that background
lacks. Wildcard training depends on that signature existing: a single
taught embedding can only pick up never-annotated objects if objects
share something to pick up on. Set object_cosine to 0 for a fully
isotropic world.

Datasets label ground truth in dataset space: ids 0..num_known-1 are
the known block, then the unknown block. Task views remap onto a
vocabulary: the training view keeps only allowed labels, the eval view
sends every out-of-vocabulary label to UNKNOWN_ID.

Feature file (UOWF, little-endian): magic b"UOWF" | version u32 |
dim u32 | count u64 | count*dim f32 row-major.
Scene file: line-oriented text, records
  UOWSC 1 / dim N / known a,b / unknown c,d / scene ID /
  anchor ROW X1 Y1 X2 Y2 / gt NAME X1 Y1 X2 Y2
with floats as shortest exact reprs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import UNKNOWN_ID, Anchor, BBox, GroundTruth, Scene
from .embedding import normalize, unit_embedding
from .errors import (
    DimensionMismatchError,
    FileFormatError,
    GenerationError,
    TruncatedFileError,
    VersionMismatchError,
)
from .fileutil import atomic_write_bytes, atomic_write_text
from .rng import Rng, mix64

_FEAT_MAGIC = b"UOWF"
_FEAT_VERSION = 1
_SCENE_MAGIC = "UOWSC"
_SCENE_VERSION = 1

_TAG_PROTO = 0x9807
_TAG_SCENE = 0x5CEE

_MAX_REJECTS = 100_000

# Category names are drawn from this pool, known block first; worlds
# larger than the pool fall back to numbered names.
_NAME_POOL = (
    "alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo "
    "lima mike november oscar papa quebec romeo sierra tango uniform "
    "victor whiskey xray yankee zulu"
).split()


@dataclass(frozen=True)
class WorldSpec:
    num_known: int = 8
    num_unknown: int = 4
    feature_dim: int = 32
    feature_noise: float = 0.1
    scenes: int = 100
    objects_min: int = 1
    objects_max: int = 3
    bg_anchors: int = 8
    min_prototype_angle_deg: float = 25.0
    object_cosine: float = 0.65
    bg_max_cosine: float = 0.3
    box_jitter: float = 0.08
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_known < 1 or self.num_unknown < 0:
            raise ValueError("need at least one known category")
        if self.feature_dim < 2:
            raise ValueError(f"feature_dim must be at least 2: {self.feature_dim}")
        if self.feature_noise < 0.0:
            raise ValueError("feature_noise must be non-negative")
        if self.scenes < 0 or self.bg_anchors < 0:
            raise ValueError("scene and anchor counts must be non-negative")
        if not (0 <= self.objects_min <= self.objects_max):
            raise ValueError(
                f"bad objects range [{self.objects_min}, {self.objects_max}]"
            )
        if not (0.0 < self.min_prototype_angle_deg < 180.0):
            raise ValueError("min_prototype_angle_deg must lie in (0, 180)")
        if not (0.0 <= self.object_cosine < 1.0):
            raise ValueError("object_cosine must lie in [0, 1)")
        if np.cos(np.deg2rad(self.min_prototype_angle_deg)) < self.object_cosine**2:
            raise ValueError(
                "min_prototype_angle_deg demands pairwise cosines below the "
                "object_cosine**2 floor shared by all prototypes"
            )
        if not (-1.0 <= self.bg_max_cosine <= 1.0):
            raise ValueError("bg_max_cosine must lie in [-1, 1]")
        if not (0.0 <= self.box_jitter < 0.5):
            raise ValueError("box_jitter must lie in [0, 0.5)")


@dataclass
class Dataset:
    """Scenes plus the name tables that give dataset ids meaning."""

    scenes: list[Scene]
    known_names: list[str]
    unknown_names: list[str]

    def __post_init__(self) -> None:
        names = self.known_names + self.unknown_names
        if len(set(names)) != len(names):
            raise ValueError("duplicate category names across known/unknown blocks")
        total = len(names)
        for sc in self.scenes:
            for g in sc.ground_truth:
                if not (0 <= g.category_id < total):
                    raise ValueError(
                        f"scene {sc.id!r}: ground truth id {g.category_id} "
                        f"outside dataset space [0, {total})"
                    )

    def name_of(self, dataset_id: int) -> str:
        names = self.known_names + self.unknown_names
        return names[dataset_id]


def default_names(num_known: int, num_unknown: int) -> tuple[list[str], list[str]]:
    total = num_known + num_unknown
    pool = list(_NAME_POOL) + [f"cat{i}" for i in range(len(_NAME_POOL), total)]
    return pool[:num_known], pool[num_known:total]


def _sample_direction_with_rejection(
    rng: Rng, dim: int, accepted: list[np.ndarray], max_cos: float, what: str
) -> np.ndarray:
    for _ in range(_MAX_REJECTS):
        v = normalize(rng.normals(dim))
        if all(float(np.dot(v, a)) <= max_cos for a in accepted):
            return v
    raise GenerationError(
        f"could not place {what} after {_MAX_REJECTS} rejection attempts; "
        "the separation constraint is infeasible at this dimension"
    )


def prototypes(spec: WorldSpec) -> np.ndarray:
    """Unit prototypes for all categories, pairwise at least the
    minimum angle apart. Each is object_cosine along a hidden shared
    direction plus a per-category remainder orthogonal to it, so the
    pairwise cosine floor is object_cosine**2. Deterministic in the
    spec seed."""
    rng = Rng(mix64(spec.seed, _TAG_PROTO))
    max_cos = float(np.cos(np.deg2rad(spec.min_prototype_angle_deg)))
    shared = normalize(rng.normals(spec.feature_dim))
    rest = float(np.sqrt(1.0 - spec.object_cosine**2))
    out: list[np.ndarray] = []
    for _ in range(spec.num_known + spec.num_unknown):
        for _ in range(_MAX_REJECTS):
            raw = rng.normals(spec.feature_dim)
            raw -= float(np.dot(raw, shared)) * shared
            cand = normalize(spec.object_cosine * shared + rest * normalize(raw))
            if all(float(np.dot(cand, p)) <= max_cos for p in out):
                out.append(cand)
                break
        else:
            raise GenerationError(
                f"could not place a prototype after {_MAX_REJECTS} rejection "
                "attempts; the separation constraint is infeasible at this "
                "dimension"
            )
    return np.stack(out)


def _random_box(rng: Rng, lo: float, hi: float, smin: float, smax: float) -> BBox:
    cx = rng.uniform_range(lo, hi)
    cy = rng.uniform_range(lo, hi)
    w = rng.uniform_range(smin, smax)
    h = rng.uniform_range(smin, smax)
    return BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _jittered(rng: Rng, box: BBox, jitter: float) -> BBox:
    w = box.x2 - box.x1
    h = box.y2 - box.y1
    return BBox(
        box.x1 + rng.uniform_range(-jitter, jitter) * w,
        box.y1 + rng.uniform_range(-jitter, jitter) * h,
        box.x2 + rng.uniform_range(-jitter, jitter) * w,
        box.y2 + rng.uniform_range(-jitter, jitter) * h,
    )


def generate(spec: WorldSpec) -> Dataset:
    """Build the synthetic world described by the spec.

    Object features are normalize(prototype + noise * gaussian), then
    snapped to the float32 grid so feature files round-trip exactly.
    With the default noise and dimension, features stay far closer to
    their own prototype than to any other, so the world is separable.
    """
    protos = prototypes(spec)
    known_names, unknown_names = default_names(spec.num_known, spec.num_unknown)
    total = spec.num_known + spec.num_unknown
    scenes: list[Scene] = []
    for s in range(spec.scenes):
        rng = Rng(mix64(spec.seed, _TAG_SCENE, s))
        anchors: list[Anchor] = []
        gts: list[GroundTruth] = []
        for _ in range(rng.randint(spec.objects_min, spec.objects_max)):
            cat = rng.randint(0, total - 1)
            gt_box = _random_box(rng, 10.0, 90.0, 8.0, 24.0)
            feat = unit_embedding(
                protos[cat] + spec.feature_noise * rng.normals(spec.feature_dim)
            )
            anchors.append(Anchor(feat, _jittered(rng, gt_box, spec.box_jitter)))
            gts.append(GroundTruth(gt_box, cat))
        proto_list = list(protos)
        for _ in range(spec.bg_anchors):
            feat = _sample_direction_with_rejection(
                rng, spec.feature_dim, proto_list, spec.bg_max_cosine, "background feature"
            )
            anchors.append(Anchor(unit_embedding(feat), _random_box(rng, 5.0, 95.0, 6.0, 20.0)))
        scenes.append(Scene(f"scene{s:05d}", anchors, gts))
    return Dataset(scenes, known_names, unknown_names)


def training_view(ds: Dataset, vocab_names: list[str], allowed: list[str]) -> list[Scene]:
    """Scenes with ground truth relabeled to vocabulary ids.

    Only labels in allowed survive (the current task's annotation set);
    everything else is dropped, as an open-world training split never
    annotates categories outside the current task.
    """
    index = {n: i for i, n in enumerate(vocab_names)}
    missing = [n for n in allowed if n not in index]
    if missing:
        raise ValueError(f"allowed names missing from vocabulary: {missing}")
    keep = set(allowed)
    out = []
    for sc in ds.scenes:
        gts = [
            GroundTruth(g.box, index[ds.name_of(g.category_id)])
            for g in sc.ground_truth
            if ds.name_of(g.category_id) in keep
        ]
        out.append(Scene(sc.id, sc.anchors, gts))
    return out


def eval_view(ds: Dataset, vocab_names: list[str]) -> list[Scene]:
    """Scenes relabeled for evaluation: out-of-vocabulary ground truth
    becomes UNKNOWN_ID instead of being dropped."""
    index = {n: i for i, n in enumerate(vocab_names)}
    out = []
    for sc in ds.scenes:
        gts = [
            GroundTruth(g.box, index.get(ds.name_of(g.category_id), UNKNOWN_ID))
            for g in sc.ground_truth
        ]
        out.append(Scene(sc.id, sc.anchors, gts))
    return out


def write_features(matrix: np.ndarray, path: str) -> None:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"feature matrix must be 2-d, got shape {m.shape}")
    header = _FEAT_MAGIC + struct.pack("<IIQ", _FEAT_VERSION, m.shape[1], m.shape[0])
    atomic_write_bytes(path, header + m.astype("<f4").tobytes())


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != _FEAT_MAGIC:
        raise FileFormatError(f"{path}: not a feature file")
    if len(blob) < 20:
        raise TruncatedFileError(f"{path}: file ends inside the header")
    version, dim, count = struct.unpack_from("<IIQ", blob, 4)
    if version != _FEAT_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {_FEAT_VERSION}")
    if dim < 1:
        raise FileFormatError(f"{path}: bad dimension {dim}")
    need = 20 + 4 * dim * count
    if len(blob) < need:
        raise TruncatedFileError(f"{path}: payload cut short")
    if len(blob) > need:
        raise FileFormatError(f"{path}: {len(blob) - need} trailing bytes")
    return (
        np.frombuffer(blob, dtype="<f4", count=dim * count, offset=20)
        .astype(np.float64)
        .reshape(count, dim)
    )


def _names_csv(names: list[str]) -> str:
    for n in names:
        if not n or any(c in n for c in ", \t\n"):
            raise ValueError(f"name not writable to scene file: {n!r}")
    return ",".join(names)


def write_scenes(ds: Dataset, scene_path: str, feature_path: str) -> None:
    """Write the text scene file and its companion feature file.

    Anchor rows are emitted sequentially in scene order, so row indices
    in the text match the binary payload by construction.
    """
    rows: list[np.ndarray] = []
    lines = [
        f"{_SCENE_MAGIC} {_SCENE_VERSION}\n",
        f"dim {_dataset_dim(ds)}\n",
        f"known {_names_csv(ds.known_names)}\n",
        f"unknown {_names_csv(ds.unknown_names)}\n",
    ]
    for sc in ds.scenes:
        if any(c.isspace() for c in sc.id) or not sc.id:
            raise ValueError(f"scene id not writable: {sc.id!r}")
        lines.append(f"scene {sc.id}\n")
        for a in sc.anchors:
            b = a.box
            lines.append(f"anchor {len(rows)} {b.x1!r} {b.y1!r} {b.x2!r} {b.y2!r}\n")
            rows.append(a.feature)
        for g in sc.ground_truth:
            b = g.box
            lines.append(
                f"gt {ds.name_of(g.category_id)} {b.x1!r} {b.y1!r} {b.x2!r} {b.y2!r}\n"
            )
    matrix = np.stack(rows) if rows else np.zeros((0, _dataset_dim(ds)))
    write_features(matrix, feature_path)
    atomic_write_text(scene_path, "".join(lines))


def _dataset_dim(ds: Dataset) -> int:
    for sc in ds.scenes:
        if sc.anchors:
            return sc.anchors[0].feature.shape[0]
    raise ValueError("cannot infer feature dimension from an anchorless dataset")


def read_scenes(scene_path: str, feature_path: str) -> Dataset:
    features = read_features(feature_path)

    def fail(lineno: int, msg: str) -> FileFormatError:
        return FileFormatError(f"{scene_path}:{lineno}: {msg}")

    def parse_box(parts: list[str], lineno: int) -> BBox:
        try:
            return BBox(*(float(v) for v in parts))
        except ValueError as e:
            raise fail(lineno, str(e)) from e

    with open(scene_path, "r", encoding="utf-8") as f:
        raw = f.read().splitlines()
    if not raw or raw[0] != f"{_SCENE_MAGIC} {_SCENE_VERSION}":
        head = raw[0] if raw else ""
        if head.split(" ")[0] == _SCENE_MAGIC:
            raise VersionMismatchError(f"{scene_path}: unsupported version line {head!r}")
        raise FileFormatError(f"{scene_path}: not a scene file")

    dim: int | None = None
    known: list[str] | None = None
    unknown: list[str] | None = None
    scenes: list[Scene] = []
    cur_id: str | None = None
    cur_anchors: list[Anchor] = []
    cur_gts: list[GroundTruth] = []
    seen_ids: set[str] = set()
    name_to_id: dict[str, int] = {}

    def flush() -> None:
        nonlocal cur_id, cur_anchors, cur_gts
        if cur_id is not None:
            scenes.append(Scene(cur_id, cur_anchors, cur_gts))
        cur_id, cur_anchors, cur_gts = None, [], []

    for lineno, line in enumerate(raw[1:], 2):
        if not line.strip():
            continue
        parts = line.split(" ")
        kind = parts[0]
        if kind == "dim":
            if len(parts) != 2 or not parts[1].isdigit():
                raise fail(lineno, "bad dim record")
            dim = int(parts[1])
            if dim != features.shape[1]:
                raise DimensionMismatchError(
                    f"{scene_path}: dim {dim} but feature file carries {features.shape[1]}"
                )
        elif kind in ("known", "unknown"):
            names = parts[1].split(",") if len(parts) == 2 and parts[1] else []
            if kind == "known":
                known = names
            else:
                unknown = names
        elif kind == "scene":
            if len(parts) != 2:
                raise fail(lineno, "bad scene record")
            flush()
            cur_id = parts[1]
            if cur_id in seen_ids:
                raise fail(lineno, f"duplicate scene id {cur_id!r}")
            seen_ids.add(cur_id)
        elif kind == "anchor":
            if cur_id is None:
                raise fail(lineno, "anchor record outside any scene")
            if len(parts) != 6 or not parts[1].isdigit():
                raise fail(lineno, "bad anchor record")
            row = int(parts[1])
            if row >= features.shape[0]:
                raise fail(lineno, f"feature row {row} out of range")
            cur_anchors.append(Anchor(features[row], parse_box(parts[2:], lineno)))
        elif kind == "gt":
            if cur_id is None:
                raise fail(lineno, "gt record outside any scene")
            if len(parts) != 6:
                raise fail(lineno, "bad gt record")
            if not name_to_id:
                if known is None or unknown is None:
                    raise fail(lineno, "gt record before known/unknown tables")
                name_to_id.update(
                    {n: i for i, n in enumerate(list(known) + list(unknown))}
                )
            if parts[1] not in name_to_id:
                raise fail(lineno, f"unknown category name {parts[1]!r}")
            cur_gts.append(GroundTruth(parse_box(parts[2:], lineno), name_to_id[parts[1]]))
        else:
            raise fail(lineno, f"unrecognized record type {kind!r}")
    flush()
    if dim is None or known is None or unknown is None:
        raise FileFormatError(f"{scene_path}: missing dim/known/unknown header records")
    try:
        return Dataset(scenes, known, unknown)
    except ValueError as e:
        raise FileFormatError(f"{scene_path}: {e}") from e
