"""Embedding-space vocabulary and region scoring.

Classification is a similarity lookup: cosine between an L2-normalized
region feature and per-category text embeddings, squashed through a
calibrated logistic. The vocabulary also carries two wildcard embeddings
outside the category list: an "object" wildcard used as a training-time
teacher and an unknown wildcard used at inference time.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

UNIT_NORM_TOL = 1e-6


def normalize(v: np.ndarray) -> np.ndarray:
    """Return v / ||v||; rejects zero and non-finite input."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("degenerate embedding: non-finite input")
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("degenerate embedding: zero vector")
    return v / n


def quantize_f32(v: np.ndarray) -> np.ndarray:
    """Round to the nearest float32-representable values, kept as float64.

    All persisted embeddings are stored as little-endian float32. Keeping
    in-memory values on that grid makes save/load a bitwise identity.
    The rounding perturbs unit norm by well under UNIT_NORM_TOL.
    """
    return np.asarray(v, dtype=np.float64).astype(np.float32).astype(np.float64)


def unit_embedding(v: np.ndarray) -> np.ndarray:
    """Normalize then snap onto the float32 grid: the canonical form
    every stored category or wildcard embedding uses."""
    return quantize_f32(normalize(v))


def assert_unit(v: np.ndarray, what: str = "embedding") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > UNIT_NORM_TOL:
        raise ValueError(f"{what} not unit-norm: ||v|| = {n!r}")
    return v


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two already-normalized vectors."""
    return float(np.dot(a, b))


@dataclass(frozen=True)
class ScoreParams:
    """Affine-logistic calibration from cosine similarity to [0, 1]."""

    scale: float = 10.0
    bias: float = -5.0

    def __post_init__(self) -> None:
        if not (self.scale > 0.0):
            raise ValueError(f"scale must be positive: {self.scale}")


def score(sim: float, params: ScoreParams) -> float:
    """logistic(scale * sim + bias); strictly increasing in sim."""
    z = params.scale * sim + params.bias
    # Exp of the negated magnitude keeps both tails overflow-free.
    if z >= 0.0:
        return float(1.0 / (1.0 + np.exp(-z)))
    e = float(np.exp(z))
    return e / (1.0 + e)


def score_matrix(features: np.ndarray, embeddings: np.ndarray, params: ScoreParams) -> np.ndarray:
    """Scores for every (feature, embedding) pair.

    features: (n, d) rows need not be normalized; they are normalized here.
    embeddings: (m, d) rows must already be unit-norm.
    Returns an (n, m) matrix of logistic scores.
    """
    if features.shape[0] == 0 or embeddings.shape[0] == 0:
        return np.zeros((features.shape[0], embeddings.shape[0]), dtype=np.float64)
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("degenerate embedding: zero feature row")
    sims = (features / norms) @ embeddings.T
    z = params.scale * sims + params.bias
    out = np.empty_like(z)
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class CategoryStatus(enum.Enum):
    """Lifecycle tag: categories added in the current task vs. earlier."""

    PREVIOUSLY_KNOWN = "previously_known"
    CURRENT_KNOWN = "current_known"


@dataclass(frozen=True)
class CategoryEntry:
    id: int
    name: str
    embedding: np.ndarray
    status: CategoryStatus

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError(f"category id must be non-negative: {self.id}")
        if not self.name:
            raise ValueError("empty category name")
        assert_unit(self.embedding, f"embedding for {self.name!r}")


@dataclass
class Vocabulary:
    """Ordered category entries plus optional wildcard slots.

    Entry ids are dense and equal their list position; names are unique.
    Wildcards live outside the entry list and never occupy category ids.
    """

    entries: list[CategoryEntry] = field(default_factory=list)
    wildcard_obj: np.ndarray | None = None
    wildcard_unk: np.ndarray | None = None

    def __post_init__(self) -> None:
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate category names")
        for i, e in enumerate(self.entries):
            if e.id != i:
                raise ValueError(f"entry {e.name!r} has id {e.id}, expected {i}")
        dims = {e.embedding.shape[0] for e in self.entries}
        for w in (self.wildcard_obj, self.wildcard_unk):
            if w is not None:
                assert_unit(w, "wildcard")
                dims.add(w.shape[0])
        if len(dims) > 1:
            raise ValueError(f"mixed embedding dims: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> int:
        if self.entries:
            return self.entries[0].embedding.shape[0]
        for w in (self.wildcard_obj, self.wildcard_unk):
            if w is not None:
                return w.shape[0]
        raise ValueError("empty vocabulary has no dimension")

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def by_name(self, name: str) -> CategoryEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def embedding_matrix(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0), dtype=np.float64)
        return np.stack([e.embedding for e in self.entries])

    def ids_with_status(self, status: CategoryStatus) -> list[int]:
        return [e.id for e in self.entries if e.status == status]

    def with_entry_embedding(self, cat_id: int, embedding: np.ndarray) -> "Vocabulary":
        """Copy of this vocabulary with one category embedding replaced."""
        entries = list(self.entries)
        entries[cat_id] = replace(entries[cat_id], embedding=embedding)
        return Vocabulary(entries, self.wildcard_obj, self.wildcard_unk)


def classify(feature: np.ndarray, vocab: Vocabulary, params: ScoreParams) -> np.ndarray:
    """Per-category scores for one region feature.

    Output order is fixed: vocabulary entries first, then the object
    wildcard if present, then the unknown wildcard if present.
    """
    cols = [e.embedding for e in vocab.entries]
    if vocab.wildcard_obj is not None:
        cols.append(vocab.wildcard_obj)
    if vocab.wildcard_unk is not None:
        cols.append(vocab.wildcard_unk)
    if not cols:
        return np.zeros(0, dtype=np.float64)
    f = normalize(np.asarray(feature, dtype=np.float64))
    return score_matrix(f[None, :], np.stack(cols), params)[0]
