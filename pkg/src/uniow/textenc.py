"""Deterministic toy text encoder with LoRA adapters.

Stands in for a pretrained language model at desk scale: category names
are broken into character trigrams, each trigram looked up in a seeded
unit-norm token table, and the token sequence run through one head of
self-attention whose query/key/value/output projections carry low-rank
adapters (W = W0 + B @ A). Only A and B ever train; the frozen base W0
plus the zero initialization of B make a fresh adapter an exact no-op.

Gradients are computed by hand in encode_grad: the backward pass walks
normalize -> mean-pool -> output projection -> attention -> q/k/v
projections and finally into the low-rank factors. No autodiff anywhere.

Checkpoint format (UOWE, little-endian):
  magic b"UOWE" | version u32 | dim u32 | rank u32 | seed u64
  then per layer in q, k, v, o order: W0 (dim*dim f32 row-major),
  A (rank*dim f32), B (dim*rank f32).
Floats are stored as f32; in memory the encoder runs in f64, so the
byte-exact round-trip guarantee is bytes -> load -> save -> same bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .embedding import normalize, unit_embedding
from .errors import (
    FileFormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from .rng import Rng, mix64

_MAGIC = b"UOWE"
_VERSION = 1
_LAYER_NAMES = ("q", "k", "v", "o")

# Purpose tags for deriving per-layer and per-token child seeds.
_TAG_TOKEN = 0x70AD
_TAG_BASE = 0xBA5E
_TAG_LORA_A = 0x10A4

_PAD_CHAR = "#"


@dataclass
class LoraLinear:
    """Frozen base weight plus trainable low-rank residual B @ A."""

    w0: np.ndarray  # (d_out, d_in), frozen
    a: np.ndarray   # (rank, d_in)
    b: np.ndarray   # (d_out, rank)

    def __post_init__(self) -> None:
        d_out, d_in = self.w0.shape
        r = self.a.shape[0]
        if self.a.shape != (r, d_in) or self.b.shape != (d_out, r):
            raise ValueError(
                f"factor shapes {self.a.shape}/{self.b.shape} do not fit base {self.w0.shape}"
            )
        if not (1 <= r < min(d_in, d_out)):
            raise ValueError(f"rank {r} outside [1, {min(d_in, d_out) - 1}]")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def trainable_params(self) -> int:
        return self.a.size + self.b.size


def lora_forward(layer: LoraLinear, x: np.ndarray) -> np.ndarray:
    """Apply W0 x + B (A x); x may be a vector or a stack of rows."""
    return x @ layer.w0.T + (x @ layer.a.T) @ layer.b.T


def lora_merge(layer: LoraLinear) -> np.ndarray:
    """Collapse the adapter into a dense weight: W0 + B @ A."""
    return layer.w0 + layer.b @ layer.a


def _trigrams(name: str) -> list[str]:
    if not name:
        raise ValueError("degenerate name: empty string")
    padded = name if len(name) >= 3 else name + _PAD_CHAR * (3 - len(name))
    return [padded[i : i + 3] for i in range(len(padded) - 2)]


def _pack_trigram(tri: str) -> int:
    # Three code points, 21 bits each, fit one 64-bit tag.
    c0, c1, c2 = (ord(c) for c in tri)
    return c0 | (c1 << 21) | (c2 << 42)


class ToyTextEncoder:
    """Single-head self-attention encoder over trigram tokens."""

    def __init__(self, dim: int = 32, rank: int = 4, seed: int = 0) -> None:
        if dim < 2:
            raise ValueError(f"dim must be at least 2: {dim}")
        self.dim = dim
        self.seed = seed
        self.layers: dict[str, LoraLinear] = {}
        std = 1.0 / np.sqrt(dim)
        for idx, lname in enumerate(_LAYER_NAMES):
            w0 = Rng(mix64(seed, _TAG_BASE, idx)).normals(dim * dim).reshape(dim, dim) * std
            a = Rng(mix64(seed, _TAG_LORA_A, idx)).normals(rank * dim).reshape(rank, dim) * 0.02
            b = np.zeros((dim, rank), dtype=np.float64)
            self.layers[lname] = LoraLinear(w0, a, b)
        self._token_cache: dict[str, np.ndarray] = {}

    @property
    def rank(self) -> int:
        return self.layers["q"].rank

    @property
    def trainable_params(self) -> int:
        """Adapter parameters only; equals sum of rank*(d_in+d_out)."""
        return sum(layer.trainable_params for layer in self.layers.values())

    @property
    def dense_params(self) -> int:
        """What full fine-tuning of the four projections would train."""
        return sum(layer.w0.size for layer in self.layers.values())

    def token_vector(self, tri: str) -> np.ndarray:
        cached = self._token_cache.get(tri)
        if cached is None:
            rng = Rng(mix64(self.seed, _TAG_TOKEN, _pack_trigram(tri)))
            cached = normalize(rng.normals(self.dim))
            self._token_cache[tri] = cached
        return cached

    @classmethod
    def _from_params(
        cls, dim: int, rank: int, seed: int, layers: dict[str, LoraLinear]
    ) -> "ToyTextEncoder":
        enc = cls.__new__(cls)
        enc.dim = dim
        enc.seed = seed
        enc.layers = layers
        enc._token_cache = {}
        assert enc.rank == rank
        return enc


def base_tokens(name: str, enc: ToyTextEncoder) -> np.ndarray:
    """Trigram token vectors for a name, stacked as (n_tokens, dim).

    Names shorter than 3 characters are right-padded with '#'. Every
    token vector is unit-norm and a pure function of (seed, trigram).
    """
    return np.stack([enc.token_vector(t) for t in _trigrams(name)])


@dataclass
class _ForwardCache:
    """Intermediates kept for the manual backward pass."""

    x: np.ndarray        # (n, d) token inputs
    q: np.ndarray        # (n, d)
    k: np.ndarray        # (n, d)
    v: np.ndarray        # (n, d)
    attn: np.ndarray     # (n, n) softmax rows
    ctx: np.ndarray      # (n, d) attn @ v
    proj: np.ndarray     # (n, d) output projection of ctx
    pooled: np.ndarray   # (d,) mean over tokens
    pooled_norm: float
    out: np.ndarray      # (d,) unit embedding


def _forward(name: str, enc: ToyTextEncoder) -> _ForwardCache:
    x = base_tokens(name, enc)
    q = lora_forward(enc.layers["q"], x)
    k = lora_forward(enc.layers["k"], x)
    v = lora_forward(enc.layers["v"], x)
    logits = (q @ k.T) / np.sqrt(enc.dim)
    # Row-wise softmax, shifted for stability.
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=1, keepdims=True)
    ctx = attn @ v
    proj = lora_forward(enc.layers["o"], ctx)
    pooled = proj.mean(axis=0)
    n = float(np.linalg.norm(pooled))
    if n == 0.0:
        raise ValueError(f"degenerate embedding: name {name!r} pooled to zero")
    return _ForwardCache(x, q, k, v, attn, ctx, proj, pooled, n, pooled / n)


def encode(name: str, enc: ToyTextEncoder) -> np.ndarray:
    """Embed a category name as a unit-norm vector.

    Deterministic: same (name, encoder weights, seed) always gives the
    same vector. With fresh adapters (B = 0) the output equals the
    frozen base encoder's output exactly.
    """
    return _forward(name, enc).out


def encode_grad(
    name: str, enc: ToyTextEncoder, upstream: np.ndarray
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Gradients of upstream . encode(name) w.r.t. each adapter factor.

    upstream is dL/d(embedding) evaluated at the normalized output.
    Returns {layer: (dL/dA, dL/dB)} for layers q, k, v, o. Base weights
    and token vectors are frozen and get no gradient.
    """
    c = _forward(name, enc)
    n_tok = c.x.shape[0]

    # Through the L2 normalization: y = p / ||p||.
    gy = np.asarray(upstream, dtype=np.float64)
    gp = (gy - float(np.dot(gy, c.out)) * c.out) / c.pooled_norm

    # Mean pool spreads the gradient evenly across token rows.
    gproj = np.tile(gp / n_tok, (n_tok, 1))

    # Output projection: proj = ctx @ Wo^T.
    g_wo = gproj.T @ c.ctx
    gctx = gproj @ lora_merge(enc.layers["o"])

    # Attention application: ctx = attn @ v.
    gattn = gctx @ c.v.T
    gv = c.attn.T @ gctx

    # Softmax rows: d logits_ij = a_ij * (g_ij - sum_k a_ik g_ik).
    row_dot = np.sum(c.attn * gattn, axis=1, keepdims=True)
    glogits = c.attn * (gattn - row_dot)

    inv_sqrt_d = 1.0 / np.sqrt(enc.dim)
    gq = glogits @ c.k * inv_sqrt_d
    gk = glogits.T @ c.q * inv_sqrt_d

    g_wq = gq.T @ c.x
    g_wk = gk.T @ c.x
    g_wv = gv.T @ c.x

    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for lname, g_w in (("q", g_wq), ("k", g_wk), ("v", g_wv), ("o", g_wo)):
        layer = enc.layers[lname]
        # W = W0 + B A, so dW flows into the factors as outer pieces.
        grads[lname] = (layer.b.T @ g_w, g_w @ layer.a.T)
    return grads


def precompute_vocab(names: list[str], enc: ToyTextEncoder) -> np.ndarray:
    """Encode a list of names into a stacked (n, dim) embedding matrix.

    Rows are normalized and snapped to the float32 grid, which is the
    canonical form for anything stored in a vocabulary or on disk.
    """
    if not names:
        return np.zeros((0, enc.dim), dtype=np.float64)
    return np.stack([unit_embedding(encode(n, enc)) for n in names])


def save_encoder(enc: ToyTextEncoder, path: str) -> None:
    """Write a UOWE checkpoint (see module docstring for layout)."""
    parts = [_MAGIC, struct.pack("<III", _VERSION, enc.dim, enc.rank)]
    parts.append(struct.pack("<Q", enc.seed & ((1 << 64) - 1)))
    for lname in _LAYER_NAMES:
        layer = enc.layers[lname]
        for arr in (layer.w0, layer.a, layer.b):
            parts.append(arr.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_encoder(path: str) -> ToyTextEncoder:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise FileFormatError(f"{path}: not an encoder checkpoint")
    off = 4
    if len(blob) < off + 12 + 8:
        raise TruncatedFileError(f"{path}: header cut short")
    version, dim, rank = struct.unpack_from("<III", blob, off)
    off += 12
    if version != _VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {_VERSION}")
    (seed,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if dim < 2 or not (1 <= rank < dim):
        raise FileFormatError(f"{path}: bad dims dim={dim} rank={rank}")
    layers: dict[str, LoraLinear] = {}
    for lname in _LAYER_NAMES:
        mats = []
        for shape in ((dim, dim), (rank, dim), (dim, rank)):
            count = shape[0] * shape[1]
            end = off + 4 * count
            if end > len(blob):
                raise TruncatedFileError(f"{path}: weight payload cut short")
            mats.append(
                np.frombuffer(blob, dtype="<f4", count=count, offset=off)
                .astype(np.float64)
                .reshape(shape)
            )
            off = end
        layers[lname] = LoraLinear(*mats)
    if off != len(blob):
        raise FileFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return ToyTextEncoder._from_params(dim, rank, seed, layers)
