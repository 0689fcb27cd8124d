"""Incremental task state: the vocabulary as it grows across tasks.

Expanding to a new task freezes every current category (they become
previously-known and their embeddings never change again), appends the
new names with fresh encoded embeddings, and re-primes the unknown
wildcard from encode("object"). The object wildcard teacher, once
trained, is carried forward frozen. Nothing is ever retrained for old
categories, which is what makes earlier-task detections reproducible
bit for bit.

State file format (UOWS, little-endian):
  magic b"UOWS" | version u32 | task_index u32 | dim u32 | n_entries u32
  per entry: name_len u16 | name utf8 | status u8 (0 prev, 1 current) |
             dim * f32 embedding
  has_obj u8 [+ dim * f32] | has_unk u8 [+ dim * f32]
  n_history u32; per record: task u32 | n_names u16 | (len u16 | utf8)*
  crc32 u32 over all preceding bytes.
Embeddings are kept on the float32 grid in memory, so load(save(s))
reproduces s exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .embedding import CategoryEntry, CategoryStatus, Vocabulary, unit_embedding
from .errors import (
    ChecksumError,
    FileFormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from .fileutil import atomic_write_bytes
from .textenc import ToyTextEncoder, encode

_MAGIC = b"UOWS"
_VERSION = 1
_WILDCARD_NAME = "object"

_STATUS_CODE = {CategoryStatus.PREVIOUSLY_KNOWN: 0, CategoryStatus.CURRENT_KNOWN: 1}
_CODE_STATUS = {v: k for k, v in _STATUS_CODE.items()}


@dataclass
class TaskState:
    task_index: int  # 1-based
    vocab: Vocabulary
    history: list[tuple[int, list[str]]]

    def __post_init__(self) -> None:
        if self.task_index < 1:
            raise ValueError(f"task_index must be at least 1: {self.task_index}")
        hist_names = [n for _, batch in self.history for n in batch]
        if hist_names != self.vocab.names():
            raise ValueError("history does not spell out the vocabulary in order")


def initial_state(names: list[str], enc: ToyTextEncoder) -> TaskState:
    """Task-1 state: all names current-known, unknown wildcard primed."""
    if not names:
        raise ValueError("initial vocabulary needs at least one name")
    entries = [
        CategoryEntry(i, n, unit_embedding(encode(n, enc)), CategoryStatus.CURRENT_KNOWN)
        for i, n in enumerate(names)
    ]
    vocab = Vocabulary(
        entries,
        wildcard_obj=None,
        wildcard_unk=unit_embedding(encode(_WILDCARD_NAME, enc)),
    )
    return TaskState(1, vocab, [(1, list(names))])


def expand(state: TaskState, new_names: list[str], enc: ToyTextEncoder) -> TaskState:
    """Advance one task: freeze current categories, append new ones.

    Existing embeddings are carried over bitwise as previously-known;
    new names are encoded with the given encoder; the unknown wildcard
    resets to a fresh encode("object"); a trained object wildcard rides
    along unchanged.
    """
    if not new_names:
        raise ValueError("expand needs at least one new name")
    existing = set(state.vocab.names())
    if len(set(new_names)) != len(new_names) or existing & set(new_names):
        raise ValueError("new names must be unique and disjoint from the vocabulary")
    entries = [
        CategoryEntry(e.id, e.name, e.embedding, CategoryStatus.PREVIOUSLY_KNOWN)
        for e in state.vocab.entries
    ]
    base = len(entries)
    for k, n in enumerate(new_names):
        entries.append(
            CategoryEntry(
                base + k, n, unit_embedding(encode(n, enc)), CategoryStatus.CURRENT_KNOWN
            )
        )
    vocab = Vocabulary(
        entries,
        wildcard_obj=state.vocab.wildcard_obj,
        wildcard_unk=unit_embedding(encode(_WILDCARD_NAME, enc)),
    )
    task = state.task_index + 1
    return TaskState(task, vocab, state.history + [(task, list(new_names))])


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"name too long: {name[:32]!r}...")
    return struct.pack("<H", len(raw)) + raw


def save_state(state: TaskState, path: str) -> None:
    vocab = state.vocab
    parts = [_MAGIC, struct.pack("<I", _VERSION)]
    parts.append(struct.pack("<III", state.task_index, vocab.dim, len(vocab.entries)))
    for e in vocab.entries:
        parts.append(_pack_name(e.name))
        parts.append(struct.pack("<B", _STATUS_CODE[e.status]))
        parts.append(e.embedding.astype("<f4").tobytes())
    for w in (vocab.wildcard_obj, vocab.wildcard_unk):
        if w is None:
            parts.append(b"\x00")
        else:
            parts.append(b"\x01" + w.astype("<f4").tobytes())
    parts.append(struct.pack("<I", len(state.history)))
    for task, names in state.history:
        parts.append(struct.pack("<IH", task, len(names)))
        for n in names:
            parts.append(_pack_name(n))
    body = b"".join(parts)
    atomic_write_bytes(path, body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, blob: bytes, path: str) -> None:
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        end = self.off + n
        if end > len(self.blob):
            raise TruncatedFileError(f"{self.path}: file ends inside a record")
        out = self.blob[self.off : end]
        self.off = end
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def name(self) -> str:
        n = self.u16()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FileFormatError(f"{self.path}: undecodable name") from e

    def f32vec(self, dim: int) -> np.ndarray:
        raw = self.take(4 * dim)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def load_state(path: str) -> TaskState:
    """Read a UOWS file back into a TaskState.

    Failure order: unrecognized magic, then version mismatch, then
    structural truncation, then checksum, then semantic validity. A
    payload bit flip therefore surfaces as ChecksumError, not as a
    validation error on garbage values.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise FileFormatError(f"{path}: not a task state file")
    if len(blob) < 8:
        raise TruncatedFileError(f"{path}: file ends inside the header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {_VERSION}")

    # Structural pass: raw pieces only, bounds-checked.
    r = _Reader(blob, path)
    r.take(8)
    task_index = r.u32()
    dim = r.u32()
    n_entries = r.u32()
    raw_entries: list[tuple[str, int, np.ndarray]] = []
    for _ in range(n_entries):
        nm = r.name()
        raw_entries.append((nm, r.u8(), r.f32vec(dim)))
    wildcards: list[np.ndarray | None] = []
    for _ in range(2):
        wildcards.append(r.f32vec(dim) if r.u8() else None)
    history: list[tuple[int, list[str]]] = []
    for _ in range(r.u32()):
        task = r.u32()
        history.append((task, [r.name() for _ in range(r.u16())]))
    stored_crc = r.u32()
    if r.off != len(blob):
        raise FileFormatError(f"{path}: {len(blob) - r.off} trailing bytes")
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise ChecksumError(f"{path}: checksum mismatch")

    # Semantic pass: now the bytes are trusted.
    try:
        entries = []
        for i, (nm, code, emb) in enumerate(raw_entries):
            if code not in _CODE_STATUS:
                raise ValueError(f"bad status byte {code}")
            entries.append(CategoryEntry(i, nm, emb, _CODE_STATUS[code]))
        vocab = Vocabulary(entries, wildcards[0], wildcards[1])
        return TaskState(task_index, vocab, history)
    except ValueError as e:
        raise FileFormatError(f"{path}: invalid content: {e}") from e
