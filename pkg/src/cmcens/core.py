"""Embedding vectors and sets, distances, template pooling and the binary set format.

Vectors are plain 1-D numpy arrays.  An :class:`EmbeddingSet` keeps its
coordinates as float32 so that writing and reading a set is bit-exact; all
arithmetic elsewhere promotes to float64.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateVector, DimensionMismatch, FormatError, InvalidConfig

EPS_NORM = 1e-9

MAGIC = b"CMCE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class DistanceMetric(str, enum.Enum):
    COSINE = "cosine_distance"
    EUCLIDEAN = "euclidean"


def as_vector(v, dim: int | None = None) -> np.ndarray:
    """Validate ``v`` as a finite float64 vector of length >= 2."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise InvalidConfig("embedding vectors need dim >= 2")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatch(f"expected dim {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidConfig("embedding vector has non-finite coordinates")
    return arr


def l2_normalize(v, eps: float = EPS_NORM) -> np.ndarray:
    v = as_vector(v)
    n = float(np.linalg.norm(v))
    if n <= eps:
        raise DegenerateVector(f"vector norm {n:.3g} <= {eps:g}")
    return v / n


def normalize_rows(x: np.ndarray, eps: float = EPS_NORM) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize ``x``; returns (unit rows, degenerate mask).

    Degenerate rows come back as zeros instead of raising, so callers can keep
    positional alignment and decide what to do with them.
    """
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    bad = norms[..., 0] <= eps
    safe = np.where(norms <= eps, 1.0, norms)
    out = np.where(bad[..., None], 0.0, x / safe)
    return out, bad


def cosine_similarity(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b, a.shape[0])
    return float(np.dot(l2_normalize(a), l2_normalize(b)))


def distance(metric: DistanceMetric | str, a, b) -> float:
    """Cosine distance (1 - cos, in [0, 2]) or Euclidean distance."""
    metric = DistanceMetric(metric)
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dims differ: {a.shape[0]} vs {b.shape[0]}")
    if metric is DistanceMetric.EUCLIDEAN:
        return float(np.linalg.norm(a - b))
    d = 1.0 - float(np.dot(l2_normalize(a), l2_normalize(b)))
    return min(max(d, 0.0), 2.0)


@dataclass(frozen=True)
class Template:
    class_label: int
    members: np.ndarray

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.members, dtype=np.float64))
        if m.shape[0] < 1 or m.size == 0:
            raise InvalidConfig("a template needs at least one member")
        if self.class_label < 0:
            raise InvalidConfig("class_label must be non-negative")
        object.__setattr__(self, "members", m)


def aggregate_template(t: Template | np.ndarray) -> np.ndarray:
    """Mean-pool the members of a template, then L2-normalize."""
    members = t.members if isinstance(t, Template) else np.atleast_2d(np.asarray(t, dtype=np.float64))
    if members.shape[0] == 0:
        raise InvalidConfig("a template needs at least one member")
    for row in members:
        as_vector(row, members.shape[1])
    return l2_normalize(members.mean(axis=0))


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Labeled float32 embeddings from one model.

    Rows of ``vectors`` are aligned with ``labels`` and ``item_ids``.
    """

    model_id: str
    vectors: np.ndarray
    labels: np.ndarray
    item_ids: np.ndarray
    class_names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        vec = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vec.ndim != 2:
            raise DimensionMismatch(f"vectors must be 2-D, got shape {vec.shape}")
        if vec.shape[1] < 2:
            raise InvalidConfig("embedding dim must be >= 2")
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        ids = np.asarray(self.item_ids, dtype=np.int64).reshape(-1)
        if labels.shape[0] != vec.shape[0] or ids.shape[0] != vec.shape[0]:
            raise DimensionMismatch("vectors, labels and item_ids must have equal length")
        if not np.all(np.isfinite(vec)):
            raise InvalidConfig("embedding set contains non-finite coordinates")
        if labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF):
            raise InvalidConfig("class labels must fit in u32")
        if ids.size and (ids.min() < 0 or ids.max() > 0xFFFFFFFF):
            raise InvalidConfig("item ids must fit in u32")
        if np.unique(ids).size != ids.size:
            raise InvalidConfig("item ids must be unique within a set")
        for arr in (vec, labels, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "item_ids", ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.model_id == other.model_id
            and self.vectors.shape == other.vectors.shape
            and np.array_equal(self.vectors.view(np.uint32), other.vectors.view(np.uint32))
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.item_ids, other.item_ids)
        )

    def as_float64(self) -> np.ndarray:
        return self.vectors.astype(np.float64)

    def subset(self, mask_or_index) -> "EmbeddingSet":
        idx = mask_or_index if isinstance(mask_or_index, slice) else np.asarray(mask_or_index)
        return EmbeddingSet(self.model_id, self.vectors[idx], self.labels[idx], self.item_ids[idx], self.class_names)

    def sorted_by_id(self) -> "EmbeddingSet":
        return self.subset(np.argsort(self.item_ids, kind="stable"))


def _item_dtype(dim: int) -> np.dtype:
    return np.dtype([("item_id", "<u4"), ("label", "<u4"), ("v", "<f4", (dim,))])


def encode_embedding_set(s: EmbeddingSet) -> bytes:
    mid = s.model_id.encode("utf-8")
    if len(mid) > 0xFFFF:
        raise InvalidConfig("model_id too long")
    rec = np.empty(len(s), dtype=_item_dtype(s.dim))
    rec["item_id"] = s.item_ids
    rec["label"] = s.labels
    rec["v"] = s.vectors
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, len(s), s.dim) + struct.pack("<H", len(mid)) + mid
    return head + rec.tobytes()


def decode_embedding_set(buf: bytes) -> EmbeddingSet:
    if len(buf) < _HEADER.size + 2:
        raise FormatError("file too short for header")
    magic, version, count, dim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if dim < 2:
        raise FormatError(f"invalid dim {dim}")
    (mlen,) = struct.unpack_from("<H", buf, _HEADER.size)
    off = _HEADER.size + 2
    if len(buf) < off + mlen:
        raise FormatError("truncated model_id")
    try:
        model_id = buf[off : off + mlen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("model_id is not valid UTF-8") from exc
    off += mlen
    dt = _item_dtype(dim)
    payload = len(buf) - off
    if payload < count * dt.itemsize:
        raise FormatError(f"truncated payload: {payload} bytes for {count} items of dim {dim}")
    if payload != count * dt.itemsize:
        if count and payload % count == 0:
            raise DimensionMismatch(f"declared dim {dim} does not match payload record size {payload // count}")
        raise FormatError(f"{payload - count * dt.itemsize} trailing bytes after payload")
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=off)
    return EmbeddingSet(
        model_id,
        rec["v"].copy(),
        rec["label"].astype(np.int64),
        rec["item_id"].astype(np.int64),
    )


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".classes.json")


def write_embedding_set(s: EmbeddingSet, path) -> None:
    """Write ``s`` in the CMCE binary format, plus a class-name manifest when it has one."""
    path = Path(path)
    path.write_bytes(encode_embedding_set(s))
    if s.class_names:
        names = {str(k): v for k, v in sorted(s.class_names.items())}
        _manifest_path(path).write_text(json.dumps(names, indent=1, sort_keys=True) + "\n")


def read_embedding_set(path) -> EmbeddingSet:
    path = Path(path)
    s = decode_embedding_set(path.read_bytes())
    mp = _manifest_path(path)
    if mp.exists():
        names = {int(k): v for k, v in json.loads(mp.read_text()).items()}
        s = EmbeddingSet(s.model_id, s.vectors, s.labels, s.item_ids, names)
    return s


def check_aligned(sets: Sequence[EmbeddingSet]) -> None:
    """Check that ``sets`` are aligned item-by-item (same ids and labels, same order)."""
    if not sets:
        raise InvalidConfig("no embedding sets given")
    ref = sets[0]
    for s in sets[1:]:
        if len(s) != len(ref) or not np.array_equal(s.item_ids, ref.item_ids):
            raise InvalidConfig(f"set {s.model_id!r} is not item-aligned with {ref.model_id!r}")
        if not np.array_equal(s.labels, ref.labels):
            raise InvalidConfig(f"set {s.model_id!r} disagrees on labels with {ref.model_id!r}")
