"""Fusion of transformed gallery embeddings, per-item uncertainty and rejection."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import EPS_NORM, DistanceMetric, EmbeddingSet, normalize_rows, read_embedding_set, write_embedding_set
from .errors import DegenerateVector, DimensionMismatch, InsufficientModels, InvalidConfig


@dataclass(frozen=True, eq=False)
class TransformedStack:
    """The N transformed embeddings of one gallery item, ordered by model index."""

    item_id: int
    class_label: int
    per_model: np.ndarray
    model_ids: tuple[str, ...] = ()

    def __post_init__(self):
        arr = np.atleast_2d(np.asarray(self.per_model, dtype=np.float64))
        if arr.shape[0] < 1:
            raise InsufficientModels("stack needs at least one transformed embedding")
        if arr.shape[1] < 2:
            raise DimensionMismatch("transformed embeddings need dim >= 2")
        if self.model_ids and len(self.model_ids) != arr.shape[0]:
            raise InvalidConfig("one model id per transformed embedding")
        object.__setattr__(self, "per_model", arr)


@dataclass(frozen=True, eq=False)
class FusedGalleryItem:
    item_id: int
    class_label: int
    fused: np.ndarray
    variance: float | None
    contributing_models: tuple[str, ...] = ()
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fused", np.asarray(self.fused, dtype=np.float64))

    @property
    def unit(self) -> np.ndarray:
        """Normalized view used for scoring (zeros when degenerate)."""
        return normalize_rows(self.fused[None, :])[0][0]


def variance(stack: TransformedStack | np.ndarray, metric: DistanceMetric | str = DistanceMetric.COSINE) -> float:
    """Mean pairwise distance between the transformed embeddings of one item.

    Cosine distances are taken between normalized members, so the value is
    invariant to per-member positive scaling.
    """
    x = stack.per_model if isinstance(stack, TransformedStack) else np.atleast_2d(np.asarray(stack, float))
    n = x.shape[0]
    if n < 2:
        raise InsufficientModels("variance needs at least two transformed embeddings")
    if np.any(np.linalg.norm(x, axis=1) <= EPS_NORM):
        raise DegenerateVector("a transformed embedding has (near) zero norm")
    metric = DistanceMetric(metric)
    iu = np.triu_indices(n, k=1)
    if metric is DistanceMetric.COSINE:
        u = normalize_rows(x)[0]
        d = np.clip(1.0 - (u @ u.T)[iu], 0.0, 2.0)
    else:
        diff = x[:, None, :] - x[None, :, :]
        d = np.linalg.norm(diff, axis=2)[iu]
    return float(d.mean())


def batch_variance(per_model: np.ndarray, metric: DistanceMetric | str = DistanceMetric.COSINE) -> np.ndarray:
    """:func:`variance` for a (N, G, m) array of stacks, returning G values."""
    per_model = np.asarray(per_model, dtype=np.float64)
    n = per_model.shape[0]
    if n < 2:
        raise InsufficientModels("variance needs at least two transformed embeddings")
    if np.any(np.linalg.norm(per_model, axis=2) <= EPS_NORM):
        raise DegenerateVector("a transformed embedding has (near) zero norm")
    metric = DistanceMetric(metric)
    total = np.zeros(per_model.shape[1])
    units = normalize_rows(per_model)[0]
    for i in range(n):
        for j in range(i + 1, n):
            if metric is DistanceMetric.COSINE:
                total += np.clip(1.0 - np.sum(units[i] * units[j], axis=1), 0.0, 2.0)
            else:
                total += np.linalg.norm(per_model[i] - per_model[j], axis=1)
    return total / (n * (n - 1) / 2)


def fuse_mean(stack: TransformedStack, metric: DistanceMetric | str = DistanceMetric.COSINE) -> FusedGalleryItem:
    """Average the transformed embeddings; degenerate means are flagged, not raised."""
    fused = stack.per_model.mean(axis=0)
    u = variance(stack, metric) if stack.per_model.shape[0] >= 2 else None
    return FusedGalleryItem(
        int(stack.item_id), int(stack.class_label), fused, u, tuple(stack.model_ids),
        bool(np.linalg.norm(fused) <= EPS_NORM),
    )


def fuse_sets(transformed: Sequence[EmbeddingSet] | np.ndarray, labels=None, item_ids=None,
              model_ids: Sequence[str] = ()) -> list[FusedGalleryItem]:
    """Vectorized :func:`fuse_mean` over item-aligned transformed embeddings.

    ``transformed`` is either a list of item-aligned EmbeddingSets or a
    (N, G, m) array accompanied by ``labels`` and ``item_ids``.
    """
    if isinstance(transformed, np.ndarray):
        arr = np.asarray(transformed, dtype=np.float64)
        if labels is None or item_ids is None:
            raise InvalidConfig("labels and item_ids are required with an array input")
    else:
        sets = list(transformed)
        if not sets:
            raise InsufficientModels("no transformed sets")
        arr = np.stack([s.as_float64() for s in sets])
        labels, item_ids = sets[0].labels, sets[0].item_ids
        model_ids = model_ids or tuple(s.model_id for s in sets)
    fused = arr.mean(axis=0)
    var = batch_variance(arr) if arr.shape[0] >= 2 else [None] * arr.shape[1]
    norms = np.linalg.norm(fused, axis=1)
    return [
        FusedGalleryItem(int(i), int(y), f, None if u is None else float(u), tuple(model_ids), bool(nv <= EPS_NORM))
        for i, y, f, u, nv in zip(item_ids, labels, fused, var, norms)
    ]


class RejectionMode(str, enum.Enum):
    VARIANCE_THRESHOLD = "variance_threshold"
    COVERAGE_QUANTILE = "coverage_quantile"
    RANDOM = "random"


@dataclass(frozen=True)
class RejectionPolicy:
    mode: RejectionMode
    value: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", RejectionMode(self.mode))
        if self.mode is RejectionMode.VARIANCE_THRESHOLD:
            if not self.value >= 0:
                raise InvalidConfig("variance threshold must be >= 0")
        elif not 0 < self.value <= 1:
            raise InvalidConfig("coverage must be in (0, 1]")

    def describe(self) -> dict:
        d = {"mode": self.mode.value, "value": self.value}
        if self.mode is RejectionMode.RANDOM:
            d["seed"] = self.seed
        return d


def retained_count(coverage: float, n: int) -> int:
    # the epsilon absorbs float error in products such as 0.7 * 10
    return int(np.floor(coverage * n + 1e-9))


def apply_rejection(items: Sequence[FusedGalleryItem], policy: RejectionPolicy
                    ) -> tuple[list[FusedGalleryItem], list[FusedGalleryItem]]:
    """Split gallery items into (retained, rejected), each in input order."""
    items = list(items)
    g = len(items)
    if policy.mode is RejectionMode.RANDOM:
        k = retained_count(policy.value, g)
        rng = np.random.default_rng([int(policy.seed) & 0xFFFFFFFFFFFFFFFF, 0x52])
        keep = set(rng.choice(g, size=k, replace=False).tolist()) if k else set()
    else:
        if any(it.variance is None for it in items):
            raise InsufficientModels("variance-based rejection needs variance on every item")
        if policy.mode is RejectionMode.VARIANCE_THRESHOLD:
            keep = {i for i, it in enumerate(items) if it.variance <= policy.value}
        else:
            k = retained_count(policy.value, g)
            order = sorted(range(g), key=lambda i: (items[i].variance, items[i].item_id))
            keep = set(order[:k])
    retained = [it for i, it in enumerate(items) if i in keep]
    rejected = [it for i, it in enumerate(items) if i not in keep]
    return retained, rejected


def fused_to_set(items: Sequence[FusedGalleryItem], query_model_id: str) -> EmbeddingSet:
    return EmbeddingSet(
        f"fused:{query_model_id}",
        np.stack([it.fused for it in items]),
        np.array([it.class_label for it in items], dtype=np.int64),
        np.array([it.item_id for it in items], dtype=np.int64),
    )


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".fused.json")


def write_fused_gallery(items: Sequence[FusedGalleryItem], query_model_id: str, path) -> None:
    """Fused vectors in the core binary format plus a JSON sidecar of variances."""
    path = Path(path)
    write_embedding_set(fused_to_set(items, query_model_id), path)
    side = {
        "query_model_id": query_model_id,
        "items": [
            {
                "item_id": it.item_id,
                "variance": it.variance,
                "contributing_models": list(it.contributing_models),
                "degenerate": it.degenerate,
            }
            for it in items
        ],
    }
    _sidecar_path(path).write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")


def read_fused_gallery(path) -> list[FusedGalleryItem]:
    path = Path(path)
    s = read_embedding_set(path)
    side_path = _sidecar_path(path)
    meta = {}
    if side_path.exists():
        meta = {d["item_id"]: d for d in json.loads(side_path.read_text())["items"]}
    out = []
    for v, y, i in zip(s.as_float64(), s.labels, s.item_ids):
        d = meta.get(int(i), {})
        out.append(FusedGalleryItem(
            int(i), int(y), v, d.get("variance"), tuple(d.get("contributing_models", ())),
            bool(np.linalg.norm(v) <= EPS_NORM),
        ))
    return out
