"""Exact-search gallery index and evaluation protocols.

Similarity is cosine (higher is better).  All metrics are count-based so
vectorized and brute-force evaluations agree exactly.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import EPS_NORM, EmbeddingSet, as_vector, normalize_rows
from .ensemble import FusedGalleryItem, RejectionMode, RejectionPolicy, apply_rejection
from .errors import DegenerateVector, DimensionMismatch, EmptyGallery, EmptyScores, InvalidConfig

CSV_COLUMNS = ("curve", "x_kind", "x", "value", "policy", "seed_count")


@dataclass(frozen=True, eq=False)
class GalleryIndex:
    item_ids: np.ndarray
    labels: np.ndarray
    units: np.ndarray
    sentinel: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.units.shape[1])

    def __len__(self) -> int:
        return int(self.units.shape[0])


def build_index(vectors, labels=None, item_ids=None) -> GalleryIndex:
    """Normalize gallery vectors; zero-norm ones become sentinels scored -inf.

    ``vectors`` may be an array (with ``labels`` and ``item_ids``), an
    :class:`EmbeddingSet`, or a list of :class:`FusedGalleryItem`.
    """
    if isinstance(vectors, EmbeddingSet):
        labels, item_ids, vectors = vectors.labels, vectors.item_ids, vectors.as_float64()
    elif isinstance(vectors, (list, tuple)) and vectors and isinstance(vectors[0], FusedGalleryItem):
        items = vectors
        labels = [it.class_label for it in items]
        item_ids = [it.item_id for it in items]
        if len({it.fused.shape for it in items}) != 1:
            raise DimensionMismatch("fused gallery items have different dims")
        vectors = np.stack([it.fused for it in items])
    if vectors is None or len(vectors) == 0:
        raise EmptyGallery("cannot index an empty gallery")
    try:
        x = np.asarray(vectors, dtype=np.float64)
    except ValueError as exc:
        raise DimensionMismatch("gallery vectors have inconsistent dims") from exc
    if x.ndim != 2:
        raise DimensionMismatch(f"gallery must be 2-D, got shape {x.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    item_ids = np.asarray(item_ids if item_ids is not None else np.arange(len(x)), dtype=np.int64)
    if labels.shape[0] != x.shape[0] or item_ids.shape[0] != x.shape[0]:
        raise DimensionMismatch("labels/item_ids not aligned with vectors")
    units, bad = normalize_rows(x)
    for a in (units, labels, item_ids, bad):
        a.setflags(write=False)
    return GalleryIndex(item_ids, labels, units, bad)


def scores(index: GalleryIndex, queries: np.ndarray) -> np.ndarray:
    """(Q, G) cosine similarities with sentinels at -inf."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != index.dim:
        raise DimensionMismatch(f"query dim {q.shape[1]} != gallery dim {index.dim}")
    qu, bad = normalize_rows(q)
    if bad.any():
        raise DegenerateVector("query vector with (near) zero norm")
    s = qu @ index.units.T
    s[:, index.sentinel] = -np.inf
    return s


def search_top1_batch(index: GalleryIndex, queries: np.ndarray, query_item_ids=None
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-1 (labels, scores, gallery positions) for each query.

    Ties go to the lowest item_id.  A query whose item_id equals a gallery
    entry's never retrieves that entry.
    """
    if len(index) == 0:
        raise EmptyGallery("empty gallery")
    s = scores(index, queries)
    eligible = np.ones_like(s, dtype=bool)
    if query_item_ids is not None:
        qids = np.asarray(query_item_ids, dtype=np.int64)
        eligible = qids[:, None] != index.item_ids[None, :]
        if not eligible.any(axis=1).all():
            raise EmptyGallery("a query has no eligible gallery entries after self-exclusion")
    masked = np.where(eligible, s, -np.inf)
    best = masked.max(axis=1)
    tie = eligible & (masked == best[:, None])
    big = np.iinfo(np.int64).max
    pos = np.where(tie, index.item_ids[None, :], big).argmin(axis=1)
    return index.labels[pos], best, pos


def search_top1(index: GalleryIndex, query, query_item_id: int | None = None) -> tuple[int, float]:
    if len(index) == 0:
        raise EmptyGallery("empty gallery")
    q = as_vector(query, index.dim)
    if np.linalg.norm(q) <= EPS_NORM:
        raise DegenerateVector("query vector with (near) zero norm")
    labels, best, _ = search_top1_batch(index, q[None, :], None if query_item_id is None else [query_item_id])
    return int(labels[0]), float(best[0])


@dataclass(frozen=True)
class RocOperatingPoint:
    far_target: float
    threshold: float
    tar: float
    achieved_far: float

    def as_dict(self) -> dict:
        return {"far_target": self.far_target, "threshold": self.threshold, "tar": self.tar,
                "achieved_far": self.achieved_far}


def far_threshold(impostor: np.ndarray, far: float) -> float:
    """Accept iff score > threshold, where threshold is the (floor(far*K)+1)-th largest impostor score."""
    imp = np.asarray(impostor, dtype=np.float64).ravel()
    if imp.size == 0:
        raise EmptyScores("no impostor scores")
    if not 0 < far <= 1:
        raise InvalidConfig("far must be in (0, 1]")
    k = imp.size
    allowed = int(np.floor(far * k + 1e-9))
    if allowed >= k:
        return -np.inf
    return float(np.sort(imp)[::-1][allowed])


def tar_at_far_verification(genuine, impostor, far: float) -> RocOperatingPoint:
    gen = np.asarray(genuine, dtype=np.float64).ravel()
    imp = np.asarray(impostor, dtype=np.float64).ravel()
    if gen.size == 0 or imp.size == 0:
        raise EmptyScores("genuine and impostor scores must be nonempty")
    t = far_threshold(imp, far)
    return RocOperatingPoint(float(far), t, float(np.mean(gen > t)), float(np.mean(imp > t)))


@dataclass(frozen=True, eq=False)
class ProbeSet:
    mated: np.ndarray
    mated_labels: np.ndarray
    nonmated: np.ndarray
    nonmated_labels: np.ndarray | None = None
    mated_ids: np.ndarray | None = None
    nonmated_ids: np.ndarray | None = None

    @classmethod
    def from_sets(cls, mated: EmbeddingSet, nonmated: EmbeddingSet) -> "ProbeSet":
        return cls(mated.as_float64(), mated.labels, nonmated.as_float64(), nonmated.labels,
                   mated.item_ids, nonmated.item_ids)

    def check(self, index: GalleryIndex) -> None:
        enrolled = set(index.labels.tolist())
        if not set(np.asarray(self.mated_labels).tolist()) <= enrolled:
            raise InvalidConfig("a mated probe's class is not enrolled in the gallery")
        if self.nonmated_labels is not None and set(np.asarray(self.nonmated_labels).tolist()) & enrolled:
            raise InvalidConfig("a nonmated probe's class is enrolled in the gallery")


def open_set_search_eval(index: GalleryIndex, probes: ProbeSet, far: float, check: bool = True) -> RocOperatingPoint:
    """1:N open-set TAR at the FAR set by nonmated top-1 scores.

    A mated probe counts as accepted only if its top-1 score clears the
    threshold and the top-1 entry carries the probe's class.
    """
    if len(index) == 0:
        raise EmptyGallery("empty gallery")
    if len(probes.nonmated) == 0:
        raise EmptyScores("no nonmated probes")
    if check:
        probes.check(index)
    _, non_top, _ = search_top1_batch(index, probes.nonmated)
    t = far_threshold(non_top, far)
    achieved = float(np.mean(non_top > t))
    if len(probes.mated) == 0:
        return RocOperatingPoint(float(far), t, 0.0, achieved)
    lab, top, _ = search_top1_batch(index, probes.mated)
    hit = (lab == np.asarray(probes.mated_labels)) & (top > t)
    return RocOperatingPoint(float(far), t, float(np.mean(hit)), achieved)


def recall_at_1(index: GalleryIndex, queries, labels, query_item_ids=None) -> float:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[0] == 0:
        raise InvalidConfig("no queries")
    lab, _, _ = search_top1_batch(index, q, query_item_ids)
    return float(np.mean(lab == np.asarray(labels)))


def verification_scores(index: GalleryIndex, queries, labels) -> tuple[np.ndarray, np.ndarray]:
    """Genuine and impostor scores over all (query, gallery item) pairs."""
    s = scores(index, queries)
    same = np.asarray(labels)[:, None] == index.labels[None, :]
    live = ~index.sentinel[None, :]
    return s[same & live], s[~same & live]


@dataclass(frozen=True)
class RiskCoveragePoint:
    coverage: float
    metric_value: float
    policy: dict
    rule: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"coverage": self.coverage, "metric_value": self.metric_value, "policy": self.policy,
                "rule": self.rule}


def _eval_retained(retained: Sequence[FusedGalleryItem], data, metric: str, far: float) -> tuple[float, dict]:
    index = build_index(list(retained))
    if metric == "open_set_tar":
        p: ProbeSet = data
        keep = np.isin(p.mated_labels, index.labels)
        moved = int((~keep).sum())
        probes = ProbeSet(
            p.mated[keep], np.asarray(p.mated_labels)[keep],
            np.concatenate([p.nonmated, p.mated[~keep]]),
            None,
        )
        point = open_set_search_eval(index, probes, far, check=False)
        return point.tar, {"reclassified_as_nonmated": moved}
    vecs, labels, ids = data
    keep = np.isin(labels, index.labels)
    if not keep.any():
        raise EmptyScores("every query class was rejected from the gallery")
    return (
        recall_at_1(index, np.asarray(vecs)[keep], np.asarray(labels)[keep],
                    None if ids is None else np.asarray(ids)[keep]),
        {"dropped_queries": int((~keep).sum())},
    )


def risk_coverage_curve(items: Sequence[FusedGalleryItem], data, metric: str, coverages: Sequence[float],
                        policy: str = "variance", seeds: Sequence[int] = (0,), far: float = 0.01
                        ) -> list[RiskCoveragePoint]:
    """Metric after rejecting gallery items down to each coverage.

    ``data`` is a :class:`ProbeSet` for ``open_set_tar`` and a
    ``(vectors, labels, item_ids)`` triple for ``recall_at_1``.  For
    ``open_set_tar`` mated probes whose class lost all gallery items become
    nonmated; for ``recall_at_1`` such queries are dropped.  The random
    policy averages the metric over ``seeds``.
    """
    if metric not in ("open_set_tar", "recall_at_1"):
        raise InvalidConfig(f"unknown metric {metric!r}")
    if policy not in ("variance", "random"):
        raise InvalidConfig(f"unknown policy {policy!r}")
    covs = [float(c) for c in coverages]
    if not covs or any(not 0 < c <= 1 for c in covs) or any(a <= b for a, b in zip(covs, covs[1:])):
        raise InvalidConfig("coverages must be strictly decreasing values in (0, 1]")
    if policy == "random" and not seeds:
        raise InvalidConfig("random policy needs at least one seed")
    items = list(items)
    out = []
    for c in covs:
        if policy == "variance":
            retained, _ = apply_rejection(items, RejectionPolicy(RejectionMode.COVERAGE_QUANTILE, c))
            value, rule = _eval_retained(retained, data, metric, far)
            desc = {"mode": "variance", "seed_count": 1}
        else:
            vals, rules = [], []
            for sd in seeds:
                retained, _ = apply_rejection(items, RejectionPolicy(RejectionMode.RANDOM, c, sd))
                v, r = _eval_retained(retained, data, metric, far)
                vals.append(v)
                rules.append(r)
            value = float(np.mean(vals))
            key = next(iter(rules[0]))
            rule = {key: float(np.mean([r[key] for r in rules]))}
            desc = {"mode": "random", "seed_count": len(seeds), "seeds": [int(s) for s in seeds]}
        out.append(RiskCoveragePoint(c, float(value), desc, rule))
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def report_rows(results: dict) -> list[tuple]:
    rows = []
    for curve in results.get("curves", []):
        for p in curve["points"]:
            rows.append((curve["curve"], curve["x_kind"], p["x"], p["value"], p.get("policy", ""),
                         p.get("seed_count", 1)))
    return rows


def render_csv(results: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in report_rows(results):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def export_report(results: dict, path) -> tuple[Path, Path]:
    """Write ``results`` as JSON at ``path`` and as CSV next to it.

    ``results`` holds ``config`` (echoed verbatim) and ``curves``, a list of
    ``{"curve", "x_kind", "points": [{"x", "value", "policy", "seed_count"}]}``.
    The JSON keeps full float precision; CSV floats use 9 significant digits.
    """
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    path.write_text(json.dumps(results, indent=1, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    csv_path.write_bytes(render_csv(results).encode("utf-8"))
    return path, csv_path
