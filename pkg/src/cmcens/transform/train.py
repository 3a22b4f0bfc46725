"""Mini-batch training of transformation networks."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core import EmbeddingSet, check_aligned, normalize_rows
from ..errors import DimensionMismatch, InvalidConfig, NonFiniteLoss
from .loss import Fusion, Optimizer, PairBatch, TrainConfig, evaluate, fused_forward, named_parameters
from .net import ClassifierHead, TransformNet, init_head, init_transform

log = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    M2M = "m2m"
    UNIFIED = "unified"
    E2E_MEAN = "e2e_mean"
    E2E_WEIGHTED = "e2e_weighted"
    CONCAT = "concat"

    @property
    def fusion(self) -> Fusion:
        return {
            Variant.M2M: Fusion.INDEPENDENT,
            Variant.UNIFIED: Fusion.INDEPENDENT,
            Variant.E2E_MEAN: Fusion.E2E_MEAN,
            Variant.E2E_WEIGHTED: Fusion.E2E_WEIGHTED,
            Variant.CONCAT: Fusion.CONCAT,
        }[self]


def sub_seed(seed: int, *tags: int) -> int:
    """Independent 63-bit seed derived from ``seed`` and integer tags."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(t) for t in tags]])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.params, self.cfg, self.t = params, cfg, 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1**self.t
        bc2 = 1 - c.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            p -= c.learning_rate * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.adam_eps)


class _SGDMomentum:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.params, self.cfg = params, cfg
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            self.vel[k] = self.cfg.momentum * self.vel[k] + grads[k]
            p -= self.cfg.learning_rate * self.vel[k]


@dataclass
class TrainedTransform:
    variant: Variant
    nets: list[TransformNet]
    head: ClassifierHead
    cfg: TrainConfig
    query_net: TransformNet | None = None
    loss_history: list[float] = field(default_factory=list)
    gallery_model_ids: list[str] = field(default_factory=list)
    query_model_id: str = ""
    class_labels: np.ndarray | None = None

    @property
    def out_dim(self) -> int:
        return self.nets[0].out_dim

    def per_model(self, gallery: Sequence[np.ndarray]) -> list[np.ndarray] | None:
        """Raw transformed embeddings, one array per gallery model (None for concat)."""
        if self.variant is Variant.CONCAT:
            return None
        return [net(np.asarray(g, dtype=np.float64)) for net, g in zip(self.nets, gallery)]

    def fused(self, gallery: Sequence[np.ndarray]) -> np.ndarray:
        """The variant's own fused gallery embedding (raw, not normalized)."""
        return fused_forward(self.nets, [np.asarray(g, dtype=np.float64) for g in gallery], self.variant.fusion)[0]

    def query(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        return self.query_net(q) if self.query_net is not None else q


def _batch_from_sets(gallery_sets: Sequence[EmbeddingSet], query_set: EmbeddingSet) -> tuple[PairBatch, np.ndarray]:
    check_aligned([*gallery_sets, query_set])
    classes, y = np.unique(query_set.labels, return_inverse=True)
    batch = PairBatch([g.as_float64() for g in gallery_sets], query_set.as_float64(), y)
    return batch, classes


def class_mean_head(query: np.ndarray, labels: np.ndarray, num_classes: int, scale: float) -> ClassifierHead | None:
    """Head whose rows are the normalized per-class means of the query embeddings.

    Starting the shared head at the query-space class centers keeps the
    classification term aligned with the fixed (or identity-initialized)
    query side from the first step.  Returns None if a class mean vanishes.
    """
    units = normalize_rows(query)[0]
    means = np.zeros((num_classes, units.shape[1]))
    np.add.at(means, labels, units)
    if np.any(np.linalg.norm(means, axis=1) <= 1e-9):
        return None
    return ClassifierHead(normalize_rows(means)[0], scale)


def build_model(variant: Variant | str, gallery_dims: Sequence[int], query_dim: int, num_classes: int,
                cfg: TrainConfig) -> tuple[list[TransformNet], ClassifierHead, TransformNet | None]:
    variant = Variant(variant)
    m = query_dim
    if variant in (Variant.M2M, Variant.UNIFIED) and len(gallery_dims) != 1:
        raise InvalidConfig(f"{variant.value} trains one transform per gallery model")
    if variant in (Variant.E2E_MEAN, Variant.E2E_WEIGHTED, Variant.CONCAT) and len(gallery_dims) < 2:
        raise InvalidConfig(f"{variant.value} needs at least two gallery models")
    if variant is Variant.CONCAT:
        nets = [init_transform(sum(gallery_dims), m, sub_seed(cfg.seed, 1, 0))]
    else:
        weighted = variant is Variant.E2E_WEIGHTED
        nets = [init_transform(n, m, sub_seed(cfg.seed, 1, i), weighted) for i, n in enumerate(gallery_dims)]
    query_net = init_transform(query_dim, m, sub_seed(cfg.seed, 2)) if variant is Variant.UNIFIED else None
    head = init_head(num_classes, m, sub_seed(cfg.seed, 3), cfg.head_scale)
    return nets, head, query_net


def train(variant: Variant | str, gallery_sets: Sequence[EmbeddingSet], query_set: EmbeddingSet,
          cfg: TrainConfig | None = None) -> TrainedTransform:
    """Fit transformation nets mapping ``gallery_sets`` into ``query_set``'s space.

    All sets must be item-aligned.  Training is deterministic given ``cfg.seed``.
    Trained parameters are rounded to float32 precision so that saved parameter
    files reproduce them exactly.
    """
    cfg = cfg or TrainConfig()
    variant = Variant(variant)
    if not gallery_sets:
        raise InvalidConfig("no gallery sets")
    if any(g.dim < 2 for g in gallery_sets):
        raise DimensionMismatch("bad gallery dim")
    batch, classes = _batch_from_sets(gallery_sets, query_set)
    nets, head, query_net = build_model(variant, [g.dim for g in gallery_sets], query_set.dim, len(classes), cfg)
    head = class_mean_head(batch.query, batch.labels, len(classes), cfg.head_scale) or head
    params = named_parameters(nets, head, query_net)
    opt = (_Adam if Optimizer(cfg.optimizer) is Optimizer.ADAPTIVE_MOMENTS else _SGDMomentum)(params, cfg)
    rng = np.random.default_rng(sub_seed(cfg.seed, 4))
    fusion = variant.fusion
    k = len(batch)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(k)
        total = 0.0
        for start in range(0, k, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            terms, grads = evaluate(nets, head, batch.take(idx), cfg, fusion, query_net)
            loss = terms["total"]
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteLoss(
                    f"{variant.value}: non-finite loss/gradient at epoch {epoch}, batch offset {start} "
                    f"(terms={terms}, lr={cfg.learning_rate})"
                )
            opt.step(grads)
            total += loss * len(idx)
        history.append(total / k)
        if epoch % 50 == 0:
            log.debug("%s epoch %d loss %.5f", variant.value, epoch, history[-1])
    for p in params.values():
        p[...] = p.astype(np.float32)
    return TrainedTransform(
        variant, nets, head, cfg, query_net, history,
        [g.model_id for g in gallery_sets], query_set.model_id, classes,
    )
