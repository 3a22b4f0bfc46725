"""Compatibility loss and its analytic gradient.

For each item the fused transformed gallery embedding ``t`` and the query
embedding ``q`` are L2-normalized and scored by a shared cosine classifier.
The loss is

    lambda_sim * mean(1 - cos(t, q))
  + lambda_kl  * mean(KL between softmax(head(t)) and softmax(head(q)))
  + lambda_cls * (mean CE(head(t), y) + mean CE(head(q), y))

where the KL term is symmetric by default, ``0.5 * (KL(p_t||p_q) + KL(p_q||p_t))``.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ..errors import DimensionMismatch, InvalidConfig
from .net import ClassifierHead, TransformNet

_TINY = 1e-12


class Fusion(str, enum.Enum):
    INDEPENDENT = "independent"
    E2E_MEAN = "e2e_mean"
    E2E_WEIGHTED = "e2e_weighted"
    CONCAT = "concat"


class KLMode(str, enum.Enum):
    SYMMETRIC = "symmetric"
    FORWARD = "forward"  # KL(p_t || p_q)
    REVERSE = "reverse"  # KL(p_q || p_t)


class Optimizer(str, enum.Enum):
    SGD_MOMENTUM = "sgd_momentum"
    ADAPTIVE_MOMENTS = "adaptive_moments"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 1e-3
    lambda_sim: float = 1.0
    lambda_kl: float = 1.0
    lambda_cls: float = 1.0
    optimizer: str = Optimizer.ADAPTIVE_MOMENTS.value
    seed: int = 0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    head_scale: float = 16.0
    kl_mode: str = KLMode.SYMMETRIC.value

    def __post_init__(self):
        lams = (self.lambda_sim, self.lambda_kl, self.lambda_cls)
        if any(not lam >= 0 for lam in lams) or not any(lam > 0 for lam in lams):
            raise InvalidConfig("loss weights must be >= 0 with at least one > 0")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise InvalidConfig("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        try:
            Optimizer(self.optimizer)
            KLMode(self.kl_mode)
        except ValueError as exc:
            raise InvalidConfig(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class PairBatch:
    """Item-aligned gallery embeddings (one array per gallery model), query embeddings and labels."""

    gallery: Sequence[np.ndarray]
    query: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.gallery = [np.asarray(g, dtype=np.float64) for g in self.gallery]
        self.query = np.asarray(self.query, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        b = self.labels.shape[0]
        if b == 0:
            raise InvalidConfig("empty batch")
        if any(g.ndim != 2 or g.shape[0] != b for g in self.gallery) or self.query.shape[0] != b:
            raise DimensionMismatch("gallery, query and labels must be aligned")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, idx: np.ndarray) -> "PairBatch":
        return PairBatch([g[idx] for g in self.gallery], self.query[idx], self.labels[idx])


def named_parameters(nets: Sequence[TransformNet], head: ClassifierHead,
                     query_net: TransformNet | None = None) -> dict[str, np.ndarray]:
    """Flat name -> array view of every trainable parameter."""
    out: dict[str, np.ndarray] = {}
    for i, net in enumerate(nets):
        for k, v in net.params.items():
            out[f"g{i}/{k}"] = v
    if query_net is not None:
        for k, v in query_net.params.items():
            out[f"q/{k}"] = v
    out["head/weights"] = head.params["weights"]
    return out


def _normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), _TINY)
    return x / n, n


def _normalize_back(xhat: np.ndarray, norm: np.ndarray, d_xhat: np.ndarray) -> np.ndarray:
    return (d_xhat - xhat * np.sum(xhat * d_xhat, axis=1, keepdims=True)) / norm


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check(nets, batch: PairBatch, fusion: Fusion, head: ClassifierHead, query_net) -> None:
    if not nets:
        raise InvalidConfig("need at least one transformation net")
    if fusion is Fusion.INDEPENDENT and (len(nets) != 1 or len(batch.gallery) != 1):
        raise InvalidConfig("independent fusion trains exactly one net on one gallery model")
    if fusion is Fusion.CONCAT:
        if len(nets) != 1:
            raise InvalidConfig("concat fusion uses a single net over concatenated inputs")
        if nets[0].in_dim != sum(g.shape[1] for g in batch.gallery):
            raise DimensionMismatch("concat net in_dim must equal the summed gallery dims")
    elif fusion in (Fusion.E2E_MEAN, Fusion.E2E_WEIGHTED):
        if len(nets) != len(batch.gallery):
            raise InvalidConfig("joint fusion needs one net per gallery model")
    if fusion is Fusion.E2E_WEIGHTED and not all(n.has_weight_head for n in nets):
        raise InvalidConfig("weighted fusion requires weight heads on every net")
    if fusion is not Fusion.CONCAT:
        for net, g in zip(nets, batch.gallery):
            if net.in_dim != g.shape[1]:
                raise DimensionMismatch(f"net expects dim {net.in_dim}, gallery has {g.shape[1]}")
    m = nets[0].out_dim
    if any(n.out_dim != m for n in nets):
        raise DimensionMismatch("all nets must share an output dim")
    q_dim = query_net.out_dim if query_net is not None else batch.query.shape[1]
    if query_net is not None and query_net.in_dim != batch.query.shape[1]:
        raise DimensionMismatch("query net in_dim does not match query embeddings")
    if q_dim != m or head.weights.shape[1] != m:
        raise DimensionMismatch(f"transformed dim {m}, query dim {q_dim}, head dim {head.weights.shape[1]} differ")
    if batch.labels.min() < 0 or batch.labels.max() >= head.num_classes:
        raise InvalidConfig("labels out of range for the classifier head")


def fused_forward(nets: Sequence[TransformNet], gallery: Sequence[np.ndarray], fusion: Fusion):
    """Fused transformed gallery embeddings plus what the backward pass needs."""
    fusion = Fusion(fusion)
    if fusion is Fusion.CONCAT:
        out, cache = nets[0].forward_batch(np.concatenate(gallery, axis=1))
        return out, {"caches": [cache], "outs": [out]}
    outs, caches = zip(*(net.forward_batch(g) for net, g in zip(nets, gallery)))
    if fusion is Fusion.INDEPENDENT:
        return outs[0], {"caches": list(caches), "outs": list(outs)}
    normed = [_normalize(o) for o in outs]
    units = np.stack([u for u, _ in normed])  # (N, B, m)
    aux = {"caches": list(caches), "outs": list(outs), "normed": normed}
    if fusion is Fusion.E2E_MEAN:
        return units.mean(axis=0), aux
    w = np.stack([net.weight_scalar(o) for net, o in zip(nets, outs)], axis=1)  # (B, N)
    w = w - w.max(axis=1, keepdims=True)
    alpha = np.exp(w)
    alpha /= alpha.sum(axis=1, keepdims=True)
    aux["alpha"] = alpha
    return np.einsum("bn,nbm->bm", alpha, units), aux


def _fused_backward(nets, fusion: Fusion, aux: dict, d_t: np.ndarray) -> list[dict]:
    if fusion in (Fusion.INDEPENDENT, Fusion.CONCAT):
        return [nets[0].backward(aux["caches"][0], d_t)]
    n = len(nets)
    grads = []
    if fusion is Fusion.E2E_MEAN:
        for i, net in enumerate(nets):
            u, nrm = aux["normed"][i]
            grads.append(net.backward(aux["caches"][i], _normalize_back(u, nrm, d_t / n)))
        return grads
    alpha = aux["alpha"]
    d_alpha = np.stack([np.sum(d_t * u, axis=1) for u, _ in aux["normed"]], axis=1)  # (B, N)
    d_w = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1, keepdims=True))
    for i, net in enumerate(nets):
        u, nrm = aux["normed"][i]
        out = aux["outs"][i]
        d_out = _normalize_back(u, nrm, alpha[:, i : i + 1] * d_t) + d_w[:, i : i + 1] * net.params["wh_w"]
        g = net.backward(aux["caches"][i], d_out)
        g["wh_w"] = d_w[:, i] @ out
        g["wh_b"] = np.array([d_w[:, i].sum()])
        grads.append(g)
    return grads


def evaluate(nets: Sequence[TransformNet], head: ClassifierHead, batch: PairBatch, cfg: TrainConfig,
             fusion: Fusion | str = Fusion.INDEPENDENT, query_net: TransformNet | None = None,
             want_grad: bool = True) -> tuple[dict[str, float], dict[str, np.ndarray] | None]:
    """Loss terms (``sim``, ``kl``, ``cls``, ``total``) and, optionally, gradients."""
    fusion = Fusion(fusion)
    nets = list(nets)
    _check(nets, batch, fusion, head, query_net)
    b = len(batch)
    t_raw, aux = fused_forward(nets, batch.gallery, fusion)
    if query_net is not None:
        q_raw, q_cache = query_net.forward_batch(batch.query)
    else:
        q_raw, q_cache = batch.query, None
    t, t_norm = _normalize(t_raw)
    q, q_norm = _normalize(q_raw)

    w_raw = head.weights
    w, w_norm = _normalize(w_raw)
    s = head.scale
    lt = s * t @ w.T
    lq = s * q @ w.T
    log_pt = _log_softmax(lt)
    log_pq = _log_softmax(lq)
    pt, pq = np.exp(log_pt), np.exp(log_pq)
    rows = np.arange(b)

    cos = np.sum(t * q, axis=1)
    l_sim = float(np.mean(1.0 - cos))
    l_cls = float(-np.mean(log_pt[rows, batch.labels]) - np.mean(log_pq[rows, batch.labels]))
    kl_tq = np.sum(pt * (log_pt - log_pq), axis=1)
    kl_qt = np.sum(pq * (log_pq - log_pt), axis=1)
    mode = KLMode(cfg.kl_mode)
    if mode is KLMode.SYMMETRIC:
        l_kl = float(0.5 * np.mean(kl_tq + kl_qt))
    elif mode is KLMode.FORWARD:
        l_kl = float(np.mean(kl_tq))
    else:
        l_kl = float(np.mean(kl_qt))
    total = cfg.lambda_sim * l_sim + cfg.lambda_kl * l_kl + cfg.lambda_cls * l_cls
    terms = {"sim": l_sim, "kl": l_kl, "cls": l_cls, "total": float(total)}
    if not want_grad:
        return terms, None

    d_t = -cfg.lambda_sim * q / b
    d_q = -cfg.lambda_sim * t / b
    onehot = np.zeros_like(pt)
    onehot[rows, batch.labels] = 1.0
    d_lt = cfg.lambda_cls * (pt - onehot) / b
    d_lq = cfg.lambda_cls * (pq - onehot) / b
    if cfg.lambda_kl:
        # dKL(p||r)/d(logits of p) = p * (log p - log r - KL);  dKL(p||r)/d(logits of r) = r - p
        fwd_t = pt * (log_pt - log_pq - kl_tq[:, None])
        fwd_q = pq - pt
        rev_q = pq * (log_pq - log_pt - kl_qt[:, None])
        rev_t = pt - pq
        if mode is KLMode.SYMMETRIC:
            g_lt, g_lq = 0.5 * (fwd_t + rev_t), 0.5 * (fwd_q + rev_q)
        elif mode is KLMode.FORWARD:
            g_lt, g_lq = fwd_t, fwd_q
        else:
            g_lt, g_lq = rev_t, rev_q
        d_lt += cfg.lambda_kl * g_lt / b
        d_lq += cfg.lambda_kl * g_lq / b
    d_t += s * d_lt @ w
    d_q += s * d_lq @ w
    d_w = s * (d_lt.T @ t + d_lq.T @ q)

    grads: dict[str, np.ndarray] = {"head/weights": _normalize_back(w, w_norm, d_w)}
    for i, g in enumerate(_fused_backward(nets, fusion, aux, _normalize_back(t, t_norm, d_t))):
        for k, v in g.items():
            grads[f"g{i}/{k}"] = v
    if query_net is not None:
        for k, v in query_net.backward(q_cache, _normalize_back(q, q_norm, d_q)).items():
            grads[f"q/{k}"] = v
    return terms, grads


def loss_and_grad(nets: Sequence[TransformNet], head: ClassifierHead, batch: PairBatch, cfg: TrainConfig,
                  fusion: Fusion | str = Fusion.INDEPENDENT,
                  query_net: TransformNet | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Total loss and gradients keyed like :func:`named_parameters`.

    The query side is the identity mapping unless ``query_net`` is given.
    """
    terms, grads = evaluate(nets, head, batch, cfg, fusion, query_net, want_grad=True)
    return terms["total"], grads
