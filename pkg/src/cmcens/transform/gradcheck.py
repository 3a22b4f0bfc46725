"""Finite-difference verification of the analytic gradients."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from ..errors import InvalidConfig
from .loss import Fusion, PairBatch, TrainConfig, evaluate, named_parameters
from .net import ClassifierHead, TransformNet

log = logging.getLogger(__name__)


def grad_check(nets: Sequence[TransformNet], head: ClassifierHead, batch: PairBatch, cfg: TrainConfig,
               fusion: Fusion | str = Fusion.INDEPENDENT, query_net: TransformNet | None = None,
               probes: int = 100, seed: int = 0, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``probes`` parameter coordinates are drawn uniformly over all trainable
    parameters.  Relative error is ``|a - f| / max(|a|, |f|, 1e-8)``.

    A probe whose +-h perturbation flips the sign of any leaky-ReLU
    pre-activation straddles a kink, where the central difference does not
    estimate the derivative; such probes are replaced by fresh ones.
    """
    if probes < 1:
        raise InvalidConfig("probes must be >= 1")
    _, grads = evaluate(nets, head, batch, cfg, fusion, query_net)
    params = named_parameters(nets, head, query_net)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x6C])
    order = rng.permutation(int(sizes.sum()))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    fusion = Fusion(fusion)

    def loss() -> float:
        return evaluate(nets, head, batch, cfg, fusion, query_net, want_grad=False)[0]["total"]

    def kinks() -> np.ndarray:
        if fusion is Fusion.CONCAT:
            caches = [nets[0].forward_batch(np.concatenate(batch.gallery, axis=1))[1]]
            owners = [nets[0]]
        else:
            caches = [net.forward_batch(g)[1] for net, g in zip(nets, batch.gallery)]
            owners = list(nets)
        if query_net is not None:
            caches.append(query_net.forward_batch(batch.query)[1])
            owners.append(query_net)
        return np.concatenate([o.kink_pattern(c) for o, c in zip(owners, caches)])

    base = kinks()
    worst = 0.0
    done = skipped = 0
    for f in order:
        if done >= probes:
            break
        j = int(np.searchsorted(offsets, f, side="right") - 1)
        name = names[j]
        arr = params[name].reshape(-1)  # view: perturbs the live parameter
        idx = int(f - offsets[j])
        old = arr[idx]
        arr[idx] = old + h
        lp, kp = loss(), kinks()
        arr[idx] = old - h
        lm, km = loss(), kinks()
        arr[idx] = old
        if not (np.array_equal(kp, base) and np.array_equal(km, base)):
            skipped += 1
            continue
        done += 1
        fd = (lp - lm) / (2 * h)
        an = float(grads[name].reshape(-1)[idx])
        err = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        worst = max(worst, err)
    log.debug("grad_check: %d probes, %d skipped at kinks, max rel err %.3g", done, skipped, worst)
    return worst
