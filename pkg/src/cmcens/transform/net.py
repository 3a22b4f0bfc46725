"""Residual bottleneck transformation networks and the shared classifier head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch, InvalidConfig

NUM_BLOCKS = 4
REDUCTION = 4
LEAKY_SLOPE = 0.1
DEFAULT_SCALE = 16.0


def leaky_relu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAKY_SLOPE * z)


@dataclass
class TransformNet:
    """Input projection followed by four residual bottleneck blocks.

    Each block maps ``x -> x + expand(leaky_relu(reduce(x)))`` with a bottleneck
    of ``out_dim // 4`` units.  Parameters live in ``params`` keyed by name so
    that optimizers and serializers can treat every net uniformly.
    """

    in_dim: int
    out_dim: int
    params: dict[str, np.ndarray]
    reduction: int = REDUCTION

    @property
    def hidden(self) -> int:
        return self.out_dim // self.reduction

    @property
    def has_weight_head(self) -> bool:
        return "wh_w" in self.params

    def copy(self) -> "TransformNet":
        return TransformNet(self.in_dim, self.out_dim, {k: v.copy() for k, v in self.params.items()}, self.reduction)

    def forward_batch(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionMismatch(f"expected inputs of dim {self.in_dim}, got shape {x.shape}")
        p = self.params
        h = x @ p["proj_w"].T + p["proj_b"]
        cache = {"x": x, "blocks": []}
        for k in range(NUM_BLOCKS):
            z = h @ p[f"b{k}_rw"].T + p[f"b{k}_rb"]
            a = leaky_relu(z)
            cache["blocks"].append((h, z, a))
            h = h + a @ p[f"b{k}_ew"].T + p[f"b{k}_eb"]
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return self.forward_batch(x[None, :])[0][0]
        return self.forward_batch(x)[0]

    def weight_scalar(self, out: np.ndarray) -> np.ndarray:
        """Per-item fusion logit emitted by the optional weight head."""
        if not self.has_weight_head:
            raise InvalidConfig("net has no weight head")
        return out @ self.params["wh_w"] + self.params["wh_b"][0]

    def backward(self, cache: dict, d_out: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar w.r.t. every parameter, given dL/d(output)."""
        p = self.params
        g: dict[str, np.ndarray] = {}
        dh = d_out
        for k in reversed(range(NUM_BLOCKS)):
            h_in, z, a = cache["blocks"][k]
            g[f"b{k}_ew"] = dh.T @ a
            g[f"b{k}_eb"] = dh.sum(axis=0)
            dz = (dh @ p[f"b{k}_ew"]) * np.where(z > 0, 1.0, LEAKY_SLOPE)
            g[f"b{k}_rw"] = dz.T @ h_in
            g[f"b{k}_rb"] = dz.sum(axis=0)
            dh = dh + dz @ p[f"b{k}_rw"]
        g["proj_w"] = dh.T @ cache["x"]
        g["proj_b"] = dh.sum(axis=0)
        return g

    def kink_pattern(self, cache: dict) -> np.ndarray:
        """Sign pattern of every pre-activation, used to spot kinks in gradient checks."""
        return np.concatenate([(z > 0).ravel() for _, z, _ in cache["blocks"]])


def init_transform(n: int, m: int, seed: int, with_weight_head: bool = False) -> TransformNet:
    """Near-identity initialization.

    The projection is the identity (zero-padded or truncated) when the dims
    are within a factor of two of each other, otherwise uniform in
    ``+-1/sqrt(n)``.  Expand matrices start at zero so every block begins as
    the identity.
    """
    if n < 2 or m < 2:
        raise InvalidConfig("dims must be >= 2")
    if m % REDUCTION:
        raise InvalidConfig(f"out_dim {m} must be divisible by {REDUCTION}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x7A])
    r = m // REDUCTION
    params: dict[str, np.ndarray] = {}
    if 2 * min(n, m) >= max(n, m):
        params["proj_w"] = np.eye(m, n)
    else:
        params["proj_w"] = rng.uniform(-1, 1, (m, n)) / np.sqrt(n)
    params["proj_b"] = np.zeros(m)
    for k in range(NUM_BLOCKS):
        params[f"b{k}_rw"] = rng.uniform(-1, 1, (r, m)) / np.sqrt(m)
        params[f"b{k}_rb"] = np.zeros(r)
        params[f"b{k}_ew"] = np.zeros((m, r))
        params[f"b{k}_eb"] = np.zeros(m)
    if with_weight_head:
        params["wh_w"] = np.zeros(m)
        params["wh_b"] = np.zeros(1)
    return TransformNet(n, m, params)


def randomize(net: TransformNet, seed: int, scale: float = 0.3, biases: bool = True) -> TransformNet:
    """Copy of ``net`` with every parameter redrawn; used for gradient checks and tests."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x3C])
    out = net.copy()
    for k, v in out.params.items():
        is_bias = k.endswith("_b") or k.endswith("rb") or k.endswith("eb")
        if is_bias and not biases:
            out.params[k] = np.zeros_like(v)
        elif is_bias:
            out.params[k] = rng.standard_normal(v.shape) * scale
        else:
            out.params[k] = rng.standard_normal(v.shape) / np.sqrt(v.shape[-1])
    return out


class ClassifierHead:
    """Cosine classifier: logits = scale * cos(class vector, embedding)."""

    def __init__(self, weights: np.ndarray, scale: float = DEFAULT_SCALE):
        if scale <= 0:
            raise InvalidConfig("head scale must be positive")
        self.scale = float(scale)
        self.params = {"weights": np.asarray(weights, dtype=np.float64)}

    @property
    def weights(self) -> np.ndarray:
        return self.params["weights"]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weights.copy(), self.scale)


def init_head(num_classes: int, dim: int, seed: int, scale: float = DEFAULT_SCALE) -> ClassifierHead:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x4E])
    return ClassifierHead(rng.standard_normal((num_classes, dim)), scale)
