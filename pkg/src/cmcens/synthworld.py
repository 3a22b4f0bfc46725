"""Synthetic multi-model embedding world.

A :class:`LatentWorld` holds class prototypes on the unit sphere.  Each sample
``(class_label, sample_id)`` is a deterministic point near its prototype, and a
:class:`SynthModel` embeds it through its own orthonormal map, a
family-specific element-wise distortion and model-specific noise.  Two models
with different seeds therefore produce incompatible embedding spaces, which is
the situation the transformation networks are meant to repair.

Every random draw is keyed on ``(stream tag, seed, class_label, sample_id)``
rather than drawn from a shared stateful generator, so results do not depend
on generation order.

Besides the per-model noise, each sample carries a difficulty factor (shared
by all models) that scales every perturbation applied to it, and models of
the same architecture family share a family-level perturbation of the latent
point.  The first makes some gallery items hard for every model at once; the
second makes same-family models err in correlated ways.
"""
from __future__ import annotations

import enum
import json
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import EmbeddingSet
from .errors import InvalidConfig

# item_id = class_label * ITEM_STRIDE + sample_id
ITEM_STRIDE = 4096

_T_PROTO = 1
_T_HARD = 2
_T_LATENT = 3
_T_FAMILY = 4
_T_MODEL = 5
_T_ROT = 6


class ArchFamily(str, enum.Enum):
    A = "A"  # linear
    B = "B"  # saturating tanh
    C = "C"  # signed square root


_FAMILY_GAIN = {ArchFamily.A: 1.0, ArchFamily.B: 2.0, ArchFamily.C: 0.5}
_FAMILY_CODE = {ArchFamily.A: 0, ArchFamily.B: 1, ArchFamily.C: 2}


def _keyed_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFFFFFFFFFF for k in key])


def _mask_seed(seed: int) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True, eq=False)
class LatentWorld:
    latent_dim: int
    num_classes: int
    intra_class_spread: float
    seed: int
    prototypes: np.ndarray
    hardness_sigma: float = 0.5

    def config(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "num_classes": self.num_classes,
            "intra_class_spread": self.intra_class_spread,
            "seed": self.seed,
            "hardness_sigma": self.hardness_sigma,
        }


def make_world(latent_dim: int, num_classes: int, intra_class_spread: float, seed: int,
               hardness_sigma: float = 0.5) -> LatentWorld:
    """Draw ``num_classes`` prototypes uniformly on the unit sphere."""
    if latent_dim < 8:
        raise InvalidConfig("latent_dim must be >= 8")
    if num_classes < 2:
        raise InvalidConfig("num_classes must be >= 2")
    if not intra_class_spread >= 0 or not hardness_sigma >= 0:
        raise InvalidConfig("spread and hardness_sigma must be non-negative")
    g = _keyed_rng(_T_PROTO, _mask_seed(seed)).standard_normal((num_classes, latent_dim))
    protos = g / np.linalg.norm(g, axis=1, keepdims=True)
    protos.setflags(write=False)
    return LatentWorld(latent_dim, num_classes, float(intra_class_spread), int(seed), protos,
                       float(hardness_sigma))


def world_from_config(cfg: dict) -> LatentWorld:
    return make_world(cfg["latent_dim"], cfg["num_classes"], cfg["intra_class_spread"], cfg["seed"],
                      cfg.get("hardness_sigma", 0.5))


@dataclass(frozen=True)
class SampleSpec:
    class_label: int
    sample_id: int

    @property
    def item_id(self) -> int:
        return self.class_label * ITEM_STRIDE + self.sample_id


def _check_spec(world: LatentWorld, spec: SampleSpec) -> None:
    if not 0 <= spec.class_label < world.num_classes:
        raise InvalidConfig(f"class_label {spec.class_label} outside world of {world.num_classes} classes")
    if not 0 <= spec.sample_id < ITEM_STRIDE:
        raise InvalidConfig(f"sample_id must be in [0, {ITEM_STRIDE})")


def sample_hardness(world: LatentWorld, spec: SampleSpec) -> float:
    """Log-normal difficulty factor with mean 1, shared by every model."""
    s = world.hardness_sigma
    if s == 0:
        return 1.0
    z = _keyed_rng(_T_HARD, _mask_seed(world.seed), spec.class_label, spec.sample_id).standard_normal()
    return float(np.exp(s * z - 0.5 * s * s))


def _rotate_toward(p: np.ndarray, g: np.ndarray, angle: float) -> np.ndarray:
    """Rotate unit vector ``p`` by ``angle`` radians toward the tangent part of ``g``."""
    t = g - np.dot(g, p) * p
    n = np.linalg.norm(t)
    if angle == 0.0 or n == 0.0:
        return p.copy()
    return np.cos(angle) * p + np.sin(angle) * (t / n)


def latent_point(world: LatentWorld, spec: SampleSpec) -> np.ndarray:
    _check_spec(world, spec)
    p = world.prototypes[spec.class_label]
    if world.intra_class_spread == 0.0:
        return p.copy()
    rng = _keyed_rng(_T_LATENT, _mask_seed(world.seed), spec.class_label, spec.sample_id)
    g = rng.standard_normal(world.latent_dim)
    # angle magnitude follows a chi distribution around the nominal spread
    angle = world.intra_class_spread * sample_hardness(world, spec) * np.linalg.norm(g) / np.sqrt(world.latent_dim)
    return _rotate_toward(p, g, angle)


@dataclass(frozen=True, eq=False)
class SynthModel:
    """A simulated independently trained embedding model."""

    model_id: str
    arch_family: ArchFamily
    out_dim: int
    rotation: np.ndarray
    nonlinearity_gain: float
    noise_sigma: float
    seed: int
    family_noise_sigma: float = 0.0
    data_fraction: float = 1.0

    def config(self) -> dict:
        return {
            "model_id": self.model_id,
            "arch_family": self.arch_family.value,
            "out_dim": self.out_dim,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "family_noise_sigma": self.family_noise_sigma,
            "data_fraction": self.data_fraction,
        }

    @property
    def effective_noise(self) -> float:
        """Per-coordinate noise scale; models fit on less data are noisier."""
        return self.noise_sigma / np.sqrt(self.data_fraction)


def random_orthonormal_rows(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((cols, cols)))
    q = q * np.sign(np.diag(r))
    return q[:rows].copy()


def spawn_model(world: LatentWorld, arch_family, out_dim: int, noise_sigma: float, seed: int,
                model_id: str | None = None, family_noise_sigma: float = 0.0,
                data_fraction: float = 1.0) -> SynthModel:
    """Create a model with a seeded orthonormal map and family distortion."""
    try:
        fam = ArchFamily(arch_family)
    except ValueError as exc:
        raise InvalidConfig(f"unknown arch family {arch_family!r}") from exc
    if not 2 <= out_dim <= world.latent_dim:
        raise InvalidConfig(f"out_dim must be in [2, latent_dim={world.latent_dim}]")
    if not noise_sigma >= 0 or not family_noise_sigma >= 0:
        raise InvalidConfig("noise scales must be non-negative")
    if not 0 < data_fraction <= 1:
        raise InvalidConfig("data_fraction must be in (0, 1]")
    rot = random_orthonormal_rows(out_dim, world.latent_dim, _keyed_rng(_T_ROT, _mask_seed(seed)))
    rot.setflags(write=False)
    mid = model_id if model_id is not None else f"{fam.value}-{out_dim}-s{seed}"
    return SynthModel(mid, fam, out_dim, rot, _FAMILY_GAIN[fam], float(noise_sigma), int(seed),
                      float(family_noise_sigma), float(data_fraction))


def model_from_config(world: LatentWorld, cfg: dict) -> SynthModel:
    return spawn_model(world, cfg["arch_family"], cfg["out_dim"], cfg["noise_sigma"], cfg["seed"],
                       cfg.get("model_id"), cfg.get("family_noise_sigma", 0.0), cfg.get("data_fraction", 1.0))


def _distort(model: SynthModel, y: np.ndarray) -> np.ndarray:
    if model.arch_family is ArchFamily.A:
        return y
    if model.arch_family is ArchFamily.B:
        out = np.tanh(model.nonlinearity_gain * y)
    else:
        out = np.sign(y) * np.abs(y) ** model.nonlinearity_gain
    n = np.linalg.norm(out)
    return out / n if n > 0 else out


class EmbedAudit:
    """Records which (model_id, class_label, sample_id) triples were embedded."""

    def __init__(self):
        self.calls: set[tuple[str, int, int]] = set()

    def touched(self, model_id: str, specs: Iterable[SampleSpec]) -> list[SampleSpec]:
        return [s for s in specs if (model_id, s.class_label, s.sample_id) in self.calls]


_AUDITS: list[EmbedAudit] = []


@contextmanager
def audit_embeds():
    audit = EmbedAudit()
    _AUDITS.append(audit)
    try:
        yield audit
    finally:
        _AUDITS.remove(audit)


def embed(model: SynthModel, world: LatentWorld, spec: SampleSpec) -> np.ndarray:
    """Embed one sample; a pure function of (world, model, spec)."""
    _check_spec(world, spec)
    for a in _AUDITS:
        a.calls.add((model.model_id, spec.class_label, spec.sample_id))
    x = latent_point(world, spec)
    h = sample_hardness(world, spec)
    if model.family_noise_sigma > 0:
        g = _keyed_rng(_T_FAMILY, _mask_seed(world.seed), _FAMILY_CODE[model.arch_family],
                       spec.class_label, spec.sample_id).standard_normal(world.latent_dim)
        x = x + model.family_noise_sigma * h * g
        x = x / np.linalg.norm(x)
    y = _distort(model, model.rotation @ x)
    if model.noise_sigma > 0:
        g = _keyed_rng(_T_MODEL, _mask_seed(model.seed), spec.class_label, spec.sample_id).standard_normal(model.out_dim)
        y = y + model.effective_noise * h * g
    n = np.linalg.norm(y)
    return y / n


def sample_specs(classes: Sequence[int], samples_per_class: int, id_offset: int = 0) -> list[SampleSpec]:
    return [SampleSpec(int(c), id_offset + j) for c in classes for j in range(samples_per_class)]


def embed_specs(world: LatentWorld, model: SynthModel, specs: Sequence[SampleSpec]) -> EmbeddingSet:
    if not specs:
        raise InvalidConfig("no samples requested")
    for s in specs:
        _check_spec(world, s)
    vecs = np.stack([embed(model, world, s) for s in specs])
    return EmbeddingSet(
        model.model_id,
        vecs,
        np.array([s.class_label for s in specs], dtype=np.int64),
        np.array([s.item_id for s in specs], dtype=np.int64),
    )


def generate_split(world: LatentWorld, model: SynthModel, classes: Sequence[int], samples_per_class: int,
                   id_offset: int = 0) -> EmbeddingSet:
    """Embed ``samples_per_class`` samples (ids ``id_offset ...``) of each class."""
    if samples_per_class < 1:
        raise InvalidConfig("samples_per_class must be >= 1")
    if id_offset < 0 or id_offset + samples_per_class > ITEM_STRIDE:
        raise InvalidConfig(f"sample ids must stay below {ITEM_STRIDE}")
    return embed_specs(world, model, sample_specs(classes, samples_per_class, id_offset))


def dump_config(world: LatentWorld, models: Sequence[SynthModel]) -> str:
    return json.dumps({"world": world.config(), "models": [m.config() for m in models]}, indent=1, sort_keys=True)
