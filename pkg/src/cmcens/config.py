"""Experiment configuration, config hashing and per-component seed derivation."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidConfig
from .transform.loss import TrainConfig
from .transform.train import Variant

_MASK64 = 0xFFFFFFFFFFFFFFFF

DEFAULT_CONFIG: dict = {
    "master_seed": 0,
    "replicates": 5,
    "output_dir": "runs",
    "world": {"latent_dim": 64, "num_classes": 300, "intra_class_spread": 0.15, "hardness_sigma": 1.0},
    "models": [
        {"model_id": "query", "arch_family": "A", "out_dim": 64, "noise_sigma": 0.05, "family_noise_sigma": 0.05,
         "role": "query"},
        {"model_id": "g1", "arch_family": "A", "out_dim": 64, "noise_sigma": 0.05, "family_noise_sigma": 0.05,
         "role": "gallery"},
        {"model_id": "g2", "arch_family": "B", "out_dim": 64, "noise_sigma": 0.05, "family_noise_sigma": 0.05,
         "role": "gallery"},
        {"model_id": "g3", "arch_family": "C", "out_dim": 64, "noise_sigma": 0.05, "family_noise_sigma": 0.05,
         "role": "gallery"},
        {"model_id": "g4", "arch_family": "A", "out_dim": 64, "noise_sigma": 0.05, "family_noise_sigma": 0.05,
         "role": "gallery"},
    ],
    "split": {"train_classes": 150, "gallery_classes": 100, "nonmated_classes": 50, "samples_per_class": 8,
              "gallery_samples": 2},
    # smaller batches than the library default: more steps for the per-model nets
    "train": TrainConfig(batch_size=64).to_dict(),
    "train_overrides": {},
    "eval": {"fars": [0.1, 0.01], "primary_far": 0.1, "coverages": [1.0, 0.9, 0.8, 0.7, 0.6, 0.5],
             "rejection_seeds": 5, "metric": "open_set_tar"},
    "scenarios": {"ensemble_sizes": [1, 2, 3, 4], "diversity_size": 4, "fusion_size": 4, "risk_size": 4,
                  "update_sizes": [2, 4], "update_data_fraction": 0.5, "update_class_fraction": 0.5},
}


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, name: str) -> int:
    """Seed for the component called ``name``; unrelated names never collide in practice."""
    return splitmix64((int(master) & _MASK64) ^ fnv1a64(name))


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise InvalidConfig(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("train_overrides",):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    gallery: tuple[int, ...]
    nonmated: tuple[int, ...]
    samples_per_class: int
    gallery_samples: int


class ExperimentConfig:
    """Validated view over a plain JSON-compatible config dict."""

    def __init__(self, raw: dict | None = None):
        self.raw = _merge(DEFAULT_CONFIG, raw or {})
        self._validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise InvalidConfig("config must be a JSON object")
        return cls(raw)

    def canonical(self) -> str:
        # the output location does not change any artifact, so it is not hashed
        d = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig(raw)

    @property
    def master_seed(self) -> int:
        return int(self.raw["master_seed"])

    @property
    def replicates(self) -> list[int]:
        return list(range(int(self.raw["replicates"])))

    @property
    def world(self) -> dict:
        return self.raw["world"]

    @property
    def models(self) -> list[dict]:
        return self.raw["models"]

    @property
    def query_spec(self) -> dict:
        return next(m for m in self.models if m["role"] == "query")

    @property
    def gallery_specs(self) -> list[dict]:
        return [m for m in self.models if m["role"] == "gallery"]

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    @property
    def scenarios(self) -> dict:
        return self.raw["scenarios"]

    def train_config(self, variant: Variant | str, seed: int) -> TrainConfig:
        d = dict(self.raw["train"])
        d.update(self.raw["train_overrides"].get(Variant(variant).value, {}))
        d["seed"] = int(seed)
        return TrainConfig.from_dict(d)

    @property
    def split(self) -> Split:
        s = self.raw["split"]

        def classes(v, start):
            if isinstance(v, int):
                return tuple(range(start, start + v)), start + v
            return tuple(int(c) for c in v), start

        nxt = 0
        train, nxt = classes(s["train_classes"], nxt)
        gallery, nxt = classes(s["gallery_classes"], nxt)
        nonmated, nxt = classes(s["nonmated_classes"], nxt)
        return Split(train, gallery, nonmated, int(s["samples_per_class"]), int(s["gallery_samples"]))

    def _validate(self) -> None:
        r = self.raw
        for key in ("master_seed", "replicates"):
            if not isinstance(r[key], int) or isinstance(r[key], bool) or r[key] < 0:
                raise InvalidConfig(f"{key} must be a non-negative integer")
        if r["master_seed"] > _MASK64:
            raise InvalidConfig("master_seed must fit in 64 bits")
        if r["replicates"] < 1:
            raise InvalidConfig("replicates must be >= 1")
        ids = [m.get("model_id") for m in r["models"]]
        if len(set(ids)) != len(ids) or not all(isinstance(i, str) and i for i in ids):
            raise InvalidConfig("model ids must be unique non-empty strings")
        roles = [m.get("role") for m in r["models"]]
        if any(x not in ("query", "gallery") for x in roles):
            raise InvalidConfig("model role must be 'query' or 'gallery'")
        if roles.count("query") != 1:
            raise InvalidConfig("exactly one model must have role 'query'")
        if roles.count("gallery") < 1:
            raise InvalidConfig("at least one gallery model is required")
        allowed = {"model_id", "arch_family", "out_dim", "noise_sigma", "family_noise_sigma", "role", "seed",
                   "data_fraction"}
        for m in r["models"]:
            extra = set(m) - allowed
            if extra:
                raise InvalidConfig(f"unknown model keys {sorted(extra)}")
            if m.get("arch_family") not in ("A", "B", "C"):
                raise InvalidConfig(f"model {m['model_id']}: arch_family must be A, B or C")
            if not isinstance(m.get("out_dim"), int) or m["out_dim"] % 4:
                raise InvalidConfig(f"model {m['model_id']}: out_dim must be an integer divisible by 4")
        if len({m["out_dim"] for m in r["models"]}) != 1:
            raise InvalidConfig("all models must share out_dim")
        sp = self.split
        n = r["world"]["num_classes"]
        parts = (sp.train, sp.gallery, sp.nonmated)
        if any(not p for p in parts):
            raise InvalidConfig("train, gallery and nonmated class sets must be nonempty")
        if set(sp.gallery) & set(sp.nonmated):
            raise InvalidConfig("nonmated classes overlap gallery classes")
        if set(sp.train) & (set(sp.gallery) | set(sp.nonmated)):
            raise InvalidConfig("training classes overlap evaluation classes")
        if any(len(set(p)) != len(p) for p in parts) or max(max(p) for p in parts) >= n or min(min(p) for p in parts) < 0:
            raise InvalidConfig(f"class ids must be distinct and within [0, {n})")
        if not 1 <= sp.gallery_samples < sp.samples_per_class:
            raise InvalidConfig("need 1 <= gallery_samples < samples_per_class")
        ev = r["eval"]
        if not ev["fars"] or any(not 0 < f <= 1 for f in ev["fars"]) or ev["primary_far"] not in ev["fars"]:
            raise InvalidConfig("fars must lie in (0, 1] and include primary_far")
        covs = ev["coverages"]
        if not covs or covs[0] != 1.0 or any(a <= b for a, b in zip(covs, covs[1:])) or covs[-1] <= 0:
            raise InvalidConfig("coverages must start at 1.0 and decrease strictly")
        if ev["metric"] not in ("open_set_tar", "recall_at_1"):
            raise InvalidConfig("eval.metric must be open_set_tar or recall_at_1")
        if ev["rejection_seeds"] < 1:
            raise InvalidConfig("rejection_seeds must be >= 1")
        for v, over in r["train_overrides"].items():
            try:
                Variant(v)
            except ValueError as exc:
                raise InvalidConfig(f"unknown variant in train_overrides: {v}") from exc
            if not isinstance(over, dict):
                raise InvalidConfig("train_overrides values must be objects")
        TrainConfig.from_dict(r["train"])
        sc = r["scenarios"]
        n_gal = len(self.gallery_specs)
        sizes = sc["ensemble_sizes"]
        if not sizes or sorted(set(sizes)) != sizes or sizes[0] < 1:
            raise InvalidConfig("ensemble_sizes must be increasing positive integers")
        for key in ("diversity_size", "fusion_size", "risk_size"):
            if not 2 <= sc[key]:
                raise InvalidConfig(f"scenarios.{key} must be >= 2")
        if not sc["update_sizes"] or min(sc["update_sizes"]) < 1:
            raise InvalidConfig("update_sizes must be positive integers")
        if not 0 < sc["update_data_fraction"] <= 1 or not 0 < sc["update_class_fraction"] <= 1:
            raise InvalidConfig("update fractions must be in (0, 1]")
        need = max(sizes[-1], sc["diversity_size"], sc["fusion_size"], sc["risk_size"], max(sc["update_sizes"]))
        if need > n_gal:
            raise InvalidConfig(f"scenarios need {need} gallery models, roster has {n_gal}")
