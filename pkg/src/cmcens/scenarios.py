"""Config-driven pipelines: generate, train, fuse, evaluate and report.

Artifacts live under one output directory::

    manifest.json                       config hash of the run that owns the directory
    data/r<k>/<model>.<split>.cmce      embedding sets per replicate
    transforms/r<k>/<name>.cmct         trained transforms, reused across scenarios
    scenarios/<name>/r<k>/<arm>/        fused gallery and probe files of each arm
    scenarios/<name>/report.{json,csv}
"""
from __future__ import annotations

import json
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .config import ExperimentConfig, derive_seed
from .core import EmbeddingSet, normalize_rows, read_embedding_set, write_embedding_set
from .ensemble import FusedGalleryItem, batch_variance, fuse_sets, read_fused_gallery, write_fused_gallery
from .errors import ArtifactConflict, BackfillViolation, InvalidConfig
from .evalproto import ProbeSet, build_index, export_report, open_set_search_eval, recall_at_1, risk_coverage_curve
from .synthworld import SampleSpec, SynthModel, audit_embeds, embed_specs, make_world, sample_specs, spawn_model
from .transform.io import load_transform, save_transform
from .transform.train import TrainedTransform, Variant, train

log = logging.getLogger(__name__)

SCENARIOS = ("ensemble_size", "diversity", "fusion_variants", "risk_coverage", "model_update")
SPLITS = ("train", "gallery", "mated", "nonmated")


class Workspace:
    """An output directory bound to one config (by hash)."""

    def __init__(self, cfg: ExperimentConfig, root=None, force: bool = False, claim: bool = True):
        self.cfg = cfg
        self.root = Path(root if root is not None else cfg.raw["output_dir"])
        if claim:
            self._claim(force)

    def _claim(self, force: bool) -> None:
        manifest = self.root / "manifest.json"
        if manifest.exists():
            try:
                old = json.loads(manifest.read_text(encoding="utf-8")).get("config_hash")
            except json.JSONDecodeError:
                old = None
            if old != self.cfg.hash:
                if not force:
                    raise ArtifactConflict(
                        f"{self.root} holds artifacts of config {old}, not {self.cfg.hash}; pass --force to replace them"
                    )
                for sub in ("data", "transforms", "scenarios", "reports"):
                    shutil.rmtree(self.root / sub, ignore_errors=True)
        self.root.mkdir(parents=True, exist_ok=True)
        body = {"config_hash": self.cfg.hash, "tool_version": __version__, "config": json.loads(self.cfg.canonical())}
        manifest.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def provenance(self) -> dict:
        return {"config_hash": self.cfg.hash, "tool_version": __version__}


class Replicate:
    """World, models and cached artifacts of one replicate (world seed)."""

    def __init__(self, ws: Workspace, r: int):
        self.ws, self.r = ws, r
        cfg = ws.cfg
        w = cfg.world
        self.world = make_world(w["latent_dim"], w["num_classes"], w["intra_class_spread"],
                                derive_seed(cfg.master_seed, f"world/{r}"), w["hardness_sigma"])
        self.split = cfg.split
        self.models: dict[str, SynthModel] = {}
        self._sets: dict[tuple[str, str], EmbeddingSet] = {}
        self.requests: list[tuple[str, str]] = []
        for spec in cfg.models:
            self.register(spec)

    def register(self, spec: dict) -> SynthModel:
        mid = spec["model_id"]
        if mid in self.models:
            return self.models[mid]
        base = spec.get("seed", self.ws.cfg.master_seed)
        model = spawn_model(self.world, spec["arch_family"], spec["out_dim"], spec["noise_sigma"],
                            derive_seed(base, f"model/{mid}/{self.r}"), mid, spec.get("family_noise_sigma", 0.0),
                            spec.get("data_fraction", 1.0))
        self.models[mid] = model
        return model

    def specs(self, split: str) -> list[SampleSpec]:
        sp = self.split
        if split == "train":
            return sample_specs(sp.train, sp.samples_per_class)
        if split == "gallery":
            return sample_specs(sp.gallery, sp.gallery_samples)
        if split == "mated":
            return sample_specs(sp.gallery, sp.samples_per_class - sp.gallery_samples, sp.gallery_samples)
        if split == "nonmated":
            return sample_specs(sp.nonmated, sp.samples_per_class)
        raise InvalidConfig(f"unknown split {split!r}")

    def data_path(self, model_id: str, split: str) -> Path:
        return self.ws.root / "data" / f"r{self.r}" / f"{model_id}.{split}.cmce"

    def embeddings(self, model_id: str, split: str) -> EmbeddingSet:
        self.requests.append((model_id, split))
        key = (model_id, split)
        if key not in self._sets:
            path = self.data_path(model_id, split)
            if path.exists():
                self._sets[key] = read_embedding_set(path)
            else:
                s = embed_specs(self.world, self.models[model_id], self.specs(split))
                path.parent.mkdir(parents=True, exist_ok=True)
                write_embedding_set(s, path)
                self._sets[key] = s
        return self._sets[key]

    def train_subset(self, model_id: str, class_fraction: float) -> EmbeddingSet:
        s = self.embeddings(model_id, "train")
        if class_fraction >= 1.0:
            return s
        keep = self.split.train[: max(2, math.ceil(class_fraction * len(self.split.train)))]
        return s.subset(np.flatnonzero(np.isin(s.labels, keep)))

    def transform(self, variant: Variant | str, gallery_ids: Sequence[str], query_id: str,
                  class_fraction: float = 1.0, tag: int = 0) -> TrainedTransform:
        variant = Variant(variant)
        name = f"{variant.value}__{'+'.join(gallery_ids)}__{query_id}__c{class_fraction:g}__t{tag}"
        path = self.ws.root / "transforms" / f"r{self.r}" / f"{name}.cmct"
        if path.exists():
            return load_transform(path)
        cfg = self.ws.cfg.train_config(variant, derive_seed(self.ws.cfg.master_seed, f"transform/{name}/{self.r}"))
        log.info("r%d: training %s", self.r, name)
        tt = train(variant, [self.train_subset(g, class_fraction) for g in gallery_ids],
                   self.train_subset(query_id, class_fraction), cfg)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_transform(tt, path)
        return tt

    def arm_dir(self, scenario: str, arm: str) -> Path:
        return self.ws.root / "scenarios" / scenario / f"r{self.r}" / arm


def raw_items(s: EmbeddingSet) -> list[FusedGalleryItem]:
    """Untransformed gallery entries (no ensemble, hence no variance)."""
    return [FusedGalleryItem(int(i), int(y), v, None, (s.model_id,)) for v, y, i in zip(s.as_float64(), s.labels, s.item_ids)]


def ensemble_items(tts: Sequence[TrainedTransform], gallery: Sequence[EmbeddingSet]) -> list[FusedGalleryItem]:
    """Independently trained transforms, outputs normalized then averaged."""
    outs = np.stack([normalize_rows(tt.per_model([g.vectors])[0])[0] for tt, g in zip(tts, gallery)])
    return fuse_sets(outs, gallery[0].labels, gallery[0].item_ids, [g.model_id for g in gallery])


def joint_items(tt: TrainedTransform, gallery: Sequence[EmbeddingSet]) -> list[FusedGalleryItem]:
    """Gallery fused by a jointly trained variant's own fusion rule."""
    vecs = [g.vectors for g in gallery]
    fused = tt.fused(vecs)
    per = tt.per_model(vecs)
    var = batch_variance(np.stack(per)) if per is not None else [None] * len(fused)
    ids = tuple(g.model_id for g in gallery)
    return [
        FusedGalleryItem(int(i), int(y), f, None if u is None else float(u), ids, bool(np.linalg.norm(f) <= 1e-9))
        for i, y, f, u in zip(gallery[0].item_ids, gallery[0].labels, fused, var)
    ]


def _transformed_set(s: EmbeddingSet, vectors: np.ndarray, model_id: str) -> EmbeddingSet:
    return EmbeddingSet(model_id, vectors, s.labels, s.item_ids, s.class_names)


def same_class_distance(items: Sequence[FusedGalleryItem], mated: EmbeddingSet) -> np.ndarray:
    """Mean cosine distance from each gallery item to the mated probes of its class."""
    probes = normalize_rows(mated.as_float64())[0]
    out = np.empty(len(items))
    for k, it in enumerate(items):
        mine = probes[mated.labels == it.class_label]
        out[k] = float(np.mean(1.0 - mine @ it.unit)) if len(mine) else np.nan
    return out


def evaluate_artifacts(gallery_path, mated_path, nonmated_path, eval_spec: dict, risk: bool = False) -> dict:
    """Metrics of one arm, computed only from its files on disk."""
    items = read_fused_gallery(gallery_path)
    mated = read_embedding_set(mated_path)
    nonmated = read_embedding_set(nonmated_path)
    index = build_index(items)
    probes = ProbeSet.from_sets(mated, nonmated)
    out = {
        "open_set_tar": {f"{far:g}": open_set_search_eval(index, probes, far).tar for far in eval_spec["fars"]},
        "recall_at_1": recall_at_1(index, mated.as_float64(), mated.labels, mated.item_ids),
    }
    if risk:
        metric = eval_spec["metric"]
        data = probes if metric == "open_set_tar" else (mated.as_float64(), mated.labels, mated.item_ids)
        far = eval_spec["primary_far"]
        covs = eval_spec["coverages"]
        seeds = list(range(eval_spec["rejection_seeds"]))
        curves = {}
        for policy in ("variance", "random"):
            pts = risk_coverage_curve(items, data, metric, covs, policy, seeds, far)
            curves[policy] = {f"{p.coverage:g}": p.metric_value for p in pts}
        out["risk_coverage"] = curves
        var = np.array([it.variance for it in items], dtype=float)
        dist = same_class_distance(items, mated)
        out["spearman_variance_distance"] = float(spearmanr(var, dist).statistic)
    return out


def run_arm(rep: Replicate, scenario: str, arm: str, items: Sequence[FusedGalleryItem], mated: EmbeddingSet,
            nonmated: EmbeddingSet, query_model_id: str, risk: bool = False) -> dict:
    d = rep.arm_dir(scenario, arm)
    d.mkdir(parents=True, exist_ok=True)
    write_fused_gallery(items, query_model_id, d / "gallery.cmce")
    write_embedding_set(mated, d / "mated.cmce")
    write_embedding_set(nonmated, d / "nonmated.cmce")
    return evaluate_artifacts(d / "gallery.cmce", d / "mated.cmce", d / "nonmated.cmce", rep.ws.cfg.eval, risk)


def _probes(rep: Replicate, query_id: str) -> tuple[EmbeddingSet, EmbeddingSet]:
    return rep.embeddings(query_id, "mated"), rep.embeddings(query_id, "nonmated")


def _m2m_ensemble(rep: Replicate, gallery_ids: Sequence[str], query_id: str, tags: Sequence[int] | None = None,
                  class_fraction: float = 1.0) -> list[FusedGalleryItem]:
    tags = tags or [0] * len(gallery_ids)
    tts = [rep.transform(Variant.M2M, [g], query_id, class_fraction, t) for g, t in zip(gallery_ids, tags)]
    return ensemble_items(tts, [rep.embeddings(g, "gallery") for g in gallery_ids])


def scenario_ensemble_size(rep: Replicate) -> dict:
    cfg = rep.ws.cfg
    q = cfg.query_spec["model_id"]
    gal = [m["model_id"] for m in cfg.gallery_specs]
    mated, non = _probes(rep, q)
    arms = {
        "symmetric": run_arm(rep, "ensemble_size", "symmetric", raw_items(rep.embeddings(q, "gallery")), mated, non, q),
        "cross_raw": run_arm(rep, "ensemble_size", "cross_raw", raw_items(rep.embeddings(gal[0], "gallery")), mated, non, q),
    }
    uni = rep.transform(Variant.UNIFIED, [gal[0]], q)
    g0 = rep.embeddings(gal[0], "gallery")
    uid = f"unified:{q}"
    arms["unified"] = run_arm(
        rep, "ensemble_size", "unified", raw_items(_transformed_set(g0, uni.per_model([g0.vectors])[0], uid)),
        _transformed_set(mated, uni.query(mated.vectors), uid), _transformed_set(non, uni.query(non.vectors), uid), uid,
    )
    for n in cfg.scenarios["ensemble_sizes"]:
        arms[f"size_{n}"] = run_arm(rep, "ensemble_size", f"size_{n}", _m2m_ensemble(rep, gal[:n], q), mated, non, q)
    return arms


def scenario_diversity(rep: Replicate) -> dict:
    cfg = rep.ws.cfg
    n = cfg.scenarios["diversity_size"]
    q = cfg.query_spec["model_id"]
    first = cfg.gallery_specs[0]
    gal = [m["model_id"] for m in cfg.gallery_specs]
    mated, non = _probes(rep, q)
    siblings = [first["model_id"]]
    for k in range(1, n):
        spec = dict(first, model_id=f"{first['model_id']}.tg{k}")
        spec.pop("seed", None)
        siblings.append(rep.register(spec).model_id)
    arms = {
        # D-T: one gallery model, transforms differ only in their training seed
        "D-T": _m2m_ensemble(rep, [first["model_id"]] * n, q, tags=list(range(n))),
        # D-TG: different gallery models of one architecture family
        "D-TG": _m2m_ensemble(rep, siblings, q),
        # D-TGA: gallery models across architecture families
        "D-TGA": _m2m_ensemble(rep, gal[:n], q),
    }
    return {k: run_arm(rep, "diversity", k, v, mated, non, q) for k, v in arms.items()}


def scenario_fusion_variants(rep: Replicate) -> dict:
    cfg = rep.ws.cfg
    n = cfg.scenarios["fusion_size"]
    q = cfg.query_spec["model_id"]
    gal = [m["model_id"] for m in cfg.gallery_specs][:n]
    mated, non = _probes(rep, q)
    sets = [rep.embeddings(g, "gallery") for g in gal]
    arms = {"independent": run_arm(rep, "fusion_variants", "independent", _m2m_ensemble(rep, gal, q), mated, non, q)}
    for v in (Variant.E2E_MEAN, Variant.E2E_WEIGHTED, Variant.CONCAT):
        tt = rep.transform(v, gal, q)
        arms[v.value] = run_arm(rep, "fusion_variants", v.value, joint_items(tt, sets), mated, non, q)
    return arms


def scenario_risk_coverage(rep: Replicate) -> dict:
    cfg = rep.ws.cfg
    n = cfg.scenarios["risk_size"]
    q = cfg.query_spec["model_id"]
    gal = [m["model_id"] for m in cfg.gallery_specs][:n]
    mated, non = _probes(rep, q)
    return {"ensemble": run_arm(rep, "risk_coverage", "ensemble", _m2m_ensemble(rep, gal, q), mated, non, q, risk=True)}


def scenario_model_update(rep: Replicate) -> dict:
    """Old gallery models stay; only the transforms are retrained for a new query model.

    Gallery models and the old query model see a reduced share of the training
    data (higher noise), and the old transforms were fit on the matching share
    of training classes.  The new query model is a separate, fully trained
    model that never embeds gallery samples.
    """
    cfg = rep.ws.cfg
    sc = cfg.scenarios
    frac, cfrac = sc["update_data_fraction"], sc["update_class_fraction"]
    qspec = cfg.query_spec
    old_gal = []
    for spec in cfg.gallery_specs[: max(sc["update_sizes"])]:
        s = dict(spec, model_id=f"{spec['model_id']}.old", data_fraction=frac)
        s.pop("seed", None)
        old_gal.append(rep.register(s).model_id)
    q_old = dict(qspec, model_id=f"{qspec['model_id']}.old", data_fraction=frac)
    q_new = dict(qspec, model_id=f"{qspec['model_id']}.new", data_fraction=1.0)
    for s in (q_old, q_new):
        s.pop("seed", None)
        rep.register(s)
    arms = {}
    mated, non = _probes(rep, q_old["model_id"])
    for n in sc["update_sizes"]:
        items = _m2m_ensemble(rep, old_gal[:n], q_old["model_id"], class_fraction=cfrac)
        arms[f"before_{n}"] = run_arm(rep, "model_update", f"before_{n}", items, mated, non, q_old["model_id"])

    new_id = q_new["model_id"]
    start = len(rep.requests)
    with audit_embeds() as audit:
        mated, non = _probes(rep, new_id)
        for n in sc["update_sizes"]:
            items = _m2m_ensemble(rep, old_gal[:n], new_id)
            arms[f"after_{n}"] = run_arm(rep, "model_update", f"after_{n}", items, mated, non, new_id)
    touched = audit.touched(new_id, rep.specs("gallery"))
    requested = [x for x in rep.requests[start:] if x == (new_id, "gallery")]
    if touched or requested or rep.data_path(new_id, "gallery").exists():
        raise BackfillViolation(f"new query model embedded {len(touched)} gallery samples")
    for n in sc["update_sizes"]:
        arms[f"after_{n}"]["backfill_embeds"] = len(touched)
    return arms


_RUNNERS = {
    "ensemble_size": scenario_ensemble_size,
    "diversity": scenario_diversity,
    "fusion_variants": scenario_fusion_variants,
    "risk_coverage": scenario_risk_coverage,
    "model_update": scenario_model_update,
}


def _mean_tree(values: list):
    first = values[0]
    if isinstance(first, dict):
        return {k: _mean_tree([v[k] for v in values]) for k in first}
    return float(np.mean(values))


def _run_replicate(raw: dict, root: str, name: str, r: int) -> dict:
    ws = Workspace(ExperimentConfig(raw), root, claim=False)
    return _RUNNERS[name](Replicate(ws, r))


def _curves(name: str, cfg: ExperimentConfig, arms: dict) -> list[dict]:
    seeds = len(cfg.replicates)
    primary = f"{cfg.eval['primary_far']:g}"
    curves = []
    for arm, res in arms.items():
        m = res["mean"]
        curves.append({"curve": f"{arm}:open_set_tar", "x_kind": "far", "points": [
            {"x": float(k), "value": v, "policy": "", "seed_count": seeds} for k, v in m["open_set_tar"].items()]})
        curves.append({"curve": f"{arm}:recall_at_1", "x_kind": "rank", "points": [
            {"x": 1, "value": m["recall_at_1"], "policy": "", "seed_count": seeds}]})
        if "risk_coverage" in m:
            for policy, pts in m["risk_coverage"].items():
                n_seeds = seeds * (cfg.eval["rejection_seeds"] if policy == "random" else 1)
                curves.append({"curve": f"{arm}:risk_coverage", "x_kind": "coverage", "points": [
                    {"x": float(c), "value": v, "policy": policy, "seed_count": n_seeds} for c, v in pts.items()]})
    if name == "ensemble_size":
        curves.append({"curve": "ensemble_size:open_set_tar", "x_kind": "ensemble_size", "points": [
            {"x": n, "value": arms[f"size_{n}"]["mean"]["open_set_tar"][primary], "policy": "", "seed_count": seeds}
            for n in cfg.scenarios["ensemble_sizes"]]})
    return curves


def run_scenario(name: str, cfg: ExperimentConfig, root=None, force: bool = False, threads: int = 1) -> dict:
    """Run one scenario over every replicate and write its report."""
    if name not in _RUNNERS:
        raise InvalidConfig(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    ws = Workspace(cfg, root, force)
    reps = cfg.replicates
    if threads > 1 and len(reps) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(reps))) as pool:
            per_rep = list(pool.map(_run_replicate, [cfg.raw] * len(reps), [str(ws.root)] * len(reps),
                                    [name] * len(reps), reps))
    else:
        per_rep = [_RUNNERS[name](Replicate(ws, r)) for r in reps]
    arms = {}
    for arm in per_rep[0]:
        runs = [p[arm] for p in per_rep]
        arms[arm] = {"seeds": list(reps), "per_seed": {str(r): v for r, v in zip(reps, runs)}, "mean": _mean_tree(runs)}
    result = {
        "scenario": name,
        **ws.provenance(),
        "config": json.loads(cfg.canonical()),
        "arms": arms,
        "curves": _curves(name, cfg, arms),
    }
    out = ws.root / "scenarios" / name
    out.mkdir(parents=True, exist_ok=True)
    export_report(result, out / "report.json")
    return result


def synth_gen(cfg: ExperimentConfig, root=None, force: bool = False) -> list[Path]:
    """Write every roster model's embeddings of every split, for each replicate."""
    ws = Workspace(cfg, root, force)
    paths = []
    for r in cfg.replicates:
        rep = Replicate(ws, r)
        for m in cfg.models:
            for split in SPLITS:
                rep.embeddings(m["model_id"], split)
                paths.append(rep.data_path(m["model_id"], split))
    return paths
