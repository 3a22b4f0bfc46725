"""Generate, train, fuse and evaluate cross-model compatible gallery ensembles.

Exit codes: 0 on success, 2 on invalid configuration or usage, 1 on any
other error.
"""
from __future__ import annotations

import os

# one BLAS thread keeps float reductions identical whatever --threads says
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import DEFAULT_CONFIG, ExperimentConfig  # noqa: E402
from .errors import CMCError, InvalidConfig  # noqa: E402

log = logging.getLogger("cmcens")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(master_seed=args.seed)
    return cfg


def _out(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out) if args.out else Path(cfg.raw["output_dir"])


def cmd_synth_gen(args) -> int:
    from .scenarios import synth_gen

    cfg = _load_config(args)
    paths = synth_gen(cfg, _out(args, cfg), args.force)
    print(f"wrote {len(paths)} embedding sets under {_out(args, cfg)}")
    return 0


def cmd_train_transform(args) -> int:
    from .scenarios import Replicate, Workspace

    cfg = _load_config(args)
    if args.replicate not in cfg.replicates:
        raise InvalidConfig(f"replicate must be in 0..{len(cfg.replicates) - 1}")
    rep = Replicate(Workspace(cfg, _out(args, cfg), args.force), args.replicate)
    query = args.query or cfg.query_spec["model_id"]
    for mid in [*args.gallery, query]:
        if mid not in rep.models:
            raise InvalidConfig(f"unknown model {mid!r}")
    tt = rep.transform(args.variant, args.gallery, query)
    print(f"{tt.variant.value}: final loss {tt.loss_history[-1]:.6f}" if tt.loss_history else tt.variant.value)
    return 0


def cmd_fuse(args) -> int:
    from .core import read_embedding_set
    from .ensemble import write_fused_gallery
    from .scenarios import ensemble_items, joint_items
    from .transform.io import load_transform
    from .transform.train import Variant

    tts = [load_transform(p) for p in args.transforms]
    gallery = [read_embedding_set(p) for p in args.gallery]
    if len(tts) == 1 and tts[0].variant not in (Variant.M2M, Variant.UNIFIED):
        if len(gallery) != len(tts[0].gallery_model_ids):
            raise InvalidConfig("a joint transform needs one gallery file per gallery model it was trained on")
        items = joint_items(tts[0], gallery)
    else:
        if len(tts) != len(gallery):
            raise InvalidConfig("give one gallery file per transform")
        items = ensemble_items(tts, gallery)
    write_fused_gallery(items, tts[0].query_model_id, args.output)
    print(f"fused {len(items)} gallery items from {len(gallery)} model(s) into {args.output}")
    return 0


def cmd_eval(args) -> int:
    from .evalproto import export_report
    from .scenarios import evaluate_artifacts

    spec = dict(DEFAULT_CONFIG["eval"])
    if args.config:
        spec = ExperimentConfig.load(args.config).eval
    for p in (args.gallery, args.mated, args.nonmated):
        if not Path(p).exists():
            raise FileNotFoundError(f"missing input file {p}")
    metrics = evaluate_artifacts(args.gallery, args.mated, args.nonmated, spec, risk=args.risk)
    curves = [{"curve": "open_set_tar", "x_kind": "far", "points": [
        {"x": float(k), "value": v, "policy": "", "seed_count": 1} for k, v in metrics["open_set_tar"].items()]}]
    for policy, pts in metrics.get("risk_coverage", {}).items():
        curves.append({"curve": "risk_coverage", "x_kind": "coverage", "points": [
            {"x": float(c), "value": v, "policy": policy,
             "seed_count": spec["rejection_seeds"] if policy == "random" else 1} for c, v in pts.items()]})
    result = {"eval": spec, "inputs": {"gallery": str(args.gallery), "mated": str(args.mated),
                                       "nonmated": str(args.nonmated)}, "metrics": metrics, "curves": curves}
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_report(result, out)
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return 0


def cmd_scenario(args) -> int:
    from .scenarios import SCENARIOS, run_scenario

    cfg = _load_config(args)
    names = SCENARIOS if args.name == "all" else [args.name]
    for name in names:
        result = run_scenario(name, cfg, _out(args, cfg), args.force, args.threads)
        primary = f"{cfg.eval['primary_far']:g}"
        for arm, res in result["arms"].items():
            print(f"{name:16s} {arm:14s} open-set TAR@FAR={primary}: {res['mean']['open_set_tar'][primary]:.4f}")
    return 0


def cmd_report(args) -> int:
    from .evalproto import export_report

    cfg = _load_config(args)
    root = _out(args, cfg)
    reports = sorted((root / "scenarios").glob("*/report.json"))
    if not reports:
        raise FileNotFoundError(f"no scenario reports under {root / 'scenarios'}")
    curves, hashes = [], set()
    for path in reports:
        rep = json.loads(path.read_text(encoding="utf-8"))
        hashes.add(rep["config_hash"])
        for c in rep["curves"]:
            curves.append(dict(c, curve=f"{rep['scenario']}/{c['curve']}"))
    if len(hashes) > 1:
        raise InvalidConfig("scenario reports come from different configs")
    summary = {"config_hash": hashes.pop(), "scenarios": [p.parent.name for p in reports], "curves": curves}
    json_path, csv_path = export_report(summary, root / "summary.json")
    print(f"wrote {json_path} and {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults are built in")
    common.add_argument("--out", help="output directory (overrides the config's output_dir)")
    common.add_argument("--seed", type=int, help="master seed (u64) overriding the config")
    common.add_argument("--threads", type=int, default=1, help="worker processes for replicates")
    common.add_argument("--force", action="store_true", help="replace artifacts made with a different config")
    common.add_argument("-v", "--verbose", action="store_true")

    # global flags are accepted after the verb: cmcens scenario diversity --config c.json
    p = argparse.ArgumentParser(prog="cmcens", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth-gen", parents=[common], help="generate embedding sets for every model and split")
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("train-transform", parents=[common], help="train one transform and store it")
    s.add_argument("--variant", required=True, choices=["m2m", "unified", "e2e_mean", "e2e_weighted", "concat"])
    s.add_argument("--gallery", nargs="+", required=True, help="gallery model ids")
    s.add_argument("--query", help="query model id (default: the roster's query model)")
    s.add_argument("--replicate", type=int, default=0)
    s.set_defaults(func=cmd_train_transform)

    s = sub.add_parser("fuse", parents=[common], help="transform and fuse gallery embeddings")
    s.add_argument("--transforms", nargs="+", required=True, help="transform parameter files")
    s.add_argument("--gallery", nargs="+", required=True, help="gallery embedding files, aligned with --transforms")
    s.add_argument("--output", required=True, help="fused gallery file to write")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("eval", parents=[common], help="evaluate a fused gallery against probe files")
    s.add_argument("--gallery", required=True)
    s.add_argument("--mated", required=True)
    s.add_argument("--nonmated", required=True)
    s.add_argument("--report", required=True, help="report JSON path (CSV written alongside)")
    s.add_argument("--risk", action="store_true", help="also compute risk-coverage curves")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("scenario", parents=[common], help="run a scenario end to end")
    s.add_argument("name", help="ensemble_size, diversity, fusion_variants, risk_coverage, model_update or all")
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("report", parents=[common], help="collect scenario reports into one summary")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise InvalidConfig("--threads must be >= 1")
        return args.func(args)
    except InvalidConfig as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except (CMCError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
