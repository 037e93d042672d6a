"""Command-line interface.

Commands: synth, fit-t2, preprocess, train, eval, baseline, ablate, rank,
subgroups.  Every command is deterministic given its arguments: reports are
canonical JSON (sorted keys) embedding the argument set and its hash, so a
repeated run reproduces every output byte for byte.

Exit codes: 0 success, 2 contract violation or undefined metric, 64 usage.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, evaluation, store
from .cohort import SynthConfig, assemble_dataset, clinical_dim, make_split, progressor_flags, synth_subject
from .errors import ContractViolation, UndefinedMetric
from .imaging import build_pipeline
from .interpret import rur_report
from .models import ArchSpec, apply_checkpoint, build_model, load_checkpoint, save_checkpoint
from .provider import CohortProvider
from .relaxometry import FitConfig, MultiEchoVolume, fit_t2_volume
from .store import canonical_json, load_cohort, save_cohort
from .training import TrainConfig, predict_scores, train_cv
from .vol1 import read_vol1, write_vol1


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _args_dict(args: argparse.Namespace) -> dict:
    d = {k: v for k, v in vars(args).items() if k != "func"}
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(d.items())}


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:16]


def _report(out_path: Path, command: str, args: argparse.Namespace, body: dict):
    cfg = _args_dict(args)
    payload = {"command": command, "config": cfg, "config_hash": _config_hash(cfg)}
    payload.update(body)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(canonical_json(payload))


def _dataset(manifest: str, horizon: int):
    return assemble_dataset(load_cohort(manifest), horizon)


def _split(dataset, args):
    return make_split(dataset, holdout_site=args.holdout_site, k=args.folds, seed=args.seed)


def _arch_spec(args) -> ArchSpec:
    protocols = tuple(p for p in (args.protocols or "").split(",") if p)
    clin = clinical_dim(args.clinical_set) if getattr(args, "clinical_set", None) else 0
    return ArchSpec(
        kind=args.arch,
        mri_protocols=protocols,
        clinical_dim=clin,
        descriptor_dim=args.descriptor_dim,
        trf_layers=args.trf_layers,
        trf_heads=args.trf_heads,
        dropout_rate=args.dropout_rate,
    )


def _provider_for(spec: ArchSpec, dataset, args) -> CohortProvider:
    protocols = (("XR",) if spec.uses_xr else ()) + tuple(spec.mri_protocols)
    return CohortProvider(
        dataset,
        protocols,
        scale=args.scale,
        clinical_variable_set=getattr(args, "clinical_set", None) if spec.clinical_dim else None,
    )


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_subjects=args.n,
        prevalence=args.prevalence,
        scale=args.scale,
        seed=args.seed,
        horizon=args.horizon,
        effect_size=args.effect_size,
    )
    flags = progressor_flags(cfg)
    out = Path(args.out)
    manifest = save_cohort(
        (synth_subject(cfg, i, bool(flags[i])) for i in range(cfg.n_subjects)), out
    )
    _report(
        out / "synth_report.json",
        "synth",
        args,
        {"manifest": manifest.name, "n_progressors": int(flags.sum())},
    )
    print(f"synth: wrote {cfg.n_subjects} subjects ({int(flags.sum())} progressors) to {args.out}")
    return 0


def _cmd_fit_t2(args) -> int:
    manifest_path = Path(args.cohort)
    payload = json.loads(manifest_path.read_text())
    if payload.get("format") != "cohort/1":
        raise ContractViolation(f"{args.cohort} is not a cohort manifest")
    out = Path(args.out)
    image_dir = out / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    config = FitConfig(tolerance=args.tolerance, max_iter=args.max_iter)
    stats = {}
    for entry in payload["subjects"]:
        sid = entry["subject_id"]
        ref = entry["images"].get("MULTI_ECHO")
        if ref is None:
            raise ContractViolation(f"subject {sid} has no multi-echo stack")
        data, spacing = read_vol1(manifest_path.parent / ref["path"])
        stack = MultiEchoVolume(data, np.asarray(ref["echo_times"]), spacing=tuple(spacing[:3]))
        pmap = fit_t2_volume(stack, config)
        t2_path = image_dir / f"{sid}_T2MAP.vol1"
        write_vol1(t2_path, pmap.t2, spacing=stack.spacing)
        stats[sid] = {
            "valid_fraction": float(pmap.valid_mask.mean()),
            "mean_t2_valid": float(pmap.t2[pmap.valid_mask].mean()) if pmap.valid_mask.any() else 0.0,
        }
        new_images = {}
        for key, old in entry["images"].items():
            old = dict(old)
            old["path"] = os.path.relpath(manifest_path.parent / old["path"], out)
            new_images[key] = old
        new_images["T2MAP"] = {"path": f"images/{t2_path.name}"}
        entry["images"] = new_images
    (out / store.MANIFEST_NAME).write_text(canonical_json(payload))
    _report(out / "fit_report.json", "fit-t2", args, {"subjects": stats})
    print(f"fit-t2: wrote T2 maps for {len(stats)} subjects to {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    records = {r.subject_id: r for r in load_cohort(args.cohort)}
    if args.subject not in records:
        raise ContractViolation(f"unknown subject {args.subject!r}")
    from .provider import _load_ref  # single-subject path shares the loader

    record = records[args.subject]
    if args.protocol == "T2MAP" and "T2MAP" not in record.image_refs:
        if "MULTI_ECHO" not in record.image_refs:
            raise ContractViolation(f"subject {args.subject} has no T2 source")
        stack = _load_ref(record.image_refs["MULTI_ECHO"], "MULTI_ECHO")
        pmap = fit_t2_volume(stack, FitConfig())
        from .imaging import Volume

        source = Volume(pmap.t2, spacing=stack.spacing)
    else:
        if args.protocol not in record.image_refs:
            raise ContractViolation(f"subject {args.subject} has no {args.protocol} image")
        source = _load_ref(record.image_refs[args.protocol], args.protocol)
    pipe = build_pipeline(args.protocol, args.mode, args.scale)
    result = pipe(source, np.random.default_rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vol_path = out / f"{args.subject}_{args.protocol}_{args.mode}.vol1"
    write_vol1(vol_path, result.data, spacing=result.spacing)
    _report(
        out / "preprocess_report.json",
        "preprocess",
        args,
        {
            "stages": pipe.stage_names(),
            "output": vol_path.name,
            "shape": list(result.data.shape),
            "spacing": [float(s) for s in result.spacing],
        },
    )
    print(f"preprocess: {args.protocol}/{args.mode} -> {vol_path}")
    return 0


def _cmd_train(args) -> int:
    dataset = _dataset(args.cohort, args.horizon)
    split = _split(dataset, args)
    spec = _arch_spec(args)
    provider = _provider_for(spec, dataset, args)
    config = TrainConfig(epochs_budget=args.epochs, seed=args.seed, batch_size=args.batch_size)
    result = train_cv(provider, split, spec, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = result.fold_models()
    summary_folds = []
    for i, (fold, model) in enumerate(zip(result.folds, models)):
        fold_dir = out / f"fold_{i}"
        fold_dir.mkdir(exist_ok=True)
        save_checkpoint(model, fold_dir / "checkpoint.bin")
        (fold_dir / "history.json").write_text(canonical_json(fold.history))
        summary_folds.append({"fold": i, "best_epoch": fold.best_epoch, "best_val_ap": fold.best_val_ap})
    cfg = _args_dict(args)
    (out / "config.json").write_text(canonical_json({"config": cfg, "config_hash": _config_hash(cfg)}))
    _report(out / "summary.json", "train", args, {"folds": summary_folds})
    mean_ap = float(np.mean([f.best_val_ap for f in result.folds]))
    print(f"train: {len(models)} folds, mean best val AP {mean_ap:.3f} -> {args.out}")
    return 0


def _load_run(run_dir: Path):
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise ContractViolation(f"{run_dir} is not a training run directory")
    cfg = json.loads(cfg_path.read_text())["config"]
    ns = argparse.Namespace(**cfg)
    spec = _arch_spec(ns)
    models = []
    fold = 0
    while (run_dir / f"fold_{fold}").exists():
        model = build_model(spec, seed=0)
        apply_checkpoint(model, load_checkpoint(run_dir / f"fold_{fold}" / "checkpoint.bin"))
        models.append(model)
        fold += 1
    if not models:
        raise ContractViolation(f"no fold checkpoints under {run_dir}")
    return ns, spec, models


def _fold_scores(models, provider, split, ids) -> np.ndarray:
    """Ensemble fold models, each with its own fold-training clinical stats."""
    acc = np.zeros(len(ids))
    for model, (train_ids, _) in zip(models, split.folds):
        stats = provider.clinical_stats(train_ids)
        acc += predict_scores(model, provider, ids, clinical_stats=stats)
    return acc / len(models)


def _cmd_eval(args) -> int:
    run_dir = Path(args.run)
    run_args, spec, models = _load_run(run_dir)
    dataset = _dataset(args.cohort, run_args.horizon)
    split = _split(dataset, run_args)
    provider = _provider_for(spec, dataset, run_args)
    ids = split.test_ids
    if not ids:
        raise ContractViolation("held-out site has no subjects")
    scores = _fold_scores(models, provider, split, ids)
    labels = dataset.label_array(ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.json").write_text(
        canonical_json(
            {
                "horizon": run_args.horizon,
                "ids": list(ids),
                "labels": [int(v) for v in labels],
                "scores": [float(s) for s in scores],
            }
        )
    )
    metrics = {}
    for name, fn in evaluation.METRICS.items():
        est = evaluation.stratified_bootstrap(fn, scores, labels, n_boot=args.bootstrap, seed=args.seed)
        metrics[name] = {
            "point": est.point,
            "boot_mean": est.boot_mean,
            "boot_se": est.boot_se,
            "n_boot": est.n_boot,
        }
    cal = evaluation.calibrated_ap(scores, labels, args.target_prevalence)
    metrics["calibrated_ap"] = {"point": float(cal), "target_prevalence": args.target_prevalence}
    _report(out / "metrics.json", "eval", args, {"metrics": metrics, "n_test": len(ids)})
    print(
        "eval: AUC {:.3f}, AP {:.3f} on {} held-out subjects".format(
            metrics["roc_auc"]["point"], metrics["average_precision"]["point"], len(ids)
        )
    )
    return 0


def _cmd_baseline(args) -> int:
    dataset = _dataset(args.cohort, args.horizon)
    split = _split(dataset, args)
    model = baselines.lr_fit_cv(dataset, split, args.variable_set)
    ids = split.test_ids
    if not ids:
        raise ContractViolation("held-out site has no subjects")
    scores = baselines.lr_predict(model, dataset, ids)
    labels = dataset.label_array(ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.json").write_text(
        canonical_json(
            {
                "horizon": args.horizon,
                "ids": list(ids),
                "labels": [int(v) for v in labels],
                "scores": [float(s) for s in scores],
            }
        )
    )
    metrics = {}
    for name, fn in evaluation.METRICS.items():
        est = evaluation.stratified_bootstrap(fn, scores, labels, n_boot=args.bootstrap, seed=args.seed)
        metrics[name] = {
            "point": est.point,
            "boot_mean": est.boot_mean,
            "boot_se": est.boot_se,
            "n_boot": est.n_boot,
        }
    _report(
        out / "baseline_report.json",
        "baseline",
        args,
        {
            "metrics": metrics,
            "weighting": model.weighting,
            "weighting_val_ap": model.weighting_val_ap,
            "n_test": len(ids),
        },
    )
    print(
        "baseline {}: AUC {:.3f} (weighting={})".format(
            args.variable_set, metrics["roc_auc"]["point"], model.weighting
        )
    )
    return 0


def _cmd_ablate(args) -> int:
    run_dir = Path(args.run)
    run_args, spec, models = _load_run(run_dir)
    dataset = _dataset(args.cohort, run_args.horizon)
    split = _split(dataset, run_args)
    provider = _provider_for(spec, dataset, run_args)
    ids = split.test_ids
    if not ids:
        raise ContractViolation("held-out site has no subjects")
    dev_ids = sorted(set(dataset.ids) - set(ids))
    stats = provider.clinical_stats(dev_ids)
    batch, targets = provider.batch(ids, mode="eval", clinical_stats=stats)
    batch.means = provider.modality_means(dev_ids, clinical_stats=stats)
    modalities = spec.token_modalities() + (("CLIN",) if spec.clinical_dim else ())
    report = rur_report(models, batch, targets, modalities)
    out = Path(args.out)
    _report(
        out / "ablate_report.json",
        "ablate",
        args,
        {
            "modalities": list(report.modalities),
            "mean_rur": [float(v) for v in report.mean],
            "per_subject_rur": [[float(v) for v in row] for row in report.per_subject],
            "ids": list(ids),
        },
    )
    pairs = ", ".join(f"{m}={v:.3f}" for m, v in zip(report.modalities, report.mean))
    print(f"ablate: mean RUR {pairs}")
    return 0


def _cmd_rank(args) -> int:
    if args.table:
        raw = json.loads(Path(args.table).read_text())
        table = evaluation.RankingTable(
            settings=tuple(raw["settings"]),
            metrics=tuple(raw["metrics"]),
            horizons=tuple(raw["horizons"]),
            values=raw["values"],
        )
    else:
        table = evaluation.reference_ranking_table()
    result = evaluation.rank_settings(table)
    out = Path(args.out)
    _report(
        out / "rank_report.json",
        "rank",
        args,
        {
            "winner": result.winner,
            "tied": result.tied,
            "totals": {k: float(v) for k, v in sorted(result.totals.items())},
        },
    )
    print(f"rank: winner {result.winner} (total rank {result.totals[result.winner]:.1f})")
    return 0


def _cmd_subgroups(args) -> int:
    records = {r.subject_id: r for r in load_cohort(args.cohort)}
    per_horizon = {}
    for item in args.scores:
        if ":" not in item:
            raise ContractViolation("scores entries must look like HORIZON:path")
        h_str, path = item.split(":", 1)
        payload = json.loads(Path(path).read_text())
        per_horizon[int(h_str)] = (payload["ids"], payload["scores"], payload["labels"])
    report = evaluation.subgroup_report(records, per_horizon)
    out = Path(args.out)
    _report(out / "subgroups_report.json", "subgroups", args, {"subgroups": report})
    n_groups = sum(len(v) for v in report.values())
    print(f"subgroups: {n_groups} groups over {len(per_horizon)} horizons")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def _add_split_args(p):
    p.add_argument("--horizon", type=int, default=24)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--holdout-site", default="D")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> _Parser:
    parser = _Parser(prog="koafusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--prevalence", type=float, default=0.15)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=24)
    p.add_argument("--effect-size", type=float, default=1.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fit-t2", help="fit T2 maps for every subject")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=50)
    p.set_defaults(func=_cmd_fit_t2)

    p = sub.add_parser("preprocess", help="run one preprocessing chain")
    p.add_argument("--cohort", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--protocol", required=True, choices=["XR", "DESS", "TSE", "T2MAP"])
    p.add_argument("--mode", default="eval", choices=["train", "eval"])
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="cross-validated model training")
    p.add_argument("--cohort", required=True)
    p.add_argument("--arch", required=True, choices=["XR1", "MR1", "XR1MR1", "MR2", "XR1MR2", "XR1MR2C1"])
    p.add_argument("--protocols", default="")
    p.add_argument("--clinical-set", default=None, choices=["C1", "C2", "C3", "C4"])
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--descriptor-dim", type=int, default=64)
    p.add_argument("--trf-layers", type=int, default=4)
    p.add_argument("--trf-heads", type=int, default=8)
    p.add_argument("--dropout-rate", type=float, default=0.1)
    _add_split_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a run on the held-out site")
    p.add_argument("--run", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-prevalence", type=float, default=0.15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("baseline", help="clinical logistic-regression baseline")
    p.add_argument("--cohort", required=True)
    p.add_argument("--variable-set", required=True, choices=["C1", "C2", "C3", "C4"])
    p.add_argument("--bootstrap", type=int, default=1000)
    _add_split_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("ablate", help="modality ablation report for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("rank", help="aggregate ranks across metrics and horizons")
    p.add_argument("--table", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_rank)

    p = sub.add_parser("subgroups", help="subgroup metrics from saved scores")
    p.add_argument("--cohort", required=True)
    p.add_argument("--scores", action="append", required=True, metavar="HORIZON:PATH")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_subgroups)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 64
    try:
        return args.func(args)
    except (ContractViolation, UndefinedMetric) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
