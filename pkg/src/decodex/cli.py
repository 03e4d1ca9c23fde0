"""Command-line pipeline driver.

Subcommands: dataset, train, counterfactual, metrics, augment, retrain.
Exit codes: 0 success, 2 usage/config error, 1 runtime failure. Every
command echoes its materialized config into the output directory; reruns
with the same config and seed overwrite with identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import augmentation as aug_mod
from . import config as config_mod
from .dataset import SPLITS, SUBGROUPS, DatasetIndex, generate_dataset, load_manifest
from .diffusion import load_denoiser, save_denoiser, train_denoiser
from .errors import LoadError, ValidationError
from .guidance import MODES, GuidanceConfig, generate_counterfactuals, read_run, write_run
from .images import save_triptych
from .metrics import comparison_csv, metrics_report
from .predictors import (
    evaluate_subgroups,
    load_checkpoint,
    save_checkpoint,
    train_erm,
    train_group_dro,
)

ROLE_ALIASES = {"probe": "attribute_probe"}


def _parse_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON config file (defaults used when omitted)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the top-level rng_seed")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted-path config override, repeatable")


def _load_cfg(args) -> dict:
    cfg = config_mod.load_config(args.config)
    cfg = config_mod.apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg["rng_seed"] = args.seed
    return cfg


def _load_models(models_dir: Path, names: tuple[str, ...]):
    out = []
    for name in names:
        if name == "denoiser":
            out.append(load_denoiser(models_dir / "denoiser"))
        else:
            out.append(load_checkpoint(models_dir / name))
    return out


def _select_factuals(index: DatasetIndex, split: str, n: int, seed: int, subgroup: str | None = None):
    ids = index.split_ids(split)
    if subgroup is not None:
        ids = [sid for sid in ids if index.record(sid).subgroup == subgroup]
    order = np.arange(len(ids))
    np.random.default_rng(seed).shuffle(order)
    picked = [ids[i] for i in order[:n]]
    if len(picked) < n:
        raise ValidationError(f"split {split!r} has only {len(picked)} eligible factuals, {n} requested")
    return [index.load_sample(sid) for sid in picked]


# ---------------------------------------------------------------------------
# Commands


def cmd_dataset(args) -> int:
    cfg = _load_cfg(args)
    spec = config_mod.build_dataset_spec(cfg)
    manifest = generate_dataset(spec, args.out)
    config_mod.echo_config(cfg, args.out)
    print(f"dataset written to {args.out}")
    print(f"{'split':<8}" + "".join(f"{g:>8}" for g in SUBGROUPS) + f"{'total':>8}")
    for split in SPLITS:
        row = manifest.counts[split]
        print(f"{split:<8}" + "".join(f"{row[g]:>8}" for g in SUBGROUPS) + f"{sum(row.values()):>8}")
    print(f"checksum {manifest.checksum}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    manifest = load_manifest(args.data)
    index = DatasetIndex(manifest)
    config_mod.echo_config(cfg, args.out)

    if args.role == "denoiser":
        ckpt = train_denoiser(config_mod.build_ddpm_config(cfg), index)
        path = save_denoiser(ckpt, args.out)
        print(f"denoiser saved to {path}; final val denoising loss {ckpt.metrics['final_val_loss']:.4f}")
        return 0

    role = ROLE_ALIASES.get(args.role, args.role)
    section = {"classifier": "classifier", "detector": "detector", "attribute_probe": "probe"}[role]
    train_cfg = config_mod.build_train_config(cfg, section, objective=args.objective)
    trainer = train_group_dro if train_cfg.objective == "group_dro" else train_erm
    ckpt = trainer(train_cfg, index, role)
    path = save_checkpoint(ckpt, args.out, name=args.name or role)
    report = evaluate_subgroups(ckpt, index, "val")
    print(f"{role} ({train_cfg.objective}) saved to {path}")
    print("val accuracy per subgroup: " + ", ".join(f"{g}={report.per_subgroup[g]:.3f}" for g in SUBGROUPS))
    print(f"overall {report.overall:.3f}, worst group {report.worst_group:.3f}")
    return 0


def cmd_counterfactual(args) -> int:
    cfg = _load_cfg(args)
    manifest = load_manifest(args.data)
    index = DatasetIndex(manifest)
    classifier, detector, ddpm = _load_models(args.models, ("classifier", "detector", "denoiser"))
    gcfg = config_mod.build_guidance_config(cfg)

    # detector-explanation runs target artifact-bearing diseased factuals
    subgroup = "maj_S" if args.mode == "explain_detector" else None
    factuals = _select_factuals(index, args.split, args.n, gcfg.rng_seed, subgroup=subgroup)
    records = generate_counterfactuals(factuals, gcfg, ddpm, classifier, detector, mode=args.mode)
    write_run(records, args.out, args.mode, gcfg)
    config_mod.echo_config(cfg, args.out)

    if cfg["output"]["emit_grids"]:
        for r in records:
            save_triptych(args.out / "grids" / f"{r.sample_id}_grid.png", r.factual, r.counterfactual, scale=cfg["output"]["figure_scale"])

    n_flip = sum(r.flipped_class() for r in records)
    n_robust = sum(r.detector_unchanged() for r in records)
    print(f"{args.mode} run: {len(records)} records -> {args.out}")
    print(f"classifier flips {n_flip}/{len(records)}, detector unchanged {n_robust}/{len(records)}")
    return 0


def cmd_metrics(args) -> int:
    cfg = _load_cfg(args)
    names = ("classifier", "detector")
    classifier, detector = _load_models(args.models, names)
    probe = None
    if (args.models / "attribute_probe.json").exists():
        probe = load_checkpoint(args.models / "attribute_probe")

    reports = {}
    for run_dir in args.run:
        records, run_meta = read_run(run_dir)
        digest = json.dumps(run_meta.get("guidance", {}), sort_keys=True)
        report = metrics_report(classifier, detector, probe, records, config_digest=digest)
        name = run_meta.get("mode", Path(run_dir).name)
        reports[name] = report
        report.save(args.out, name=f"report_{name}")
        print(f"{name}: n={report.n_records} CFR={report.cfr:.4f} DRR={report.drr:.4f} "
              f"L1={report.l1_mean:.4f} CPG={report.cpg_mean:.4f} SCLS={report.scls_mean:.4f}")
    config_mod.echo_config(cfg, args.out)
    if len(reports) > 1:
        path = comparison_csv(reports, args.out / "comparison.csv")
        print(f"comparison table -> {path}")
    return 0


def cmd_augment(args) -> int:
    cfg = _load_cfg(args)
    manifest = load_manifest(args.data)
    classifier, detector, ddpm = _load_models(args.models, ("classifier", "detector", "denoiser"))
    gcfg = config_mod.build_guidance_config(cfg)
    gcfg = GuidanceConfig.from_dict({**gcfg.to_dict(), "rng_seed": config_mod.stage_seed(cfg, "augmentation")})
    n = args.n if args.n is not None else cfg["augmentation"]["n"]
    aug, records = aug_mod.synthesize_augmentation_set(
        n,
        gcfg,
        manifest,
        ddpm,
        classifier,
        detector,
        args.out,
        mode=args.mode or cfg["augmentation"]["mode"],
        majority_fraction=cfg["augmentation"]["majority_fraction"],
    )
    config_mod.echo_config(cfg, args.out)
    total = sum(aug.counts.values())
    print(f"augmentation set: {total}/{n} counterfactuals kept -> {args.out}")
    print("subgroup counts: " + ", ".join(f"{g}={aug.counts[g]}" for g in SUBGROUPS))
    return 0


def cmd_retrain(args) -> int:
    cfg = _load_cfg(args)
    augmented = aug_mod.load_augmented_manifest(args.data)
    base_ckpt = load_checkpoint(args.models / args.base_name)
    train_cfg = config_mod.build_train_config(cfg, "classifier", objective=args.objective)
    ckpt, (before, after) = aug_mod.retrain_with_augmentation(train_cfg, augmented, train_cfg.objective, base_ckpt)
    save_checkpoint(ckpt, args.out, name=args.name or f"{base_ckpt.role}_augmented")
    config_mod.echo_config(cfg, args.out)

    table = args.out / "before_after.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model"] + list(SUBGROUPS) + ["overall", "worst_group"])
        for label, rep in (("before", before), ("after", after)):
            writer.writerow(
                [label]
                + [f"{rep.per_subgroup[g]:.4f}" if rep.per_subgroup[g] is not None else "" for g in SUBGROUPS]
                + [f"{rep.overall:.4f}", f"{rep.worst_group:.4f}"]
            )
    print(f"retrained ({train_cfg.objective}); before/after test accuracies -> {table}")
    for label, rep in (("before", before), ("after", after)):
        print(f"{label}: " + ", ".join(f"{g}={rep.per_subgroup[g]:.3f}" for g in SUBGROUPS) + f", worst {rep.worst_group:.3f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decodex", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate the synthetic confounded dataset")
    _parse_common(p)
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("train", help="train a predictor or the denoiser")
    _parse_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory (with manifest.json)")
    p.add_argument("--role", required=True, choices=["classifier", "detector", "probe", "attribute_probe", "denoiser"])
    p.add_argument("--objective", default=None, choices=["erm", "group_dro"])
    p.add_argument("--name", default=None, help="checkpoint basename (defaults to the role)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("counterfactual", help="generate guided counterfactuals")
    _parse_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--models", type=Path, required=True, help="directory holding classifier/detector/denoiser checkpoints")
    p.add_argument("--mode", default="decodex", choices=list(MODES))
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--split", default="test", choices=list(SPLITS))
    p.set_defaults(fn=cmd_counterfactual)

    p = sub.add_parser("metrics", help="score one or two counterfactual runs")
    _parse_common(p)
    p.add_argument("--run", type=Path, action="append", required=True, help="run directory; give twice for a comparison table")
    p.add_argument("--models", type=Path, required=True)
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("augment", help="synthesize a counterfactual augmentation set")
    _parse_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--models", type=Path, required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--mode", default=None, choices=["decodex", "baseline"])
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("retrain", help="retrain a classifier on base + augmented data")
    _parse_common(p)
    p.add_argument("--data", type=Path, required=True, help="augmentation directory (with augmented_manifest.json)")
    p.add_argument("--models", type=Path, required=True, help="directory holding the base checkpoint")
    p.add_argument("--objective", default="erm", choices=["erm", "group_dro"])
    p.add_argument("--base-name", default="classifier", help="basename of the base checkpoint")
    p.add_argument("--name", default=None)
    p.set_defaults(fn=cmd_retrain)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValidationError, LoadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
