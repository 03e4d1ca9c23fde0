"""Counterfactual data augmentation: synthesize flipped-label samples from
train-split factuals, merge them into the train split, and retrain.

Only the train split is ever augmented; val and test stay untouched. Each
augmented sample is labeled with the generation flip target; its artifact
label is the detector's factual decision, and its subgroup is recomputed
from that pair. Generating counterfactuals mostly from majority-subgroup
factuals therefore fills the minority cells.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import (
    SUBGROUPS,
    DatasetIndex,
    DatasetManifest,
    DatasetSpec,
    FileRecord,
    subgroup_of,
)
from .diffusion import DenoiserCheckpoint
from .errors import LoadError, PersistenceError, ValidationError
from .guidance import CounterfactualRecord, GuidanceConfig, generate_counterfactuals
from .images import save_png
from .predictors import (
    PredictorCheckpoint,
    SubgroupAccuracyReport,
    TrainConfig,
    evaluate_subgroups,
    train_erm,
    train_group_dro,
)

log = logging.getLogger(__name__)

AUGMENTED_MANIFEST_NAME = "augmented_manifest.json"
AUGMENTED_VERSION = 1

# factual selection: fraction drawn from majority subgroups (whose flipped
# counterfactuals land in minority cells), remainder from minority subgroups
DEFAULT_MAJORITY_FRACTION = 0.9


@dataclass
class AugmentedManifest:
    base: DatasetManifest
    base_root: str
    generator: dict  # mode + guidance config snapshot
    counts: dict[str, int]
    files: list[dict]  # FileRecord fields + source_sample_id
    requested_n: int
    root: Path | None = None

    def to_dict(self) -> dict:
        doc = self.base.to_dict()
        doc["augmented"] = {
            "version": AUGMENTED_VERSION,
            "base_root": self.base_root,
            "generator": self.generator,
            "counts": self.counts,
            "requested_n": self.requested_n,
            "files": self.files,
        }
        return doc

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        path = out_dir / AUGMENTED_MANIFEST_NAME
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise PersistenceError(f"failed to write augmented manifest {path}: {exc}") from exc
        self.root = out_dir
        return path

    def merged_index(self) -> DatasetIndex:
        """Index over base-union-augmented train plus the untouched base
        val/test splits. Augmented records resolve against this manifest's
        own root via absolute paths."""
        if self.root is None:
            raise ValidationError("augmented manifest root unknown; save or load it first")
        base_index_root = Path(self.base_root)
        merged_files = list(self.base.files)
        for f in self.files:
            merged_files.append(
                FileRecord(
                    sample_id=f["sample_id"],
                    path=str((self.root / f["path"]).resolve()),
                    class_label=int(f["class_label"]),
                    artifact_label=int(f["artifact_label"]),
                    nuisance_attr=int(f["nuisance_attr"]),
                    subgroup=f["subgroup"],
                    split="train",
                )
            )
        merged = DatasetManifest(
            spec=self.base.spec,
            counts=self.base.counts,
            files=merged_files,
            checksum=self.base.checksum,
            root=base_index_root,
        )
        return DatasetIndex(merged, root=base_index_root)


def load_augmented_manifest(path: str | Path) -> AugmentedManifest:
    path = Path(path)
    if path.is_dir():
        path = path / AUGMENTED_MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
        aug = doc["augmented"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise LoadError(f"failed to read augmented manifest {path}: {exc}") from exc
    base = DatasetManifest(
        spec=DatasetSpec.from_dict(doc["spec"]),
        counts=doc["counts"],
        files=[FileRecord.from_dict(f) for f in doc["files"]],
        checksum=doc["checksum"],
        root=Path(aug["base_root"]),
    )
    return AugmentedManifest(
        base=base,
        base_root=aug["base_root"],
        generator=aug["generator"],
        counts=aug["counts"],
        files=aug["files"],
        requested_n=aug.get("requested_n", len(aug["files"])),
        root=path.parent,
    )


def _select_factual_ids(
    index: DatasetIndex,
    n: int,
    majority_fraction: float,
    rng: np.random.Generator,
) -> list[str]:
    """Stratified factual selection from the train split.

    `majority_fraction` of the picks come from majority subgroups (split
    evenly between maj_S and maj_H); the rest from minority subgroups.
    Shortfalls in one stratum are backfilled from the remaining pool.
    """
    by_group: dict[str, list[str]] = {g: [] for g in SUBGROUPS}
    for rec in index.manifest.split_files("train"):
        by_group[rec.subgroup].append(rec.sample_id)
    for ids in by_group.values():
        rng.shuffle(ids)

    n_major = round(majority_fraction * n)
    quotas = {
        "maj_S": n_major - n_major // 2,
        "maj_H": n_major // 2,
        "min_S": (n - n_major) - (n - n_major) // 2,
        "min_H": (n - n_major) // 2,
    }
    picked: list[str] = []
    for g in SUBGROUPS:
        take = min(quotas[g], len(by_group[g]))
        picked.extend(by_group[g][:take])
        by_group[g] = by_group[g][take:]
    pool = [sid for g in SUBGROUPS for sid in by_group[g]]
    rng.shuffle(pool)
    picked.extend(pool[: n - len(picked)])
    if len(picked) < n:
        raise ValidationError(f"train split has only {len(picked)} samples, {n} requested")
    return picked


def synthesize_augmentation_set(
    n: int,
    config: GuidanceConfig,
    manifest: DatasetManifest,
    ddpm: DenoiserCheckpoint,
    classifier: PredictorCheckpoint,
    detector: PredictorCheckpoint,
    out_dir: str | Path,
    mode: str = "decodex",
    majority_fraction: float = DEFAULT_MAJORITY_FRACTION,
    base_root: str | Path | None = None,
) -> tuple[AugmentedManifest, list[CounterfactualRecord]]:
    """Generate n counterfactuals from train factuals and write them as new
    train samples labeled with the flip target.

    Records whose classifier decision did not flip are excluded, so the set
    may come up short (logged as a warning; the manifest records both the
    requested and achieved counts).
    """
    if n < 1:
        raise ValidationError(f"augmentation size must be >= 1, got {n}")
    if not 0.0 <= majority_fraction <= 1.0:
        raise ValidationError("majority_fraction must be in [0, 1]")
    index = DatasetIndex(manifest, root=base_root)
    rng = np.random.default_rng(config.rng_seed)
    factual_ids = _select_factual_ids(index, n, majority_fraction, rng)
    factuals = [index.load_sample(sid) for sid in factual_ids]

    records = generate_counterfactuals(factuals, config, ddpm, classifier, detector, mode=mode)
    kept = [r for r in records if r.flipped_class()]
    dropped = len(records) - len(kept)
    if dropped:
        log.warning("augmentation: %d of %d counterfactuals failed to flip and were excluded", dropped, len(records))

    out_dir = Path(out_dir)
    files: list[dict] = []
    counts = {g: 0 for g in SUBGROUPS}
    for r in kept:
        artifact_state = int(r.det_prob_factual > 0.5)
        group = subgroup_of(r.target_class, artifact_state)
        sid = f"aug_{r.sample_id}"
        rel = f"images/{sid}.png"
        save_png(out_dir / rel, r.counterfactual)
        src = index.record(r.sample_id)
        files.append(
            {
                "sample_id": sid,
                "path": rel,
                "class_label": int(r.target_class),
                "artifact_label": artifact_state,
                "nuisance_attr": src.nuisance_attr,
                "subgroup": group,
                "split": "train",
                "source_sample_id": r.sample_id,
            }
        )
        counts[group] += 1

    aug = AugmentedManifest(
        base=index.manifest,
        base_root=str(index.root),
        generator={"mode": mode, "guidance": config.to_dict(), "majority_fraction": majority_fraction},
        counts=counts,
        files=files,
        requested_n=n,
    )
    aug.save(out_dir)
    return aug, records


def retrain_with_augmentation(
    config: TrainConfig,
    augmented: AugmentedManifest,
    objective: str,
    base_checkpoint: PredictorCheckpoint,
) -> tuple[PredictorCheckpoint, tuple[SubgroupAccuracyReport, SubgroupAccuracyReport]]:
    """Retrain from scratch on base-union-augmented train data and report
    test subgroup accuracies before (base checkpoint) and after."""
    merged = augmented.merged_index()
    before = evaluate_subgroups(base_checkpoint, merged, "test")
    if objective == "erm":
        ckpt = train_erm(config, merged, base_checkpoint.role)
    elif objective == "group_dro":
        ckpt = train_group_dro(config, merged, base_checkpoint.role)
    else:
        raise ValidationError(f"unknown objective {objective!r}")
    after = evaluate_subgroups(ckpt, merged, "test")
    return ckpt, (before, after)
