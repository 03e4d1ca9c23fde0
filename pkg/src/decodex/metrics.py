"""Counterfactual quality metrics.

All decision metrics threshold probabilities at 0.5. Probabilities are
recomputed from pixel pairs with the supplied predictor checkpoints, so a
report is a pure function of (checkpoints, records).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PersistenceError, ValidationError
from .guidance import CounterfactualRecord
from .predictors import DECISION_THRESHOLD, PredictorCheckpoint, predict_prob_batch

REPORT_VERSION = 1
CSV_COLUMNS = ("cfr", "drr", "l1_mean", "cpg_mean", "scls_mean")  # fixed comparison order


def l1_distance(factual: np.ndarray, counterfactual: np.ndarray) -> float:
    """Mean absolute pixel difference."""
    f = np.asarray(factual, dtype=np.float64)
    c = np.asarray(counterfactual, dtype=np.float64)
    if f.shape != c.shape:
        raise ValidationError(f"shape mismatch {f.shape} vs {c.shape}")
    return float(np.abs(f - c).mean())


def cpg(classifier: PredictorCheckpoint, factual: np.ndarray, counterfactual: np.ndarray) -> float:
    """Absolute change of the classifier's positive-class probability."""
    probs = predict_prob_batch(classifier, np.stack([factual, counterfactual]))
    return float(abs(probs[0] - probs[1]))


def scls(detector: PredictorCheckpoint, factual: np.ndarray, counterfactual: np.ndarray) -> float:
    """Absolute change of the detector's artifact probability; low means the
    artifact state was preserved."""
    probs = predict_prob_batch(detector, np.stack([factual, counterfactual]))
    return float(abs(probs[0] - probs[1]))


def _pair_probs(ckpt: PredictorCheckpoint, records: list[CounterfactualRecord]) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        raise ValidationError("no records given")
    f = predict_prob_batch(ckpt, np.stack([r.factual for r in records]))
    c = predict_prob_batch(ckpt, np.stack([r.counterfactual for r in records]))
    return f, c


def cfr(classifier: PredictorCheckpoint, records: list[CounterfactualRecord]) -> float:
    """Classifier flip rate: fraction of records whose thresholded decision
    changed between factual and counterfactual."""
    f, c = _pair_probs(classifier, records)
    return float(((f > DECISION_THRESHOLD) != (c > DECISION_THRESHOLD)).mean())


def drr(detector: PredictorCheckpoint, records: list[CounterfactualRecord]) -> float:
    """Detector robustness rate: fraction of records whose thresholded
    detector decision is unchanged."""
    f, c = _pair_probs(detector, records)
    return float(((f > DECISION_THRESHOLD) == (c > DECISION_THRESHOLD)).mean())


def attribute_preservation(probe: PredictorCheckpoint, records: list[CounterfactualRecord]) -> float:
    """Mean absolute probe-probability difference between factual and
    counterfactual images."""
    f, c = _pair_probs(probe, records)
    return float(np.abs(f - c).mean())


@dataclass
class MetricsReport:
    n_records: int
    cfr: float
    drr: float
    l1_mean: float
    cpg_mean: float
    scls_mean: float
    attr_pres_mean: float | None
    per_subgroup: dict
    config_digest: str

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "n": self.n_records,
            "cfr": self.cfr,
            "drr": self.drr,
            "l1_mean": self.l1_mean,
            "cpg_mean": self.cpg_mean,
            "scls_mean": self.scls_mean,
            "attr_pres_mean": self.attr_pres_mean,
            "per_subgroup": self.per_subgroup,
            "config_digest": self.config_digest,
        }

    def save(self, out_dir: str | Path, name: str = "report") -> Path:
        """JSON report plus a one-row CSV with the fixed column order."""
        out_dir = Path(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / f"{name}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
            with open(out_dir / f"{name}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(("n",) + tuple(c.upper() for c in CSV_COLUMNS))
                writer.writerow([self.n_records] + [f"{getattr(self, c):.6f}" for c in CSV_COLUMNS])
        except OSError as exc:
            raise PersistenceError(f"failed to write report to {out_dir}: {exc}") from exc
        return out_dir / f"{name}.json"


def metrics_report(
    classifier: PredictorCheckpoint,
    detector: PredictorCheckpoint,
    probe: PredictorCheckpoint | None,
    records: list[CounterfactualRecord],
    config_digest: str = "",
) -> MetricsReport:
    """Aggregate CFR, DRR, mean L1/CPG/SCLS (plus attribute preservation when
    a probe is given), with per-subgroup breakdowns."""
    if not records:
        raise ValidationError("metrics_report needs at least one record")
    clf_f, clf_c = _pair_probs(classifier, records)
    det_f, det_c = _pair_probs(detector, records)
    l1 = np.array([l1_distance(r.factual, r.counterfactual) for r in records])
    cpg_v = np.abs(clf_f - clf_c)
    scls_v = np.abs(det_f - det_c)
    flip = (clf_f > DECISION_THRESHOLD) != (clf_c > DECISION_THRESHOLD)
    robust = (det_f > DECISION_THRESHOLD) == (det_c > DECISION_THRESHOLD)
    attr = None
    if probe is not None:
        pf, pc = _pair_probs(probe, records)
        attr = float(np.abs(pf - pc).mean())

    per_subgroup: dict[str, dict] = {}
    groups = sorted({r.subgroup for r in records if r.subgroup is not None})
    for g in groups:
        sel = np.array([r.subgroup == g for r in records])
        per_subgroup[g] = {
            "n": int(sel.sum()),
            "cfr": float(flip[sel].mean()),
            "drr": float(robust[sel].mean()),
            "l1_mean": float(l1[sel].mean()),
            "cpg_mean": float(cpg_v[sel].mean()),
            "scls_mean": float(scls_v[sel].mean()),
        }

    return MetricsReport(
        n_records=len(records),
        cfr=float(flip.mean()),
        drr=float(robust.mean()),
        l1_mean=float(l1.mean()),
        cpg_mean=float(cpg_v.mean()),
        scls_mean=float(scls_v.mean()),
        attr_pres_mean=attr,
        per_subgroup=per_subgroup,
        config_digest=config_digest,
    )


def comparison_csv(reports: dict[str, MetricsReport], path: str | Path) -> Path:
    """Multi-row comparison table (e.g. baseline vs decodex), fixed column
    order CFR, DRR, L1, CPG, SCLS."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("method", "CFR", "DRR", "L1", "CPG", "SCLS"))
            for name, rep in reports.items():
                writer.writerow(
                    [name, f"{rep.cfr:.4f}", f"{rep.drr:.4f}", f"{rep.l1_mean:.4f}", f"{rep.cpg_mean:.4f}", f"{rep.scls_mean:.4f}"]
                )
    except OSError as exc:
        raise PersistenceError(f"failed to write comparison table {path}: {exc}") from exc
    return path
