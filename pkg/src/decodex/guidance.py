"""Detector-guided counterfactual generation.

A factual image is partially noised to depth tau, then denoised with a
guided reverse process. At each step the one-step clean estimate x_hat is
scored by three terms:

    total = lambda_c * BCE(classifier(x_hat), y_c)     # push toward the flip target
          + lambda_d * BCE(detector(x_hat), y_s)       # hold the artifact state fixed
          + lambda_p * mean|x_hat - x|                 # anchor the subject's identity

and the reverse-step mean is shifted by -beta_t times the gradient of the
total, mapped from x_hat-space to z_t-space by the 1/sqrt(alpha_bar_t)
chain-rule factor of the clean estimate (the noise estimate is held
constant when differentiating).

The detector term targets the detector's *factual* decision, so its
gradient opposes classifier gradients that route through the artifact.
With the roles swapped (flip the detector, hold the class) the same
machinery explains what the detector itself looks at.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import ImageSample, subgroup_of
from .diffusion import (
    DenoiserCheckpoint,
    NoiseSchedule,
    ancestral_loop,
    draw_noise,
    forward_noise,
    make_generators,
    predict_x0,
    reverse_step,
)
from .errors import GuidanceError, LoadError, PersistenceError, ValidationError
from .images import load_png, save_diff_png, save_png
from .predictors import DECISION_THRESHOLD, PredictorCheckpoint, predict_prob_batch

MODES = ("decodex", "baseline", "explain_detector")
RUN_MANIFEST_NAME = "run_manifest.json"


@dataclass(frozen=True)
class GuidanceConfig:
    lambda_c: float = 8.0
    lambda_d: float = 8.0
    lambda_p: float = 30.0
    tau: int = 200  # noise depth the factual is pushed to before guided denoising
    target_class: int | None = None     # None: flip of the classifier's factual decision
    target_artifact: int | None = None  # None: the detector's factual decision
    stochastic: bool = True
    rng_seed: int = 0
    from_pure_noise: bool = False  # start from z ~ N(0, I) instead of the noised factual

    def validate(self, T: int | None = None) -> None:
        if min(self.lambda_c, self.lambda_d, self.lambda_p) < 0:
            raise ValidationError("guidance weights must be nonnegative")
        if self.tau < 0:
            raise ValidationError(f"tau must be >= 0, got {self.tau}")
        if T is not None and self.tau > T:
            raise ValidationError(f"tau {self.tau} exceeds schedule length {T}")

    def to_dict(self) -> dict:
        return {
            "lambda_c": self.lambda_c,
            "lambda_d": self.lambda_d,
            "lambda_p": self.lambda_p,
            "tau": self.tau,
            "target_class": self.target_class,
            "target_artifact": self.target_artifact,
            "stochastic": self.stochastic,
            "rng_seed": self.rng_seed,
            "from_pure_noise": self.from_pure_noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass
class CounterfactualRecord:
    sample_id: str
    factual: np.ndarray
    counterfactual: np.ndarray
    clf_prob_factual: float
    clf_prob_cf: float
    det_prob_factual: float
    det_prob_cf: float
    loss_class: float  # final unweighted terms, evaluated at the counterfactual
    loss_det: float
    loss_perc: float
    target_class: int
    target_artifact: int
    config: dict
    mode: str
    step_count: int
    wall_time_s: float  # in-memory only; deliberately not persisted
    subgroup: str | None = None
    split: str | None = None

    def flipped_class(self) -> bool:
        return (self.clf_prob_cf > DECISION_THRESHOLD) != (self.clf_prob_factual > DECISION_THRESHOLD)

    def detector_unchanged(self) -> bool:
        return (self.det_prob_cf > DECISION_THRESHOLD) == (self.det_prob_factual > DECISION_THRESHOLD)


# ---------------------------------------------------------------------------
# Loss and gradient


def _as_batch(x) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=torch.float32)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    return t


def _term_losses(
    x_hat: torch.Tensor,
    x: torch.Tensor,
    y_c: torch.Tensor,
    y_s: torch.Tensor,
    clf_model: torch.nn.Module | None,
    det_model: torch.nn.Module | None,
) -> dict[str, torch.Tensor]:
    """Per-sample unweighted loss terms; entries are None-shaped zeros when the
    corresponding model is not supplied."""
    b = x_hat.shape[0]
    zeros = torch.zeros(b, dtype=x_hat.dtype)
    out = {"class": zeros, "det": zeros.clone(), "perc": (x_hat - x).abs().mean(dim=(1, 2, 3))}
    if clf_model is not None:
        out["class"] = F.binary_cross_entropy_with_logits(clf_model(x_hat), y_c, reduction="none")
    if det_model is not None:
        out["det"] = F.binary_cross_entropy_with_logits(det_model(x_hat), y_s, reduction="none")
    return out


def guidance_loss(
    x_hat: np.ndarray,
    x: np.ndarray,
    y_c: int,
    y_s: int,
    weights: tuple[float, float, float],
    classifier: PredictorCheckpoint | None,
    detector: PredictorCheckpoint | None,
) -> tuple[float, float, float, float]:
    """Weighted guidance total plus the three unweighted terms.

    Terms with zero weight are skipped (reported as 0.0) and their predictor
    may be None.
    """
    lam_c, lam_d, lam_p = weights
    with torch.no_grad():
        terms = _term_losses(
            _as_batch(x_hat),
            _as_batch(x),
            torch.tensor([float(y_c)]),
            torch.tensor([float(y_s)]),
            classifier.model() if (classifier is not None and lam_c > 0) else None,
            detector.model() if (detector is not None and lam_d > 0) else None,
        )
    vals = {k: float(v[0]) for k, v in terms.items()}
    for name, lam in (("class", lam_c), ("det", lam_d), ("perc", lam_p)):
        if lam > 0 and not math.isfinite(vals[name]):
            raise GuidanceError(f"non-finite {name} loss term")
        if lam == 0:
            vals[name] = 0.0
    total = lam_c * vals["class"] + lam_d * vals["det"] + lam_p * vals["perc"]
    return total, vals["class"], vals["det"], vals["perc"]


def _make_guidance_fn(
    schedule: NoiseSchedule,
    config: GuidanceConfig,
    clf_model: torch.nn.Module | None,
    det_model: torch.nn.Module | None,
    x: torch.Tensor,
    y_c: torch.Tensor,
    y_s: torch.Tensor,
):
    """Closure computing the z_t-space guidance gradient for a batch.

    Returns None when every weight is zero, so the ancestral loop reduces to
    unconditional sampling bit for bit.
    """
    lam_c, lam_d, lam_p = config.lambda_c, config.lambda_d, config.lambda_p
    if lam_c == 0 and lam_d == 0 and lam_p == 0:
        return None
    if lam_c > 0 and clf_model is None:
        raise ValidationError("lambda_c > 0 requires a classifier")
    if lam_d > 0 and det_model is None:
        raise ValidationError("lambda_d > 0 requires a detector")

    def fn(z: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
        # eps is treated as constant w.r.t. z_t: the only z_t dependence kept
        # is the linear map inside the clean estimate, whose chain-rule
        # factor is 1/sqrt(alpha_bar_t).
        x_hat = predict_x0(z, t, eps, schedule).detach().requires_grad_(True)
        terms = _term_losses(x_hat, x, y_c, y_s, clf_model if lam_c > 0 else None, det_model if lam_d > 0 else None)
        total = (lam_c * terms["class"] + lam_d * terms["det"] + lam_p * terms["perc"]).sum()
        (grad,) = torch.autograd.grad(total, x_hat)
        if not torch.isfinite(grad).all():
            norms = {k: float(v.detach().norm()) for k, v in terms.items()}
            raise GuidanceError(f"non-finite guidance gradient at t={t}; term norms {norms}")
        return grad / math.sqrt(schedule.alpha_bar(t))

    return fn


def guided_gradient(
    z_t: np.ndarray,
    t: int,
    config: GuidanceConfig,
    ddpm: DenoiserCheckpoint,
    classifier: PredictorCheckpoint | None,
    detector: PredictorCheckpoint | None,
    x: np.ndarray,
) -> np.ndarray:
    """Gradient of the guidance total with respect to z_t for one image.

    Targets must be resolved in the config (target_class / target_artifact).
    """
    config.validate(ddpm.schedule.T)
    if config.target_class is None or config.target_artifact is None:
        raise ValidationError("guided_gradient needs explicit target_class and target_artifact")
    z = _as_batch(z_t)
    fn = _make_guidance_fn(
        ddpm.schedule,
        config,
        classifier.model() if classifier is not None else None,
        detector.model() if detector is not None else None,
        _as_batch(x),
        torch.tensor([float(config.target_class)]),
        torch.tensor([float(config.target_artifact)]),
    )
    if fn is None:
        return np.zeros_like(np.asarray(z_t, dtype=np.float64))
    with torch.no_grad():
        eps = ddpm.model()(z, torch.full((1,), float(t)))
    return fn(z, t, eps)[0, 0].numpy().astype(np.float64)


def guided_step(
    z_t: np.ndarray,
    t: int,
    config: GuidanceConfig,
    ddpm: DenoiserCheckpoint,
    classifier: PredictorCheckpoint | None,
    detector: PredictorCheckpoint | None,
    x: np.ndarray,
    rng: torch.Generator | None = None,
) -> np.ndarray:
    """One guided reverse step: mean shifted by -beta_t * guidance gradient,
    plus sqrt(beta_t) noise when stochastic and t > 1."""
    if t < 1:
        raise ValidationError(f"guided_step needs t >= 1, got {t}")
    schedule = ddpm.schedule
    z = _as_batch(z_t)
    with torch.no_grad():
        eps = ddpm.model()(z, torch.full((1,), float(t)))
    mu = reverse_step(z, t, eps, schedule)
    g = guided_gradient(z_t, t, config, ddpm, classifier, detector, x)
    mu = mu - schedule.beta(t) * torch.from_numpy(g).float()[None, None]
    if config.stochastic and t > 1:
        if rng is None:
            rng = torch.Generator().manual_seed(config.rng_seed)
        mu = mu + math.sqrt(schedule.beta(t)) * torch.randn(z.shape[1:], generator=rng)
    return mu[0, 0].numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# Full counterfactual runs


def _resolve_targets(
    mode: str,
    clf_probs: np.ndarray,
    det_probs: np.ndarray,
    config: GuidanceConfig,
) -> tuple[np.ndarray, np.ndarray]:
    clf_hard = (clf_probs > DECISION_THRESHOLD).astype(np.int64)
    det_hard = (det_probs > DECISION_THRESHOLD).astype(np.int64)
    if mode == "explain_detector":
        # swap the roles: flip the detector, preserve the class decision
        y_c = clf_hard
        y_s = 1 - det_hard
    else:
        y_c = np.full_like(clf_hard, config.target_class) if config.target_class is not None else 1 - clf_hard
        y_s = np.full_like(det_hard, config.target_artifact) if config.target_artifact is not None else det_hard
        if (y_c == clf_hard).any():
            bad = int(np.argmax(y_c == clf_hard))
            raise ValidationError(
                f"target class {y_c[bad]} equals the classifier's factual decision (sample index {bad}); "
                "counterfactual targets must flip"
            )
    return y_c, y_s


def generate_counterfactuals(
    factuals: list[ImageSample],
    config: GuidanceConfig,
    ddpm: DenoiserCheckpoint,
    classifier: PredictorCheckpoint,
    detector: PredictorCheckpoint,
    mode: str = "decodex",
) -> list[CounterfactualRecord]:
    """Batched counterfactual generation; one record per factual.

    `baseline` is identical to `decodex` with the detector weight forced to
    zero. Each image owns an rng stream derived from (rng_seed, position),
    so reruns with the same ordering are byte-identical.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not factuals:
        raise ValidationError("no factual samples given")
    schedule = ddpm.schedule
    config.validate(schedule.T)
    run_cfg = replace(config, lambda_d=0.0) if mode == "baseline" else config

    side = ddpm.side()
    for s in factuals:
        if s.pixels.shape != (side, side):
            raise ValidationError(f"factual {s.sample_id} has shape {s.pixels.shape}, model expects ({side}, {side})")

    x_np = np.stack([s.pixels for s in factuals]).astype(np.float32)
    clf_probs = predict_prob_batch(classifier, x_np)
    det_probs = predict_prob_batch(detector, x_np)
    y_c, y_s = _resolve_targets(mode, clf_probs, det_probs, run_cfg)

    t0 = time.perf_counter()
    x = torch.from_numpy(x_np)[:, None]
    if run_cfg.tau == 0:
        cf_np = x_np.copy()
        steps = 0
    else:
        gens = make_generators(run_cfg.rng_seed, len(factuals))
        if run_cfg.from_pure_noise:
            z = draw_noise(gens, (1, side, side))
        else:
            z = forward_noise(x, run_cfg.tau, schedule, draw_noise(gens, (1, side, side)))
        fn = _make_guidance_fn(
            schedule,
            run_cfg,
            classifier.model(),
            detector.model(),
            x,
            torch.from_numpy(y_c.astype(np.float32)),
            torch.from_numpy(y_s.astype(np.float32)),
        )
        z0 = ancestral_loop(ddpm.model(), schedule, z, run_cfg.tau, gens, stochastic=run_cfg.stochastic, guidance_fn=fn)
        cf_np = np.clip(z0[:, 0].numpy(), 0.0, 1.0).astype(np.float32)
        steps = run_cfg.tau
    per_record_time = (time.perf_counter() - t0) / len(factuals)

    clf_probs_cf = predict_prob_batch(classifier, cf_np)
    det_probs_cf = predict_prob_batch(detector, cf_np)
    with torch.no_grad():
        terms = _term_losses(
            torch.from_numpy(cf_np)[:, None],
            x,
            torch.from_numpy(y_c.astype(np.float32)),
            torch.from_numpy(y_s.astype(np.float32)),
            classifier.model(),
            detector.model(),
        )

    records = []
    for i, s in enumerate(factuals):
        records.append(
            CounterfactualRecord(
                sample_id=s.sample_id,
                factual=x_np[i],
                counterfactual=cf_np[i],
                clf_prob_factual=float(clf_probs[i]),
                clf_prob_cf=float(clf_probs_cf[i]),
                det_prob_factual=float(det_probs[i]),
                det_prob_cf=float(det_probs_cf[i]),
                loss_class=float(terms["class"][i]),
                loss_det=float(terms["det"][i]),
                loss_perc=float(terms["perc"][i]),
                target_class=int(y_c[i]),
                target_artifact=int(y_s[i]),
                config=run_cfg.to_dict(),
                mode=mode,
                step_count=steps,
                wall_time_s=per_record_time,
                subgroup=s.subgroup,
                split=s.split,
            )
        )
    return records


def generate_counterfactual(
    factual: ImageSample,
    config: GuidanceConfig,
    ddpm: DenoiserCheckpoint,
    classifier: PredictorCheckpoint,
    detector: PredictorCheckpoint,
) -> CounterfactualRecord:
    """Flip the classifier while preserving the detector's artifact state."""
    return generate_counterfactuals([factual], config, ddpm, classifier, detector, mode="decodex")[0]


def explain_detector(
    factual: ImageSample,
    config: GuidanceConfig,
    ddpm: DenoiserCheckpoint,
    classifier: PredictorCheckpoint,
    detector: PredictorCheckpoint,
) -> CounterfactualRecord:
    """Roles swapped: flip the detector's decision while the classifier term
    preserves the factual class."""
    return generate_counterfactuals([factual], config, ddpm, classifier, detector, mode="explain_detector")[0]


# ---------------------------------------------------------------------------
# Persistence


def record_to_dict(record: CounterfactualRecord) -> dict:
    return {
        "sample_id": record.sample_id,
        "mode": record.mode,
        "clf_prob_factual": record.clf_prob_factual,
        "clf_prob_cf": record.clf_prob_cf,
        "det_prob_factual": record.det_prob_factual,
        "det_prob_cf": record.det_prob_cf,
        "loss_class": record.loss_class,
        "loss_det": record.loss_det,
        "loss_perc": record.loss_perc,
        "target_class": record.target_class,
        "target_artifact": record.target_artifact,
        "config": record.config,
        "step_count": record.step_count,
        "subgroup": record.subgroup,
        "split": record.split,
    }


def write_run(
    records: list[CounterfactualRecord],
    out_dir: str | Path,
    mode: str,
    config: GuidanceConfig,
) -> Path:
    """Persist a batch run: per record a factual/counterfactual PNG pair, a
    diverging difference map, and a metadata document; plus a run manifest."""
    out_dir = Path(out_dir)
    rec_dir = out_dir / "records"
    entries = []
    try:
        rec_dir.mkdir(parents=True, exist_ok=True)
        for r in records:
            sid = r.sample_id
            save_png(rec_dir / f"{sid}_factual.png", r.factual)
            save_png(rec_dir / f"{sid}_cf.png", r.counterfactual)
            save_diff_png(rec_dir / f"{sid}_diff.png", r.counterfactual.astype(np.float64) - r.factual.astype(np.float64))
            doc = record_to_dict(r)
            doc["factual_png"] = f"records/{sid}_factual.png"
            doc["cf_png"] = f"records/{sid}_cf.png"
            doc["diff_png"] = f"records/{sid}_diff.png"
            (rec_dir / f"{sid}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
            entries.append({"sample_id": sid, "record": f"records/{sid}.json"})
        manifest = {
            "mode": mode,
            "guidance": config.to_dict(),
            "n": len(records),
            "records": entries,
        }
        (out_dir / RUN_MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise PersistenceError(f"failed to write counterfactual run to {out_dir}: {exc}") from exc
    return out_dir / RUN_MANIFEST_NAME


def read_run(run_dir: str | Path) -> tuple[list[CounterfactualRecord], dict]:
    """Load a persisted run back; pixel arrays come from the stored PNGs."""
    run_dir = Path(run_dir)
    try:
        manifest = json.loads((run_dir / RUN_MANIFEST_NAME).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"failed to read run manifest in {run_dir}: {exc}") from exc
    records = []
    for entry in manifest["records"]:
        try:
            doc = json.loads((run_dir / entry["record"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise LoadError(f"failed to read record {entry['sample_id']}: {exc}") from exc
        records.append(
            CounterfactualRecord(
                sample_id=doc["sample_id"],
                factual=load_png(run_dir / doc["factual_png"]),
                counterfactual=load_png(run_dir / doc["cf_png"]),
                clf_prob_factual=doc["clf_prob_factual"],
                clf_prob_cf=doc["clf_prob_cf"],
                det_prob_factual=doc["det_prob_factual"],
                det_prob_cf=doc["det_prob_cf"],
                loss_class=doc["loss_class"],
                loss_det=doc["loss_det"],
                loss_perc=doc["loss_perc"],
                target_class=doc["target_class"],
                target_artifact=doc["target_artifact"],
                config=doc["config"],
                mode=doc["mode"],
                step_count=doc["step_count"],
                wall_time_s=0.0,
                subgroup=doc.get("subgroup"),
                split=doc.get("split"),
            )
        )
    return records, manifest
