"""Binary predictors: disease classifier, artifact detector, attribute probe.

One shared small-CNN architecture; the three roles differ only in which
dataset label they train against. Supports plain average-loss training and
group-robust training that exponentially upweights high-loss subgroups.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import SUBGROUPS, DatasetIndex, DatasetManifest
from .errors import LoadError, NumericsError, PersistenceError, TrainingError, ValidationError
from .networks import SmallConvNet, build_network

log = logging.getLogger(__name__)

ROLES = ("classifier", "detector", "attribute_probe")

_LABEL_FIELD = {
    "classifier": "class_labels",
    "detector": "artifact_labels",
    "attribute_probe": "nuisance_attrs",
}

CHECKPOINT_VERSION = 1
DECISION_THRESHOLD = 0.5  # fixed for all accuracy metrics


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "erm"  # "erm" | "group_dro"
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    dro_eta: float = 0.05  # group weight step size; group_dro only
    rng_seed: int = 0
    early_stop_metric: str = "val_acc"  # "val_acc" | "worst_group_acc" | "none"
    base_channels: int = 16

    def validate(self) -> None:
        if self.objective not in ("erm", "group_dro"):
            raise ValidationError(f"unknown objective {self.objective!r}")
        if self.objective == "group_dro" and not self.dro_eta > 0:
            raise ValidationError("dro_eta must be > 0 for group_dro")
        if self.early_stop_metric not in ("val_acc", "worst_group_acc", "none"):
            raise ValidationError(f"unknown early_stop_metric {self.early_stop_metric!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "dro_eta": self.dro_eta,
            "rng_seed": self.rng_seed,
            "early_stop_metric": self.early_stop_metric,
            "base_channels": self.base_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass
class GroupWeights:
    """Nonnegative weight per subgroup, kept on the probability simplex."""

    values: np.ndarray = field(default_factory=lambda: np.full(len(SUBGROUPS), 1.0 / len(SUBGROUPS)))

    def as_dict(self) -> dict[str, float]:
        return {g: float(v) for g, v in zip(SUBGROUPS, self.values)}


def update_group_weights(q: np.ndarray, losses: np.ndarray, eta: float) -> np.ndarray:
    """Exponentiated-gradient step on subgroup weights: q_g <- q_g*exp(eta*l_g),
    renormalized to the simplex. Entries with loss 0 are effectively skipped."""
    q = np.asarray(q, dtype=np.float64) * np.exp(eta * np.asarray(losses, dtype=np.float64))
    total = q.sum()
    if not np.isfinite(total) or total <= 0:
        raise NumericsError("group weight update produced a non-finite or empty simplex")
    return q / total


@dataclass
class PredictorCheckpoint:
    role: str
    architecture: dict
    state_dict: dict
    train_config: dict
    metrics: dict
    version: int = CHECKPOINT_VERSION
    _model: torch.nn.Module | None = None

    def model(self) -> torch.nn.Module:
        if self._model is None:
            m = build_network(self.architecture)
            m.load_state_dict(self.state_dict)
            m.eval()
            self._model = m
        return self._model

    def side(self) -> int:
        return int(self.architecture["side"])


def save_checkpoint(ckpt: PredictorCheckpoint, out_dir: str | Path, name: str | None = None) -> Path:
    """Parameter blob (<name>.pt) plus a JSON metadata sidecar (<name>.json)."""
    out_dir = Path(out_dir)
    name = name or ckpt.role
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.save(ckpt.state_dict, out_dir / f"{name}.pt")
        sidecar = {
            "role": ckpt.role,
            "architecture": ckpt.architecture,
            "train_config": ckpt.train_config,
            "metrics": ckpt.metrics,
            "version": ckpt.version,
        }
        (out_dir / f"{name}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise PersistenceError(f"failed to save checkpoint {name!r} to {out_dir}: {exc}") from exc
    return out_dir / f"{name}.pt"


def load_checkpoint(path: str | Path) -> PredictorCheckpoint:
    """`path` is the .pt blob, the .json sidecar, or either basename."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".pt", ".json") else path
    try:
        sidecar = json.loads(base.with_suffix(".json").read_text())
        state = torch.load(base.with_suffix(".pt"), weights_only=True)
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"failed to load checkpoint {base}: {exc}") from exc
    return PredictorCheckpoint(
        role=sidecar["role"],
        architecture=sidecar["architecture"],
        state_dict=state,
        train_config=sidecar["train_config"],
        metrics=sidecar["metrics"],
        version=sidecar.get("version", CHECKPOINT_VERSION),
    )


# ---------------------------------------------------------------------------
# Inference


def _to_input(pixels: np.ndarray, side: int) -> torch.Tensor:
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-2:] != (side, side):
        raise ValidationError(f"expected images of shape ({side}, {side}), got {arr.shape}")
    return torch.from_numpy(arr)[:, None]


def predict_prob_batch(ckpt: PredictorCheckpoint, pixels: np.ndarray) -> np.ndarray:
    model = ckpt.model()
    with torch.no_grad():
        logits = model(_to_input(pixels, ckpt.side()))
        return torch.sigmoid(logits).numpy().astype(np.float64)


def predict_prob(ckpt: PredictorCheckpoint, pixels: np.ndarray) -> float:
    """Positive-label probability for one image; pure in (parameters, pixels)."""
    if np.asarray(pixels).ndim != 2:
        raise ValidationError("predict_prob takes a single 2-D image")
    return float(predict_prob_batch(ckpt, pixels)[0])


def input_gradient(
    ckpt: PredictorCheckpoint,
    pixels: np.ndarray,
    target_label: float,
    loss_kind: str = "bce_toward_target",
) -> np.ndarray:
    """Gradient of BCE(predict_prob, target_label) with respect to the pixels."""
    if loss_kind != "bce_toward_target":
        raise ValidationError(f"unsupported loss_kind {loss_kind!r}")
    model = ckpt.model()
    x = _to_input(pixels, ckpt.side()).requires_grad_(True)
    logit = model(x)
    loss = F.binary_cross_entropy_with_logits(logit, torch.full_like(logit, float(target_label)))
    (grad,) = torch.autograd.grad(loss, x)
    grad = grad[0, 0].detach().numpy().astype(np.float64)
    if not np.isfinite(grad).all():
        raise NumericsError(f"non-finite input gradient from {ckpt.role} head (target={target_label})")
    return grad


@dataclass
class SubgroupAccuracyReport:
    split: str
    per_subgroup: dict[str, float | None]
    n_per_subgroup: dict[str, int]
    overall: float
    worst_group: float

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "per_subgroup": self.per_subgroup,
            "n_per_subgroup": self.n_per_subgroup,
            "overall": self.overall,
            "worst_group": self.worst_group,
            "threshold": DECISION_THRESHOLD,
        }


def evaluate_subgroups(
    ckpt: PredictorCheckpoint,
    manifest: DatasetManifest | DatasetIndex,
    split: str,
) -> SubgroupAccuracyReport:
    """Accuracy per subgroup plus overall and worst-group, threshold 0.5.

    Empty subgroups are reported as None and excluded from the worst-group
    minimum.
    """
    index = manifest if isinstance(manifest, DatasetIndex) else DatasetIndex(manifest)
    label_field = _LABEL_FIELD[ckpt.role]
    correct = {g: 0 for g in SUBGROUPS}
    totals = {g: 0 for g in SUBGROUPS}
    for batch in index.iter_batches(split, batch_size=256):
        probs = predict_prob_batch(ckpt, batch.pixels)
        preds = (probs > DECISION_THRESHOLD).astype(np.int64)
        labels = getattr(batch, label_field)
        for g, p, y in zip(batch.subgroups, preds, labels):
            totals[g] += 1
            correct[g] += int(p == y)
    per = {g: (correct[g] / totals[g] if totals[g] else None) for g in SUBGROUPS}
    n_total = sum(totals.values())
    overall = sum(correct.values()) / n_total
    worst = min(v for v in per.values() if v is not None)
    return SubgroupAccuracyReport(split=split, per_subgroup=per, n_per_subgroup=totals, overall=overall, worst_group=worst)


# ---------------------------------------------------------------------------
# Training


def _val_metric(report: SubgroupAccuracyReport, metric: str) -> float:
    return report.worst_group if metric == "worst_group_acc" else report.overall


def _train(
    config: TrainConfig,
    manifest: DatasetManifest | DatasetIndex,
    role: str,
) -> PredictorCheckpoint:
    config.validate()
    if role not in ROLES:
        raise ValidationError(f"unknown role {role!r}; expected one of {ROLES}")
    index = manifest if isinstance(manifest, DatasetIndex) else DatasetIndex(manifest)
    label_field = _LABEL_FIELD[role]
    side = index.manifest.spec.side

    torch.manual_seed(config.rng_seed)
    model = SmallConvNet(base_channels=config.base_channels)
    arch = {"type": "small_convnet", "base_channels": config.base_channels, "side": side}
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    use_dro = config.objective == "group_dro"
    q = GroupWeights()
    groups_seen: set[str] = set()
    group_index = {g: i for i, g in enumerate(SUBGROUPS)}

    def mk_ckpt(metrics: dict) -> PredictorCheckpoint:
        return PredictorCheckpoint(
            role=role,
            architecture=arch,
            state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
            train_config=config.to_dict(),
            metrics=metrics,
            version=CHECKPOINT_VERSION,
        )

    best_metric = -math.inf
    best_state: dict | None = None
    best_report: SubgroupAccuracyReport | None = None
    best_epoch = -1
    loss_curve: list[float] = []

    for epoch in range(config.epochs):
        model.train()
        epoch_losses: list[float] = []
        for step, batch in enumerate(index.iter_batches("train", config.batch_size, shuffle_seed=config.rng_seed * 1009 + epoch)):
            x = torch.from_numpy(batch.pixels)[:, None]
            y = torch.from_numpy(getattr(batch, label_field).astype(np.float32))
            logits = model(x)
            per_sample = F.binary_cross_entropy_with_logits(logits, y, reduction="none")

            if use_dro:
                groups_seen.update(batch.subgroups)
                gidx = torch.tensor([group_index[g] for g in batch.subgroups])
                group_losses = np.zeros(len(SUBGROUPS))
                counts = np.zeros(len(SUBGROUPS))
                for gi in range(len(SUBGROUPS)):
                    sel = gidx == gi
                    counts[gi] = int(sel.sum())
                    if counts[gi]:
                        group_losses[gi] = float(per_sample[sel].mean())
                # groups absent from the batch contribute loss 0, i.e. their
                # weight is untouched before renormalization
                q.values = update_group_weights(q.values, group_losses, config.dro_eta)
                # per-sample weights proportional to the subgroup weight; the
                # normalized weighted mean reduces to the plain mean at uniform q
                w = torch.from_numpy(q.values.astype(np.float32))[gidx]
                loss = (w * per_sample).sum() / w.sum()
            else:
                loss = per_sample.mean()

            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite {config.objective} loss for role {role!r} at epoch {epoch}, step {step}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss))

        loss_curve.append(float(np.mean(epoch_losses)))
        model.eval()
        report = evaluate_subgroups(mk_ckpt({}), index, "val")
        metric = _val_metric(report, config.early_stop_metric if config.early_stop_metric != "none" else "val_acc")
        if config.early_stop_metric == "none" or metric > best_metric:
            best_metric = metric
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            best_report = report
            best_epoch = epoch

    if use_dro:
        missing = set(SUBGROUPS) - groups_seen
        if missing:
            log.warning("subgroups never observed during group_dro training: %s", sorted(missing))

    assert best_state is not None and best_report is not None
    model.load_state_dict(best_state)
    metrics = {
        "val_overall_acc": best_report.overall,
        "val_worst_group_acc": best_report.worst_group,
        "val_subgroup_acc": best_report.per_subgroup,
        "best_epoch": best_epoch,
        "epochs_trained": config.epochs,
        "train_loss_curve": loss_curve,
    }
    if use_dro:
        metrics["final_group_weights"] = q.as_dict()
    return mk_ckpt(metrics)


def train_erm(config: TrainConfig, manifest: DatasetManifest | DatasetIndex, role: str) -> PredictorCheckpoint:
    """Average binary cross-entropy over the train split."""
    if config.objective != "erm":
        config = TrainConfig.from_dict({**config.to_dict(), "objective": "erm"})
    return _train(config, manifest, role)


def train_group_dro(config: TrainConfig, manifest: DatasetManifest | DatasetIndex, role: str) -> PredictorCheckpoint:
    """Group-robust training: subgroup weights follow exponentiated-gradient
    updates on per-subgroup losses, and the descended loss is the q-weighted
    per-sample mean."""
    if config.objective != "group_dro":
        config = TrainConfig.from_dict({**config.to_dict(), "objective": "group_dro"})
    return _train(config, manifest, role)
