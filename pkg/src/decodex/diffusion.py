"""Unconditional denoising diffusion: schedule, forward corruption, denoiser
training, reverse steps, and ancestral sampling.

Conventions: alpha[t] = 1 - beta[t] is per-step, alpha_bar[t] is the running
product over steps 1..t, and alpha_bar[0] = 1. Timesteps are 1-indexed;
images stay in [0,1] space (noise is standard normal).

The forward marginal is

    z_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps,

equivalent to t iterated single-step corruptions. The reverse-step mean is

    mu_t = (1/sqrt(alpha_t)) * (z_t - ((1 - alpha_t)/sqrt(1 - alpha_bar_t)) * eps_hat),

with fixed variance beta_t. The one-step clean estimate inverts the forward
marginal with the estimated noise and is clipped to [-0.2, 1.2].
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import DatasetIndex, DatasetManifest
from .errors import LoadError, PersistenceError, TrainingError, ValidationError
from .networks import UNetDenoiser, build_network

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # float64, betas[t-1] is the level for step t
    kind: str = "linear"

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValidationError("schedule needs at least one step")
        if not ((b > 0) & (b < 1)).all():
            raise ValidationError("every beta must lie strictly in (0, 1)")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "_alpha_bars", np.cumprod(1.0 - b))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return 1.0 - self.beta(t)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self._alpha_bars[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValidationError(f"timestep {t} outside 1..{self.T}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(betas=np.asarray(d["betas"], dtype=np.float64), kind=d.get("kind", "linear"))


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2, kind: str = "linear") -> NoiseSchedule:
    """Linear: betas evenly spaced between the endpoints inclusive.
    Cosine: the standard squared-cosine alpha_bar construction, with betas
    clipped below 0.999."""
    if T < 1:
        raise ValidationError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos(((steps / T + s) / (1 + s)) * math.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, 0.999 - 1e-9)
    else:
        raise ValidationError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas=betas, kind=kind)


def _clip(x, lo: float, hi: float):
    if isinstance(x, torch.Tensor):
        return torch.clamp(x, lo, hi)
    return np.clip(x, lo, hi)


def forward_noise(x0, t: int, schedule: NoiseSchedule, noise):
    """Closed-form forward marginal. t=0 returns x0 unchanged."""
    if t == 0:
        return x0 * 1.0
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def reverse_step(z_t, t: int, eps_hat, schedule: NoiseSchedule):
    """Deterministic mean of the reverse step; sampling noise is added by the
    caller (variance beta_t)."""
    if t == 0:
        raise ValidationError("reverse_step at t=0: image is already clean")
    a = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    return (z_t - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)


def predict_x0(z_t, t: int, eps_hat, schedule: NoiseSchedule, clip: bool = True, clip_delta: float = 0.2):
    """One-step clean-image estimate from the noisy state and estimated noise."""
    ab = schedule.alpha_bar(t)
    x = (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    if clip:
        x = _clip(x, -clip_delta, 1.0 + clip_delta)
    return x


# ---------------------------------------------------------------------------
# Per-slot rng streams: sampling is parallel across images, each image owns
# an independent generator derived from (base_seed, slot index).


def stream_seed(base_seed: int, slot: int) -> int:
    digest = hashlib.sha256(f"{base_seed}:{slot}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def make_generators(base_seed: int, n: int) -> list[torch.Generator]:
    gens = []
    for i in range(n):
        g = torch.Generator()
        g.manual_seed(stream_seed(base_seed, i))
        gens.append(g)
    return gens


def draw_noise(gens: Sequence[torch.Generator], shape: tuple[int, ...]) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=g) for g in gens])


# ---------------------------------------------------------------------------
# Checkpoint


@dataclass(frozen=True)
class DdpmTrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 2e-3
    T: int = 400
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    schedule_kind: str = "linear"
    base_channels: int = 24
    temb_dim: int = 64
    rng_seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        build_schedule(self.T, self.beta_start, self.beta_end, self.schedule_kind)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "schedule_kind": self.schedule_kind,
            "base_channels": self.base_channels,
            "temb_dim": self.temb_dim,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DdpmTrainConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass
class DenoiserCheckpoint:
    architecture: dict
    state_dict: dict
    schedule: NoiseSchedule  # embedded; sampling must use this schedule
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


def save_denoiser(ckpt: DenoiserCheckpoint, out_dir: str | Path, name: str = "denoiser") -> Path:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.save(ckpt.state_dict, out_dir / f"{name}.pt")
        sidecar = {
            "architecture": ckpt.architecture,
            "schedule": ckpt.schedule.to_dict(),
            "train_config": ckpt.train_config,
            "metrics": ckpt.metrics,
            "version": ckpt.version,
        }
        (out_dir / f"{name}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise PersistenceError(f"failed to save denoiser to {out_dir}: {exc}") from exc
    return out_dir / f"{name}.pt"


def load_denoiser(path: str | Path) -> DenoiserCheckpoint:
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".pt", ".json") else path
    try:
        sidecar = json.loads(base.with_suffix(".json").read_text())
        state = torch.load(base.with_suffix(".pt"), weights_only=True)
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"failed to load denoiser checkpoint {base}: {exc}") from exc
    return DenoiserCheckpoint(
        architecture=sidecar["architecture"],
        state_dict=state,
        schedule=NoiseSchedule.from_dict(sidecar["schedule"]),
        train_config=sidecar["train_config"],
        metrics=sidecar["metrics"],
        version=sidecar.get("version", CHECKPOINT_VERSION),
    )


# ---------------------------------------------------------------------------
# Training


def _denoising_loss(model: torch.nn.Module, x0: torch.Tensor, schedule: NoiseSchedule, gen: torch.Generator) -> torch.Tensor:
    """MSE between injected and estimated noise at uniformly drawn timesteps."""
    b = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=gen)
    noise = torch.randn(x0.shape, generator=gen)
    ab = torch.from_numpy(np.asarray(schedule._alpha_bars, dtype=np.float32))[t - 1]
    z = ab.sqrt()[:, None, None, None] * x0 + (1 - ab).sqrt()[:, None, None, None] * noise
    eps_hat = model(z, t.float())
    return F.mse_loss(eps_hat, noise)


def train_denoiser(config: DdpmTrainConfig, manifest: DatasetManifest | DatasetIndex) -> DenoiserCheckpoint:
    """Train the noise estimator on the train split; records train/val loss
    curves. Divergence aborts with the last finite-state checkpoint attached
    to the raised error."""
    config.validate()
    index = manifest if isinstance(manifest, DatasetIndex) else DatasetIndex(manifest)
    side = index.manifest.spec.side
    schedule = build_schedule(config.T, config.beta_start, config.beta_end, config.schedule_kind)

    torch.manual_seed(config.rng_seed)
    model = UNetDenoiser(base_channels=config.base_channels, temb_dim=config.temb_dim)
    arch = {"type": "unet_denoiser", "base_channels": config.base_channels, "temb_dim": config.temb_dim, "side": side}
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    noise_gen = torch.Generator().manual_seed(stream_seed(config.rng_seed, 0xD1FF))

    def mk_ckpt(metrics: dict) -> DenoiserCheckpoint:
        return DenoiserCheckpoint(
            architecture=arch,
            state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
            schedule=schedule,
            train_config=config.to_dict(),
            metrics=metrics,
        )

    def val_loss() -> float:
        gen = torch.Generator().manual_seed(stream_seed(config.rng_seed, 0xA11))
        model.eval()
        losses = []
        with torch.no_grad():
            for batch in index.iter_batches("val", config.batch_size):
                x0 = torch.from_numpy(batch.pixels)[:, None]
                losses.append(float(_denoising_loss(model, x0, schedule, gen)))
        model.train()
        return float(np.mean(losses))

    train_curve: list[float] = []
    val_curve: list[float] = []
    for epoch in range(config.epochs):
        epoch_losses = []
        for step, batch in enumerate(index.iter_batches("train", config.batch_size, shuffle_seed=config.rng_seed * 7919 + epoch)):
            x0 = torch.from_numpy(batch.pixels)[:, None]
            loss = _denoising_loss(model, x0, schedule, noise_gen)
            if not torch.isfinite(loss):
                err = TrainingError(f"denoising loss diverged at epoch {epoch}, step {step}")
                err.last_checkpoint = mk_ckpt({"train_loss_curve": train_curve, "val_loss_curve": val_curve})
                raise err
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss))
        train_curve.append(float(np.mean(epoch_losses)))
        val_curve.append(val_loss())

    model.eval()
    return mk_ckpt({"train_loss_curve": train_curve, "val_loss_curve": val_curve, "final_val_loss": val_curve[-1]})


# ---------------------------------------------------------------------------
# Sampling


def ancestral_loop(
    eps_model: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    schedule: NoiseSchedule,
    z: torch.Tensor,
    t_start: int,
    gens: Sequence[torch.Generator],
    stochastic: bool = True,
    guidance_fn: Callable[[torch.Tensor, int, torch.Tensor], torch.Tensor | None] | None = None,
) -> torch.Tensor:
    """Shared reverse-diffusion loop for unconditional and guided sampling.

    Each step estimates the noise, forms the reverse-step mean, optionally
    shifts it by -beta_t * guidance gradient, and adds sqrt(beta_t) noise
    for t > 1 in stochastic mode (the final step is always deterministic).
    With `guidance_fn` returning None at every step, the trajectory equals
    unconditional sampling bit for bit given the same generators.
    """
    if not 0 <= t_start <= schedule.T:
        raise ValidationError(f"t_start {t_start} outside 0..{schedule.T}")
    for t in range(t_start, 0, -1):
        with torch.no_grad():
            eps = eps_model(z, torch.full((z.shape[0],), float(t)))
        mu = reverse_step(z, t, eps, schedule)
        if guidance_fn is not None:
            g = guidance_fn(z, t, eps)
            if g is not None:
                mu = mu - schedule.beta(t) * g
        if stochastic and t > 1:
            z = mu + math.sqrt(schedule.beta(t)) * draw_noise(gens, z.shape[1:])
        else:
            z = mu
    return z


def sample_unconditional(ckpt: DenoiserCheckpoint, n: int, rng_seed: int) -> np.ndarray:
    """Ancestral sampling from pure noise; returns n images in [0,1]."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    schedule = ckpt.schedule
    side = ckpt.side()
    gens = make_generators(rng_seed, n)
    z = draw_noise(gens, (1, side, side))
    z = ancestral_loop(ckpt.model(), schedule, z, schedule.T, gens, stochastic=True)
    return np.clip(z[:, 0].numpy(), 0.0, 1.0).astype(np.float32)
