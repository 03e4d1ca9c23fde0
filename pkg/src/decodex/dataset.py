"""Synthetic confounded dataset: class-correlated artifact over a controlled
majority/minority subgroup structure.

Diseased images carry a bright pathology blob in a lower-corner region; the
artifact (a fixed black dot, or randomized dark bars) co-occurs with the
class label in `majority_ratio` of each class for train/val. The test split
is balanced within each class so subgroup accuracies are comparable.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import LoadError, PersistenceError, ValidationError
from .images import load_png, save_png

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

# Fixed subgroup order: (class_label, artifact_label) cells.
SUBGROUPS = ("maj_S", "min_S", "min_H", "maj_H")

_SUBGROUP_BY_CELL = {
    (1, 1): "maj_S",  # diseased, artifact present
    (1, 0): "min_S",  # diseased, artifact absent
    (0, 1): "min_H",  # healthy, artifact present
    (0, 0): "maj_H",  # healthy, artifact absent
}

SPLITS = ("train", "val", "test")


def subgroup_of(class_label: int, artifact_label: int) -> str:
    """Subgroup is a pure function of (class_label, artifact_label)."""
    try:
        return _SUBGROUP_BY_CELL[(int(class_label), int(artifact_label))]
    except KeyError:
        raise ValidationError(f"labels must be binary, got ({class_label}, {artifact_label})")


# ---------------------------------------------------------------------------
# Specs


@dataclass(frozen=True)
class DotArtifact:
    """Concrete dot placement: every pixel within `radius` of `center` is set
    to `intensity`. `center=None` means the exact image center."""

    radius: float
    intensity: float = 0.0
    center: tuple[float, float] | None = None

    def resolved_center(self, side: int) -> tuple[float, float]:
        if self.center is not None:
            return self.center
        c = (side - 1) / 2.0
        return (c, c)

    def mask(self, side: int) -> np.ndarray:
        if self.radius <= 0:
            return np.zeros((side, side), dtype=bool)
        ci, cj = self.resolved_center(side)
        ii, jj = np.mgrid[0:side, 0:side]
        return (ii - ci) ** 2 + (jj - cj) ** 2 <= self.radius**2


@dataclass(frozen=True)
class BarArtifact:
    """Concrete bar placement: a filled dark rectangle (device-like analog)."""

    top: int
    left: int
    height: int
    width: int
    intensity: float = 0.1

    def mask(self, side: int) -> np.ndarray:
        m = np.zeros((side, side), dtype=bool)
        m[self.top : self.top + self.height, self.left : self.left + self.width] = True
        return m


@dataclass(frozen=True)
class ArtifactSpec:
    """Dataset-level artifact recipe.

    kind="dot": fixed-size dot at the image center (or `center`).
    kind="bar": 1-2 dark bars with randomized position/length/thickness,
    mirroring artifacts whose appearance varies between subjects.
    """

    kind: str = "dot"
    radius: float = 4.0
    intensity: float = 0.0
    center: tuple[float, float] | None = None
    bar_length: tuple[int, int] = (10, 22)
    bar_thickness: tuple[int, int] = (2, 3)
    n_bars: tuple[int, int] = (1, 2)

    def validate(self, side: int) -> None:
        if self.kind not in ("dot", "bar"):
            raise ValidationError(f"unknown artifact kind {self.kind!r}")
        if self.kind == "dot" and not self.radius < side / 2:
            raise ValidationError(f"dot radius {self.radius} must be < side/2 = {side / 2}")

    def concrete(self, side: int, rng: np.random.Generator) -> list[DotArtifact | BarArtifact]:
        if self.kind == "dot":
            return [DotArtifact(radius=self.radius, intensity=self.intensity, center=self.center)]
        bars = []
        for _ in range(int(rng.integers(self.n_bars[0], self.n_bars[1] + 1))):
            length = int(rng.integers(self.bar_length[0], self.bar_length[1] + 1))
            thick = int(rng.integers(self.bar_thickness[0], self.bar_thickness[1] + 1))
            if rng.random() < 0.5:  # horizontal
                top = int(rng.integers(2, side - thick - 2))
                left = int(rng.integers(2, side - length - 2))
                bars.append(BarArtifact(top, left, thick, length, self.intensity))
            else:
                top = int(rng.integers(2, side - length - 2))
                left = int(rng.integers(2, side - thick - 2))
                bars.append(BarArtifact(top, left, length, thick, self.intensity))
        return bars


@dataclass(frozen=True)
class PathologySpec:
    """Bright Gaussian-profile blob in a lower-corner region for the diseased
    class, plus benign distractor blobs higher up in every image so that blob
    presence alone is not discriminative; only blob location is."""

    amplitude: tuple[float, float] = (0.30, 0.50)
    sigma: tuple[float, float] = (1.6, 2.8)
    n_benign: tuple[int, int] = (1, 2)

    def validate(self) -> None:
        if self.amplitude[0] <= 0:
            raise ValidationError("pathology amplitude must be positive")


@dataclass(frozen=True)
class NuisanceSpec:
    """Two global background brightness levels, independent of class and
    artifact (stand-in for a patient-level attribute)."""

    levels: tuple[float, float] = (0.28, 0.42)


@dataclass(frozen=True)
class DatasetSpec:
    side: int = 32
    n_per_class: int = 1000
    majority_ratio: float = 0.90
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    artifact: ArtifactSpec = field(default_factory=ArtifactSpec)
    pathology: PathologySpec = field(default_factory=PathologySpec)
    nuisance: NuisanceSpec = field(default_factory=NuisanceSpec)
    noise_sigma: float = 0.02
    rng_seed: int = 0

    def validate(self) -> None:
        if not 0.5 < self.majority_ratio < 1.0:
            raise ValidationError(f"majority_ratio must be in (0.5, 1), got {self.majority_ratio}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must sum to 1, got {self.split_fractions}")
        if self.side < 8:
            raise ValidationError(f"side {self.side} too small")
        if self.n_per_class < 4:
            raise ValidationError("n_per_class must be at least 4")
        self.artifact.validate(self.side)
        self.pathology.validate()

    def split_sizes(self) -> dict[str, int]:
        n_train = round(self.split_fractions[0] * self.n_per_class)
        n_val = round(self.split_fractions[1] * self.n_per_class)
        return {"train": n_train, "val": n_val, "test": self.n_per_class - n_train - n_val}

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "n_per_class": self.n_per_class,
            "majority_ratio": self.majority_ratio,
            "split_fractions": list(self.split_fractions),
            "artifact": {
                "kind": self.artifact.kind,
                "radius": self.artifact.radius,
                "intensity": self.artifact.intensity,
                "center": list(self.artifact.center) if self.artifact.center else None,
                "bar_length": list(self.artifact.bar_length),
                "bar_thickness": list(self.artifact.bar_thickness),
                "n_bars": list(self.artifact.n_bars),
            },
            "pathology": {
                "amplitude": list(self.pathology.amplitude),
                "sigma": list(self.pathology.sigma),
                "n_benign": list(self.pathology.n_benign),
            },
            "nuisance": {"levels": list(self.nuisance.levels)},
            "noise_sigma": self.noise_sigma,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        art = d.get("artifact", {})
        pat = d.get("pathology", {})
        nui = d.get("nuisance", {})
        return cls(
            side=d.get("side", 32),
            n_per_class=d.get("n_per_class", 1000),
            majority_ratio=d.get("majority_ratio", 0.90),
            split_fractions=tuple(d.get("split_fractions", (0.70, 0.15, 0.15))),
            artifact=ArtifactSpec(
                kind=art.get("kind", "dot"),
                radius=art.get("radius", 4.0),
                intensity=art.get("intensity", 0.0),
                center=tuple(art["center"]) if art.get("center") else None,
                bar_length=tuple(art.get("bar_length", (10, 22))),
                bar_thickness=tuple(art.get("bar_thickness", (2, 3))),
                n_bars=tuple(art.get("n_bars", (1, 2))),
            ),
            pathology=PathologySpec(
                amplitude=tuple(pat.get("amplitude", (0.30, 0.50))),
                sigma=tuple(pat.get("sigma", (1.6, 2.8))),
                n_benign=tuple(pat.get("n_benign", (1, 2))),
            ),
            nuisance=NuisanceSpec(levels=tuple(nui.get("levels", (0.28, 0.42)))),
            noise_sigma=d.get("noise_sigma", 0.02),
            rng_seed=d.get("rng_seed", 0),
        )


# ---------------------------------------------------------------------------
# Samples and manifest


@dataclass
class ImageSample:
    pixels: np.ndarray  # 2-D float32 in [0,1]
    class_label: int    # healthy=0, diseased=1
    artifact_label: int
    nuisance_attr: int
    subgroup: str
    split: str
    sample_id: str


@dataclass
class FileRecord:
    sample_id: str
    path: str  # relative to the dataset root
    class_label: int
    artifact_label: int
    nuisance_attr: int
    subgroup: str
    split: str

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "path": self.path,
            "class_label": self.class_label,
            "artifact_label": self.artifact_label,
            "nuisance_attr": self.nuisance_attr,
            "subgroup": self.subgroup,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FileRecord":
        return cls(
            sample_id=d["sample_id"],
            path=d["path"],
            class_label=int(d["class_label"]),
            artifact_label=int(d["artifact_label"]),
            nuisance_attr=int(d["nuisance_attr"]),
            subgroup=d["subgroup"],
            split=d["split"],
        )


@dataclass
class DatasetManifest:
    spec: DatasetSpec
    counts: dict  # split -> subgroup -> int
    files: list[FileRecord]
    checksum: str
    version: int = MANIFEST_VERSION
    root: Path | None = None  # set on load/save; not serialized

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "spec": self.spec.to_dict(),
            "counts": self.counts,
            "files": [f.to_dict() for f in self.files],
            "checksum": self.checksum,
        }

    def save(self, root: str | Path) -> Path:
        root = Path(root)
        path = root / MANIFEST_NAME
        try:
            root.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise PersistenceError(f"failed to write manifest {path}: {exc}") from exc
        self.root = root
        return path

    def split_files(self, split: str) -> list[FileRecord]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        return [f for f in self.files if f.split == split]


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a manifest. `path` may be the manifest file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"failed to read manifest {path}: {exc}") from exc
    manifest = DatasetManifest(
        spec=DatasetSpec.from_dict(doc["spec"]),
        counts=doc["counts"],
        files=[FileRecord.from_dict(f) for f in doc["files"]],
        checksum=doc["checksum"],
        version=doc.get("version", MANIFEST_VERSION),
        root=path.parent,
    )
    return manifest


# ---------------------------------------------------------------------------
# Image synthesis


def _add_blob(pixels: np.ndarray, ci: float, cj: float, sigma: float, amp: float) -> None:
    side = pixels.shape[0]
    ii, jj = np.mgrid[0:side, 0:side]
    pixels += amp * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * sigma**2))


def _draw_blob_params(spec: PathologySpec, rng: np.random.Generator) -> tuple[float, float]:
    amp = float(rng.uniform(*spec.amplitude))
    sigma = float(rng.uniform(*spec.sigma))
    return amp, sigma


def render_base_image(spec: DatasetSpec, class_label: int, nuisance_attr: int, rng: np.random.Generator) -> np.ndarray:
    """Background + benign blobs (+ pathology blob when diseased) + noise.

    The artifact is injected separately so its footprint exactly matches
    the artifact spec.
    """
    side = spec.side
    pixels = np.full((side, side), spec.nuisance.levels[nuisance_attr], dtype=np.float64)

    # benign distractors in the upper two thirds
    n_benign = int(rng.integers(spec.pathology.n_benign[0], spec.pathology.n_benign[1] + 1))
    for _ in range(n_benign):
        amp, sigma = _draw_blob_params(spec.pathology, rng)
        ci = float(rng.uniform(0.10 * side, 0.55 * side))
        cj = float(rng.uniform(0.12 * side, 0.88 * side))
        _add_blob(pixels, ci, cj, sigma, amp)

    if class_label == 1:
        amp, sigma = _draw_blob_params(spec.pathology, rng)
        ci = float(rng.uniform(0.72 * side, 0.90 * side))
        if rng.random() < 0.5:  # left or right lower corner
            cj = float(rng.uniform(0.10 * side, 0.34 * side))
        else:
            cj = float(rng.uniform(0.66 * side, 0.90 * side))
        _add_blob(pixels, ci, cj, sigma, amp)

    pixels += rng.normal(0.0, spec.noise_sigma, size=pixels.shape)
    return np.clip(pixels, 0.0, 1.0).astype(np.float32)


def inject_artifact(pixels: np.ndarray, artifact: DotArtifact | BarArtifact) -> np.ndarray:
    """Return a copy with the artifact footprint set to its intensity.

    Idempotent; pixels outside the footprint are unchanged.
    """
    side = pixels.shape[0]
    if isinstance(artifact, DotArtifact):
        if artifact.radius < 0:
            raise ValidationError(f"negative radius {artifact.radius}")
        ci, cj = artifact.resolved_center(side)
        if artifact.radius > 0 and not (
            ci - artifact.radius >= -0.5
            and cj - artifact.radius >= -0.5
            and ci + artifact.radius <= side - 0.5
            and cj + artifact.radius <= side - 0.5
        ):
            raise ValidationError(f"dot (center=({ci},{cj}), r={artifact.radius}) exceeds {side}x{side} bounds")
    elif isinstance(artifact, BarArtifact):
        if (
            artifact.top < 0
            or artifact.left < 0
            or artifact.top + artifact.height > side
            or artifact.left + artifact.width > side
        ):
            raise ValidationError("bar exceeds image bounds")
    else:
        raise ValidationError(f"unknown artifact type {type(artifact).__name__}")
    out = np.array(pixels, dtype=np.float32, copy=True)
    out[artifact.mask(side)] = artifact.intensity
    return out


def artifact_region_mean(pixels: np.ndarray, artifact: DotArtifact | BarArtifact) -> float:
    """Mean intensity over the artifact footprint (pixel-level presence check)."""
    mask = artifact.mask(pixels.shape[0])
    if not mask.any():
        return float("nan")
    return float(np.asarray(pixels, dtype=np.float64)[mask].mean())


# ---------------------------------------------------------------------------
# Generation


def _subgroup_schedule(spec: DatasetSpec) -> list[tuple[str, int, int, int]]:
    """(split, class_label, artifact_label, count) cells in a fixed order."""
    sizes = spec.split_sizes()
    cells: list[tuple[str, int, int, int]] = []
    for split in SPLITS:
        n = sizes[split]
        for class_label in (1, 0):
            if split == "test":
                n_with = n // 2
                n_without = n - n_with
            else:
                # majority state co-occurs with the class: diseased->artifact,
                # healthy->no artifact
                n_major = round(spec.majority_ratio * n)
                n_minor = n - n_major
                n_with = n_major if class_label == 1 else n_minor
                n_without = n - n_with
            cells.append((split, class_label, 1, n_with))
            cells.append((split, class_label, 0, n_without))
    return cells


def generate_dataset(spec: DatasetSpec, out_dir: str | Path) -> DatasetManifest:
    """Render the dataset to `<out_dir>/<split>/<subgroup>/<sample_id>.png`
    plus a manifest. Deterministic under `spec.rng_seed`."""
    spec.validate()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.rng_seed)

    files: list[FileRecord] = []
    counts: dict[str, dict[str, int]] = {s: {g: 0 for g in SUBGROUPS} for s in SPLITS}
    digests: list[tuple[str, str]] = []

    for split, class_label, artifact_label, count in _subgroup_schedule(spec):
        group = subgroup_of(class_label, artifact_label)
        for k in range(count):
            nuisance_attr = int(rng.random() < 0.5)
            pixels = render_base_image(spec, class_label, nuisance_attr, rng)
            if artifact_label == 1:
                for concrete in spec.artifact.concrete(spec.side, rng):
                    pixels = inject_artifact(pixels, concrete)
            sample_id = f"{split}_{group}_{k:05d}"
            rel_path = f"{split}/{group}/{sample_id}.png"
            save_png(out_dir / rel_path, pixels)
            digests.append((sample_id, hashlib.sha256((out_dir / rel_path).read_bytes()).hexdigest()))
            files.append(
                FileRecord(
                    sample_id=sample_id,
                    path=rel_path,
                    class_label=class_label,
                    artifact_label=artifact_label,
                    nuisance_attr=nuisance_attr,
                    subgroup=group,
                    split=split,
                )
            )
            counts[split][group] += 1

    digest_blob = "\n".join(f"{sid}:{d}" for sid, d in sorted(digests))
    checksum = "sha256:" + hashlib.sha256(digest_blob.encode()).hexdigest()
    manifest = DatasetManifest(spec=spec, counts=counts, files=files, checksum=checksum)
    manifest.save(out_dir)
    return manifest


# ---------------------------------------------------------------------------
# Loading


@dataclass
class SampleBatch:
    pixels: np.ndarray  # [B, S, S] float32
    class_labels: np.ndarray
    artifact_labels: np.ndarray
    nuisance_attrs: np.ndarray
    subgroups: list[str]
    sample_ids: list[str]

    def __len__(self) -> int:
        return len(self.sample_ids)


class DatasetIndex:
    """Read-only view over a generated dataset with an in-memory image cache.

    Safe for concurrent readers; every batch iterator is independent.
    """

    def __init__(self, manifest: DatasetManifest, root: str | Path | None = None):
        self.manifest = manifest
        root = root if root is not None else manifest.root
        if root is None:
            raise ValidationError("dataset root unknown; pass root explicitly")
        self.root = Path(root)
        self._by_id = {f.sample_id: f for f in manifest.files}
        self._cache: dict[str, np.ndarray] = {}

    def record(self, sample_id: str) -> FileRecord:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise LoadError(f"sample_id {sample_id!r} not in manifest")

    def load_pixels(self, sample_id: str) -> np.ndarray:
        cached = self._cache.get(sample_id)
        if cached is None:
            rec = self.record(sample_id)
            path = self.root / rec.path
            if not path.exists():
                raise LoadError(f"missing image file for sample_id {sample_id!r}: {path}")
            cached = load_png(path)
            if cached.shape != (self.manifest.spec.side, self.manifest.spec.side):
                raise LoadError(f"corrupt image for sample_id {sample_id!r}: shape {cached.shape}")
            self._cache[sample_id] = cached
        return cached

    def load_sample(self, sample_id: str) -> ImageSample:
        rec = self.record(sample_id)
        return ImageSample(
            pixels=self.load_pixels(sample_id),
            class_label=rec.class_label,
            artifact_label=rec.artifact_label,
            nuisance_attr=rec.nuisance_attr,
            subgroup=rec.subgroup,
            split=rec.split,
            sample_id=rec.sample_id,
        )

    def split_ids(self, split: str) -> list[str]:
        return [f.sample_id for f in self.manifest.split_files(split)]

    def iter_batches(self, split: str, batch_size: int, shuffle_seed: int | None = None) -> Iterator[SampleBatch]:
        ids = self.split_ids(split)
        if not ids:
            raise ValidationError(f"split {split!r} is empty")
        if batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
        order = np.arange(len(ids))
        if shuffle_seed is not None:
            np.random.default_rng(shuffle_seed).shuffle(order)
        for start in range(0, len(ids), batch_size):
            chunk = [ids[i] for i in order[start : start + batch_size]]
            recs = [self.record(s) for s in chunk]
            yield SampleBatch(
                pixels=np.stack([self.load_pixels(s) for s in chunk]),
                class_labels=np.array([r.class_label for r in recs], dtype=np.int64),
                artifact_labels=np.array([r.artifact_label for r in recs], dtype=np.int64),
                nuisance_attrs=np.array([r.nuisance_attr for r in recs], dtype=np.int64),
                subgroups=[r.subgroup for r in recs],
                sample_ids=chunk,
            )


def load_split(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    shuffle_seed: int | None = None,
    root: str | Path | None = None,
) -> Iterator[SampleBatch]:
    """One epoch over a split: every sample exactly once, deterministic order
    under `shuffle_seed` (None = manifest order)."""
    return DatasetIndex(manifest, root=root).iter_batches(split, batch_size, shuffle_seed)
