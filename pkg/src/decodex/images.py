"""PNG I/O and figure rendering helpers.

All images in this package are 2-D float arrays with values in [0, 1];
files on disk are 8-bit grayscale PNGs. Rendering is fully deterministic
(no timestamps or metadata embedded) so reruns are byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import LoadError, PersistenceError


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: str | Path, pixels: np.ndarray) -> None:
    """Write a [0,1] grayscale array as an 8-bit PNG."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(pixels), mode="L").save(path, format="PNG")
    except OSError as exc:
        raise PersistenceError(f"failed to write image {path}: {exc}") from exc


def load_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG back to a float32 array in [0,1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise LoadError(f"failed to read image {path}: {exc}") from exc
    return arr / 255.0


def diff_to_rgb(diff: np.ndarray) -> np.ndarray:
    """Render a signed difference image as a diverging blue-white-red RGB map.

    Scaled symmetrically by the max absolute difference; zero maps to white,
    negative to blue, positive to red.
    """
    diff = np.asarray(diff, dtype=np.float64)
    scale = max(float(np.abs(diff).max()), 1e-8)
    d = np.clip(diff / scale, -1.0, 1.0)
    rgb = np.ones(diff.shape + (3,), dtype=np.float64)
    pos = np.clip(d, 0.0, 1.0)
    neg = np.clip(-d, 0.0, 1.0)
    rgb[..., 1] -= np.maximum(pos, neg)  # green fades with magnitude
    rgb[..., 2] -= pos                   # red side loses blue
    rgb[..., 0] -= neg                   # blue side loses red
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def save_diff_png(path: str | Path, diff: np.ndarray) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(diff_to_rgb(diff), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise PersistenceError(f"failed to write image {path}: {exc}") from exc


def triptych(factual: np.ndarray, counterfactual: np.ndarray, scale: int = 4, pad: int = 2) -> Image.Image:
    """Three-column figure grid: factual | counterfactual | difference map."""
    f_img = np.stack([to_uint8(factual)] * 3, axis=-1)
    c_img = np.stack([to_uint8(counterfactual)] * 3, axis=-1)
    d_img = diff_to_rgb(np.asarray(counterfactual, dtype=np.float64) - np.asarray(factual, dtype=np.float64))
    side = factual.shape[0]
    gap = np.full((side, pad, 3), 255, dtype=np.uint8)
    row = np.concatenate([f_img, gap, c_img, gap, d_img], axis=1)
    im = Image.fromarray(row, mode="RGB")
    return im.resize((im.width * scale, im.height * scale), resample=Image.NEAREST)


def save_triptych(path: str | Path, factual: np.ndarray, counterfactual: np.ndarray, scale: int = 4) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        triptych(factual, counterfactual, scale=scale).save(path, format="PNG")
    except OSError as exc:
        raise PersistenceError(f"failed to write figure {path}: {exc}") from exc
