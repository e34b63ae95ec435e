"""Small image IO helpers shared by the pipeline, metrics, CLI, and service."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image


def load_image(source) -> np.ndarray:
    """Load a path / PIL image / array as float RGB in [0, 1], shape (H, W, 3)."""
    if isinstance(source, (str, Path)):
        with Image.open(source) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        return arr
    if isinstance(source, Image.Image):
        return np.asarray(source.convert("RGB"), dtype=np.float64) / 255.0
    arr = np.asarray(source, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {arr.shape}")
    if arr.max() > 1.0 + 1e-9:
        arr = arr / 255.0
    return arr


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)


def save_image(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def image_digest(image) -> str:
    """Stable content hash for caching and manifests."""
    if isinstance(image, (str, Path)):
        return hashlib.sha256(Path(image).read_bytes()).hexdigest()
    arr = load_image(image)
    return hashlib.sha256(to_uint8(arr).tobytes()).hexdigest()


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak**2 / mse)
