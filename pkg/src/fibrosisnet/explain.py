"""Occlusion attribution for slope predictions and overlay rendering."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import IoFailure


@dataclass
class OcclusionConfig:
    patch: int = 16
    stride: int = 8
    baseline_value: float = 0.0

    def __post_init__(self):
        if not 1 <= self.stride <= self.patch:
            raise ValueError("need 1 <= stride <= patch")


def patch_origins(size: int, patch: int, stride: int) -> list:
    """Top-left offsets along one axis; the last patch is flush with the edge."""
    patch = min(patch, size)
    last = size - patch
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def _slope_fn(model, clinical) -> Callable[[np.ndarray], float]:
    if hasattr(model, "slope_function"):
        return model.slope_function(clinical)
    if clinical is None:
        return model
    return lambda img: model(img, clinical)


def occlusion_attribution(model, image: np.ndarray, clinical=None, cfg: OcclusionConfig | None = None, threads: int = 1) -> np.ndarray:
    """Per-pixel mean |slope change| over every occluding patch that covers the pixel.

    ``model`` is a trained ``FibrosisModel`` or any callable mapping a
    slice (and ``clinical``, when given) to a slope.
    """
    cfg = cfg or OcclusionConfig()
    image = np.asarray(image, dtype=np.float32)
    fn = _slope_fn(model, clinical)
    h, w = image.shape
    ph, pw = min(cfg.patch, h), min(cfg.patch, w)
    positions = [(i, j) for i in patch_origins(h, cfg.patch, cfg.stride) for j in patch_origins(w, cfg.patch, cfg.stride)]
    reference = fn(image)

    def effect(pos):
        i, j = pos
        occluded = image.copy()
        occluded[i : i + ph, j : j + pw] = cfg.baseline_value
        return abs(fn(occluded) - reference)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            effects = list(pool.map(effect, positions))
    else:
        effects = [effect(p) for p in positions]

    total = np.zeros((h, w), dtype=np.float64)
    coverage = np.zeros((h, w), dtype=np.float64)
    for (i, j), e in zip(positions, effects):
        total[i : i + ph, j : j + pw] += e
        coverage[i : i + ph, j : j + pw] += 1
    return np.divide(total, coverage, out=np.zeros_like(total), where=coverage > 0)


def patch_effects(fn: Callable[[np.ndarray], float], image: np.ndarray, cfg: OcclusionConfig) -> dict:
    """``{(i, j): |slope change|}`` for every patch origin."""
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape
    ph, pw = min(cfg.patch, h), min(cfg.patch, w)
    reference = fn(image)
    out = {}
    for i in patch_origins(h, cfg.patch, cfg.stride):
        for j in patch_origins(w, cfg.patch, cfg.stride):
            occluded = image.copy()
            occluded[i : i + ph, j : j + pw] = cfg.baseline_value
            out[(i, j)] = abs(fn(occluded) - reference)
    return out


def overlay_pixels(image: np.ndarray, attribution: np.ndarray) -> np.ndarray:
    """8-bit grayscale with each pixel pushed toward white by its normalized attribution."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    attr = np.asarray(attribution, dtype=np.float64)
    if attr.shape != img.shape:
        raise ValueError(f"attribution {attr.shape} does not match slice {img.shape}")
    peak = attr.max() if attr.size else 0.0
    weight = attr / peak if peak > 0 else np.zeros_like(attr)
    bright = img + (1.0 - img) * weight
    return np.round(bright * 255.0).astype(np.uint8)


def encode_pgm(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def render_overlay(image: np.ndarray, attribution: np.ndarray, path) -> Path:
    """Write the overlay as binary PGM, or PNG when ``path`` ends in ``.png``."""
    path = Path(path)
    pixels = overlay_pixels(image, attribution)
    try:
        if path.suffix.lower() == ".png":
            from PIL import Image

            Image.fromarray(pixels, mode="L").save(path, format="PNG", optimize=False)
        else:
            path.write_bytes(encode_pgm(pixels))
    except OSError as exc:
        raise IoFailure(f"cannot write overlay {path}: {exc}") from exc
    return path
