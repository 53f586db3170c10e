"""CT preprocessing: HU conversion, artifact masking, calibration,
windowing, inferior-slice selection and resizing.

HU slices and normalized slices are plain 2-D ``float32`` numpy arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .errors import EmptyVolume
from .ingest import CtSlice, CtVolume


@dataclass
class PreprocessConfig:
    window_level: float = -650.0
    window_width: float = 1700.0
    lower_fraction: float = 0.55
    target_size: tuple = (256, 256)
    padding_sentinel_threshold: float = -2000.0
    air_hu: float = -1000.0
    calibration_tolerance: float = 50.0
    # fraction of the outside-circle region that sentinel pixels must overlap
    circle_overlap: float = 0.9
    border_width: int = 2

    def __post_init__(self):
        if self.window_width <= 0:
            raise ValueError("window_width must be positive")
        if not 0 < self.lower_fraction <= 1:
            raise ValueError("lower_fraction must lie in (0, 1]")
        self.target_size = tuple(int(v) for v in self.target_size)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "PreprocessConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown preprocess keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "PreprocessConfig":
        return cls.from_dict(json.loads(text))


def to_hounsfield(ct: CtSlice) -> np.ndarray:
    hu = ct.pixels.astype(np.float64) * ct.rescale_slope + ct.rescale_intercept
    return hu.astype(np.float32)


def apply_window(hu: np.ndarray, level: float = -650.0, width: float = 1700.0) -> np.ndarray:
    """Clamp to ``[level - width/2, level + width/2]`` and map linearly to [0, 1]."""
    if width <= 0:
        raise ValueError("window width must be positive")
    lo = level - width / 2.0
    out = (np.clip(np.asarray(hu, dtype=np.float64), lo, lo + width) - lo) / width
    return out.astype(np.float32)


def outside_circle_mask(rows: int, cols: int) -> np.ndarray:
    """Pixels outside the largest circle inscribed in a rows x cols grid."""
    ci, cj = (rows - 1) / 2.0, (cols - 1) / 2.0
    r = min(rows, cols) / 2.0
    ii, jj = np.ogrid[:rows, :cols]
    return (ii - ci) ** 2 + (jj - cj) ** 2 > r * r


def mask_artifacts(hu: np.ndarray, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """Replace synthetic padding and circular field-of-view fill with air.

    Padding is any pixel at or below the sentinel threshold.  When the
    padded pixels cover the region outside the inscribed circle (Jaccard
    overlap at least ``cfg.circle_overlap``) the whole outside region is
    set to air, which also catches partially-blended rim pixels.
    """
    cfg = cfg or PreprocessConfig()
    sentinel = hu <= cfg.padding_sentinel_threshold
    if not sentinel.any():
        return hu
    out = hu.copy()
    out[sentinel] = cfg.air_hu
    outside = outside_circle_mask(*hu.shape)
    if outside.any():
        inter = np.count_nonzero(sentinel & outside)
        union = np.count_nonzero(sentinel | outside)
        if inter / union >= cfg.circle_overlap:
            out[outside] = cfg.air_hu
    return out


def border_pixels(hu: np.ndarray, width: int = 2) -> np.ndarray:
    rows, cols = hu.shape
    mask = np.zeros(hu.shape, dtype=bool)
    mask[:width, :] = mask[-width:, :] = True
    mask[:, :width] = mask[:, -width:] = True
    if rows <= 2 * width or cols <= 2 * width:
        mask[:] = True
    return hu[mask]


def calibration_offset(volume: Sequence[np.ndarray], cfg: PreprocessConfig | None = None) -> float:
    """HU shift that brings the border-air median back to ``air_hu`` (0 if within tolerance)."""
    cfg = cfg or PreprocessConfig()
    border = np.concatenate([border_pixels(s, cfg.border_width).ravel() for s in volume])
    error = float(np.median(border.astype(np.float64))) - cfg.air_hu
    return error if abs(error) > cfg.calibration_tolerance else 0.0


def correct_calibration(volume: Sequence[np.ndarray], cfg: PreprocessConfig | None = None) -> list:
    if len(volume) == 0:
        raise EmptyVolume("calibration needs at least one slice")
    shift = calibration_offset(volume, cfg)
    if shift == 0.0:
        return list(volume)
    return [(s.astype(np.float64) - shift).astype(np.float32) for s in volume]


def lower_slice_count(n: int, fraction: float) -> int:
    # round away float fuzz before ceil so 0.55 * 100 -> 55, not 56
    return max(1, math.ceil(round(fraction * n, 9)))


def select_lower_slices(slices: Sequence, fraction: float = 0.55) -> list:
    """First ``ceil(fraction * n)`` slices of an ascending-z (inferior first) stack."""
    if len(slices) == 0:
        raise EmptyVolume("cannot select slices from an empty volume")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    return list(slices[: lower_slice_count(len(slices), fraction)])


def _bilinear_axis(n_src: int, n_dst: int):
    coord = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    coord = np.clip(coord, 0.0, n_src - 1)
    i0 = np.floor(coord).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, coord - i0


def resize_slice(img: np.ndarray, target: tuple) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and edge clamping."""
    h_dst, w_dst = (int(v) for v in target)
    if img.shape == (h_dst, w_dst):
        return img.astype(np.float32, copy=True)
    src = img.astype(np.float64)
    r0, r1, fr = _bilinear_axis(src.shape[0], h_dst)
    c0, c1, fc = _bilinear_axis(src.shape[1], w_dst)
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bottom = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bottom * fr[:, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def preprocess_volume(volume: CtVolume, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """Full pipeline for one patient; returns ``(n_lower, H, W)`` float32 in [0, 1]."""
    cfg = cfg or PreprocessConfig()
    if not volume.slices:
        raise EmptyVolume(f"patient {volume.patient_id}: empty volume")
    hu = [mask_artifacts(to_hounsfield(s), cfg) for s in volume.slices]
    hu = correct_calibration(hu, cfg)
    lower = select_lower_slices(hu, cfg.lower_fraction)
    out = [
        resize_slice(apply_window(s, cfg.window_level, cfg.window_width), cfg.target_size)
        for s in lower
    ]
    return np.stack(out)
