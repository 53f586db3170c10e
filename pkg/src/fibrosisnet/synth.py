"""Reproducible synthetic cohorts.

Default demographics: age 67.14 +/- 7.01, 78.55% male, smoking
5.4 / 66.3 / 28.3% (current / ex / never).  Each patient gets a planted
linear FVC decline and a CT volume whose inferior slices carry a
honeycomb-like texture that spreads upward from the posterior lung edge;
the textured share of the lungs grows with the magnitude of the decline,
so the decline is recoverable from the images.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoFailure
from .ingest import (
    CtSlice,
    CtVolume,
    PatientRecord,
    Sex,
    Smoking,
    Visit,
    assemble_volume,
    format_metadata_csv,
    write_dicom_slice,
)

SMOKING_ORDER = (Smoking.CURRENTLY_SMOKES, Smoking.EX_SMOKER, Smoking.NEVER_SMOKED)
METADATA_NAME = "metadata.csv"

# HU levels of the phantom
AIR_HU = -1000.0
TISSUE_HU = 40.0
LUNG_HU = -850.0
WALL_HU = -100.0
CYST_HU = -950.0


@dataclass
class SynthConfig:
    seed: int = 0
    n_patients: int = 8
    age_mean: float = 67.14
    age_std: float = 7.01
    p_male: float = 0.7855
    smoking_probs: tuple = (0.054, 0.663, 0.283)
    slope_mean: float = -8.0
    slope_std: float = 6.0
    base_fvc_mean: float = 2700.0
    base_fvc_std: float = 600.0
    visit_weeks: tuple = (0, 6, 12, 24, 36, 48)
    fvc_noise_std: float = 60.0
    fvc_floor: float = 200.0
    volume_dims: tuple = (10, 64, 64)
    slice_spacing: float = 2.5
    # |slope| (ml/week) at which the lungs are fully textured
    texture_saturation: float = 24.0
    # share of slices (from the inferior end) that carry texture
    textured_fraction: float = 0.6
    hu_noise_std: float = 10.0

    def __post_init__(self):
        self.smoking_probs = tuple(float(p) for p in self.smoking_probs)
        self.visit_weeks = tuple(int(w) for w in self.visit_weeks)
        self.volume_dims = tuple(int(d) for d in self.volume_dims)
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if abs(sum(self.smoking_probs) - 1.0) > 1e-9 or len(self.smoking_probs) != 3:
            raise ValueError("smoking_probs must be three probabilities summing to 1")
        if not 0 <= self.p_male <= 1:
            raise ValueError("p_male must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class SyntheticPatient:
    record: PatientRecord
    volume: CtVolume
    slope: float
    # noise-free FVC at week 0; the planted trajectory is base_fvc + slope * week
    base_fvc: float
    extent: float
    zone_mask: np.ndarray = field(repr=False)


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, index])


def typical_fvc(age: float, sex: Sex) -> float:
    """Rough predicted-normal FVC (ml) used to derive relative FVC."""
    if sex is Sex.MALE:
        return 4000.0 - 25.0 * (age - 50.0)
    return 2900.0 - 20.0 * (age - 50.0)


def _ellipse(shape, center, axes):
    ii, jj = np.ogrid[: shape[0], : shape[1]]
    return ((ii - center[0]) / axes[0]) ** 2 + ((jj - center[1]) / axes[1]) ** 2 <= 1.0


def lung_masks(h: int, w: int):
    """(body, lungs, texture zone) boolean masks for an h x w phantom slice."""
    body = _ellipse((h, w), ((h - 1) / 2, (w - 1) / 2), (0.42 * h, 0.45 * w))
    left = _ellipse((h, w), (0.5 * (h - 1), 0.3 * (w - 1)), (0.32 * h, 0.15 * w))
    right = _ellipse((h, w), (0.5 * (h - 1), 0.7 * (w - 1)), (0.32 * h, 0.15 * w))
    lungs = (left | right) & body
    zone = lungs.copy()
    return body, lungs, zone


def texture_extent(slope: float, saturation: float) -> float:
    return float(min(abs(slope) / saturation, 1.0))


def render_phantom(cfg: SynthConfig, rng: np.random.Generator, extent: float) -> list:
    """HU arrays (inferior first) for one patient."""
    n, h, w = cfg.volume_dims
    body, lungs, zone = lung_masks(h, w)
    zone_rows = np.nonzero(zone.any(axis=1))[0]
    textured_slices = int(np.ceil(cfg.textured_fraction * n))
    ii, jj = np.mgrid[:h, :w]
    slices = []
    for k in range(n):
        hu = np.full((h, w), AIR_HU)
        hu[body] = TISSUE_HU
        phase = rng.uniform(0, 2 * np.pi, size=2)
        swell = 30.0 * np.sin(2 * np.pi * ii / h + phase[0]) * np.cos(2 * np.pi * jj / w + phase[1])
        hu[lungs] = LUNG_HU + swell[lungs]
        if k < textured_slices and extent > 0 and zone_rows.size:
            top, bottom = zone_rows[0], zone_rows[-1]
            cut = bottom + 1 - extent * (bottom + 1 - top)
            off_i, off_j = rng.integers(0, 4, size=2)
            walls = ((ii + off_i) % 4 == 0) | ((jj + off_j) % 4 == 0)
            region = zone & (ii >= cut)
            hu[region & walls] = WALL_HU
            hu[region & ~walls] = CYST_HU
        hu[body] += rng.normal(0.0, cfg.hu_noise_std, size=int(body.sum()))
        slices.append(hu)
    return slices


def sample_patient(cfg: SynthConfig, index: int) -> SyntheticPatient:
    rng = _rng(cfg.seed, index)
    age = float(np.round(rng.normal(cfg.age_mean, cfg.age_std)))
    sex = Sex.MALE if rng.random() < cfg.p_male else Sex.FEMALE
    smoking = SMOKING_ORDER[int(rng.choice(3, p=cfg.smoking_probs))]
    slope = float(rng.normal(cfg.slope_mean, cfg.slope_std))
    base = float(rng.normal(cfg.base_fvc_mean, cfg.base_fvc_std))
    weeks = np.asarray(cfg.visit_weeks, dtype=np.float64)
    noise = rng.normal(0.0, cfg.fvc_noise_std, size=weeks.size) if cfg.fvc_noise_std > 0 else np.zeros(weeks.size)
    fvc = np.maximum(np.round(base + slope * weeks + noise), cfg.fvc_floor)
    typical = typical_fvc(age, sex)
    visits = tuple(
        Visit(int(wk), float(f), float(np.round(100.0 * f / typical, 4))) for wk, f in zip(cfg.visit_weeks, fvc)
    )
    pid = f"SYN{cfg.seed & 0xFFFF:04X}{index:05d}"
    record = PatientRecord(pid, visits, age, sex, smoking)

    extent = texture_extent(slope, cfg.texture_saturation)
    z0 = float(np.round(rng.uniform(-250.0, -150.0), 1))
    slices = []
    for k, hu in enumerate(render_phantom(cfg, rng, extent)):
        raw = np.clip(np.round(hu + 1024.0), -32768, 32767).astype(np.int16)
        slices.append(
            CtSlice(
                rows=raw.shape[0],
                cols=raw.shape[1],
                pixels=raw,
                rescale_slope=1.0,
                rescale_intercept=-1024.0,
                z_position=round(z0 + k * cfg.slice_spacing, 4),
                source_id=f"{pid}.{k}",
            )
        )
    _, _, zone = lung_masks(*cfg.volume_dims[1:])
    return SyntheticPatient(record, assemble_volume(pid, slices), slope, base, extent, zone)


def sample_cohort(cfg: SynthConfig) -> list:
    """List of ``(PatientRecord, CtVolume)`` pairs; deterministic given ``cfg.seed``."""
    return [(p.record, p.volume) for p in (sample_patient(cfg, i) for i in range(cfg.n_patients))]


def sample_demographics(cfg: SynthConfig):
    """Just the demographic draws (no volumes); fast path for large-n checks."""
    ages, male, smoking = [], [], []
    for i in range(cfg.n_patients):
        rng = _rng(cfg.seed, i)
        ages.append(float(np.round(rng.normal(cfg.age_mean, cfg.age_std))))
        male.append(rng.random() < cfg.p_male)
        smoking.append(int(rng.choice(3, p=cfg.smoking_probs)))
    return np.asarray(ages), np.asarray(male), np.asarray(smoking)


def export_cohort(cohort, out_dir) -> list:
    """Write ``metadata.csv`` plus ``<patient>/<k>.dcm`` per slice; returns written paths."""
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        records = [rec for rec, _ in cohort]
        csv_path = out / METADATA_NAME
        csv_path.write_text(format_metadata_csv(records), encoding="utf-8", newline="\n")
        written.append(csv_path)
        for rec, vol in cohort:
            pdir = out / rec.patient_id
            pdir.mkdir(exist_ok=True)
            for k, s in enumerate(vol.slices):
                path = pdir / f"{k:04d}.dcm"
                path.write_bytes(write_dicom_slice(s))
                written.append(path)
    except OSError as exc:
        raise IoFailure(f"cannot export cohort to {out}: {exc}") from exc
    return written
