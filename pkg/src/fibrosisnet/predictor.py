"""FVC prediction layer: per-slice decline slopes from image features and
clinical metadata, median aggregation, extrapolation from the baseline
spirometry, blending with an elastic-net metadata regressor and a
confidence estimate.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, backbone_features, init_backbone_params
from .errors import EmptyInput, InsufficientVisits, IoFailure, MissingStats, ShapeMismatch
from .ingest import CtVolume, PatientRecord, Sex, Smoking, Visit
from .preprocess import PreprocessConfig, preprocess_volume
from .regressors import (
    ElasticNetModel,
    QuantileModel,
    fit_elastic_net,
    fit_quantile,
    predict_elastic_net,
    select_elastic_net,
    sigma_from_quantiles,
)
from .tensor import AdamState, LrSchedule, Tensor, adam_step, lr_at

log = logging.getLogger(__name__)

SMOKING_ORDER = (Smoking.CURRENTLY_SMOKES, Smoking.EX_SMOKER, Smoking.NEVER_SMOKED)
CLINICAL_DIM = 7
ENET_FEATURES = ("base_fvc", "percent", "age", "sex_male", "smokes", "ex_smoker", "never_smoked", "weeks_elapsed")


# ---------------------------------------------------------------- encoding


@dataclass
class EncodingStats:
    age_mean: float
    age_std: float
    percent_mean: float
    percent_std: float
    fvc_mean: float
    fvc_std: float

    @classmethod
    def fit(cls, records: Sequence[PatientRecord]) -> "EncodingStats":
        if not records:
            raise MissingStats("cannot derive encoding statistics from zero records")
        age = np.array([r.age for r in records], dtype=np.float64)
        pct = np.array([r.baseline.percent for r in records], dtype=np.float64)
        fvc = np.array([r.baseline.fvc_ml for r in records], dtype=np.float64)

        def std(x):
            s = float(x.std())
            return s if s > 0 else 1.0

        return cls(float(age.mean()), std(age), float(pct.mean()), std(pct), float(fvc.mean()), std(fvc))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClinicalFeatures:
    age_z: float
    sex_male: float
    smoking_onehot: tuple
    percent_z: float
    base_fvc_z: float
    base_week: int

    def vector(self) -> np.ndarray:
        return np.array(
            [self.age_z, self.sex_male, *self.smoking_onehot, self.percent_z, self.base_fvc_z], dtype=np.float64
        )


def encode_metadata(record: PatientRecord, base_visit: Visit | None = None, stats: EncodingStats | None = None) -> ClinicalFeatures:
    if stats is None:
        raise MissingStats("encode_metadata needs training-set statistics")
    for name in ("age_std", "percent_std", "fvc_std"):
        if not getattr(stats, name) > 0:
            raise MissingStats(f"{name} must be positive")
    base = base_visit or record.baseline
    onehot = tuple(1.0 if record.smoking is s else 0.0 for s in SMOKING_ORDER)
    return ClinicalFeatures(
        age_z=(record.age - stats.age_mean) / stats.age_std,
        sex_male=1.0 if record.sex is Sex.MALE else 0.0,
        smoking_onehot=onehot,
        percent_z=(base.percent - stats.percent_mean) / stats.percent_std,
        base_fvc_z=(base.fvc_ml - stats.fvc_mean) / stats.fvc_std,
        base_week=int(base.week),
    )


def enet_features(record: PatientRecord, base_visit: Visit, target_week: int) -> np.ndarray:
    onehot = [1.0 if record.smoking is s else 0.0 for s in SMOKING_ORDER]
    return np.array(
        [
            base_visit.fvc_ml,
            base_visit.percent,
            record.age,
            1.0 if record.sex is Sex.MALE else 0.0,
            *onehot,
            float(target_week - base_visit.week),
        ],
        dtype=np.float64,
    )


# -------------------------------------------------------------------- head


def init_head_params(feature_dim: int, rng: np.random.Generator, bias: float = 0.0) -> dict:
    fan_in = feature_dim + CLINICAL_DIM
    return {
        "head.w": T.kaiming_uniform(rng, (fan_in, 1), fan_in),
        "head.b": np.array([bias], dtype=np.float32),
    }


def head_forward(features: Tensor, clinical: Tensor, params: dict) -> Tensor:
    """(N, F) image features and (N, 7) clinical vectors -> (N, 1) slopes in ml/week."""
    joined = T.concat([features, clinical], axis=1)
    return T.dense(joined, params["head.w"], params["head.b"])


def slice_slope(features, clinical: ClinicalFeatures | np.ndarray, head_params: dict) -> float:
    """Decline rate (ml/week) predicted from one slice's feature vector."""
    f = np.asarray(features, dtype=np.float64).ravel()
    c = clinical.vector() if isinstance(clinical, ClinicalFeatures) else np.asarray(clinical, dtype=np.float64)
    w = np.asarray(_array(head_params["head.w"]), dtype=np.float64)
    b = np.asarray(_array(head_params["head.b"]), dtype=np.float64)
    joined = np.concatenate([f, c])
    if w.shape != (joined.size, 1):
        raise ShapeMismatch(f"head expects {w.shape[0]} inputs, got {joined.size}")
    return float(joined @ w[:, 0] + b[0])


def aggregate_slopes(slopes: Sequence[float]) -> float:
    """Median; the mean of the two middle values for an even count."""
    if len(slopes) == 0:
        raise EmptyInput("no slopes to aggregate")
    return float(np.median(np.asarray(slopes, dtype=np.float64)))


def extrapolate_fvc(base_fvc: float, base_week: float, slope: float, target_week: float) -> float:
    return base_fvc + slope * (target_week - base_week)


# ---------------------------------------------------------------- ensemble


@dataclass
class EnsembleConfig:
    cnn_weight: float = 0.5
    sigma0: float = 200.0
    sigma_week_gain: float = 3.0
    sigma_dispersion_gain: float = 1.0
    # "formula" or "quantile"
    sigma_source: str = "formula"

    def __post_init__(self):
        if not 0 <= self.cnn_weight <= 1:
            raise ValueError("cnn_weight must lie in [0, 1]")
        if min(self.sigma0, self.sigma_week_gain, self.sigma_dispersion_gain) < 0:
            raise ValueError("sigma coefficients must be non-negative")
        if self.sigma_source not in ("formula", "quantile"):
            raise ValueError(f"unknown sigma_source {self.sigma_source!r}")


def ensemble_fvc(fvc_cnn: float, fvc_enet: float, cfg: EnsembleConfig | None = None) -> float:
    cfg = cfg or EnsembleConfig()
    return max(cfg.cnn_weight * fvc_cnn + (1.0 - cfg.cnn_weight) * fvc_enet, 1.0)


def estimate_sigma(weeks_elapsed: float, slope_iqr: float, cfg: EnsembleConfig | None = None) -> float:
    cfg = cfg or EnsembleConfig()
    weeks = abs(weeks_elapsed)
    sigma = cfg.sigma0 + cfg.sigma_week_gain * weeks + cfg.sigma_dispersion_gain * slope_iqr * weeks
    return max(sigma, 1.0)


@dataclass(frozen=True)
class FvcPrediction:
    fvc_ml: float
    sigma_ml: float
    target_week: int


# ------------------------------------------------------------------- model


def _array(p):
    return p.data if isinstance(p, Tensor) else p


@dataclass
class FibrosisModel:
    backbone_cfg: BackboneConfig
    preprocess_cfg: PreprocessConfig
    backbone_params: dict
    head_params: dict
    stats: EncodingStats
    enet: ElasticNetModel
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    quantile: QuantileModel | None = None
    meta: dict = field(default_factory=dict)

    def _frozen(self) -> dict:
        return {k: Tensor(_array(v)) for k, v in self.backbone_params.items()}

    def image_features(self, images: np.ndarray, threads: int = 1) -> np.ndarray:
        """(n, H, W) preprocessed slices -> (n, F) features, one forward pass per slice."""
        params = self._frozen()

        def one(img):
            x = Tensor(np.asarray(img, dtype=np.float32)[None, None])
            return backbone_features(x, self.backbone_cfg, params).data[0]

        if threads > 1 and len(images) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                feats = list(pool.map(one, images))
        else:
            feats = [one(img) for img in images]
        return np.stack(feats)

    def slice_slopes(self, images: np.ndarray, clinical: ClinicalFeatures, threads: int = 1) -> np.ndarray:
        feats = self.image_features(images, threads)
        return np.array([slice_slope(f, clinical, self.head_params) for f in feats])

    def slope_function(self, clinical: ClinicalFeatures) -> Callable[[np.ndarray], float]:
        """Closure mapping one preprocessed slice to its predicted slope."""
        params = self._frozen()

        def fn(img: np.ndarray) -> float:
            x = Tensor(np.asarray(img, dtype=np.float32)[None, None])
            feats = backbone_features(x, self.backbone_cfg, params).data[0]
            return slice_slope(feats, clinical, self.head_params)

        return fn

    # ------------------------------------------------------------ bundle
    def save(self, directory) -> None:
        out = Path(directory)
        try:
            out.mkdir(parents=True, exist_ok=True)
            T.save_params(self.backbone_params, out / "backbone.fnet")
            T.save_params(self.head_params, out / "head.fnet")
            _write_json(out / "backbone_config.json", self.backbone_cfg.to_dict())
            _write_json(out / "preprocess.json", json.loads(self.preprocess_cfg.to_json()))
            _write_json(out / "elastic_net.json", self.enet.to_dict())
            _write_json(out / "stats.json", self.stats.to_dict())
            _write_json(out / "ensemble.json", asdict(self.ensemble))
            if self.quantile is not None:
                _write_json(out / "quantile.json", self.quantile.to_dict())
            _write_json(out / "meta.json", self.meta)
        except OSError as exc:
            raise IoFailure(f"cannot write model bundle to {out}: {exc}") from exc

    @classmethod
    def load(cls, directory) -> "FibrosisModel":
        src = Path(directory)
        try:
            quantile_path = src / "quantile.json"
            return cls(
                backbone_cfg=BackboneConfig(**_read_json(src / "backbone_config.json")),
                preprocess_cfg=PreprocessConfig.from_dict(_read_json(src / "preprocess.json")),
                backbone_params=T.load_params(src / "backbone.fnet"),
                head_params=T.load_params(src / "head.fnet"),
                stats=EncodingStats(**_read_json(src / "stats.json")),
                enet=ElasticNetModel.from_dict(_read_json(src / "elastic_net.json")),
                ensemble=EnsembleConfig(**_read_json(src / "ensemble.json")),
                quantile=QuantileModel.from_dict(_read_json(quantile_path)) if quantile_path.exists() else None,
                meta=_read_json(src / "meta.json") if (src / "meta.json").exists() else {},
            )
        except OSError as exc:
            raise IoFailure(f"cannot read model bundle from {src}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


# -------------------------------------------------------------- inference


@dataclass
class PatientSlopes:
    """Per-slice slopes for one patient, reusable across target weeks."""

    record: PatientRecord
    base_visit: Visit
    clinical: ClinicalFeatures
    slopes: np.ndarray

    @property
    def median(self) -> float:
        return aggregate_slopes(self.slopes)

    @property
    def iqr(self) -> float:
        q75, q25 = np.percentile(self.slopes, [75, 25])
        return float(q75 - q25)


def patient_slopes(
    volume: CtVolume | None,
    record: PatientRecord,
    model: FibrosisModel,
    base_visit: Visit | None = None,
    images: np.ndarray | None = None,
    threads: int = 1,
) -> PatientSlopes:
    base = base_visit or record.baseline
    if images is None:
        images = preprocess_volume(volume, model.preprocess_cfg)
    if len(images) == 0:
        raise EmptyInput(f"patient {record.patient_id}: no slices after selection")
    clinical = encode_metadata(record, base, model.stats)
    return PatientSlopes(record, base, clinical, model.slice_slopes(images, clinical, threads))


def predict_from_slopes(ps: PatientSlopes, target_week: int, model: FibrosisModel) -> FvcPrediction:
    base = ps.base_visit
    fvc_cnn = extrapolate_fvc(base.fvc_ml, base.week, ps.median, target_week)
    x = enet_features(ps.record, base, target_week)
    fvc_enet = predict_elastic_net(model.enet, x)
    fvc = ensemble_fvc(fvc_cnn, fvc_enet, model.ensemble)
    if model.ensemble.sigma_source == "quantile" and model.quantile is not None:
        sigma = sigma_from_quantiles(model.quantile, x)
    else:
        sigma = estimate_sigma(target_week - base.week, ps.iqr, model.ensemble)
    return FvcPrediction(float(fvc), float(sigma), int(target_week))


def predict_patient(volume: CtVolume, record: PatientRecord, target_week: int, model: FibrosisModel, threads: int = 1) -> FvcPrediction:
    return predict_from_slopes(patient_slopes(volume, record, model, threads=threads), target_week, model)


# --------------------------------------------------------------- training


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    seed: int = 0
    base_lr: float = 1e-4
    lr_decay: float = 0.99
    lr_decay_interval: int = 100
    elastic_net_lambda: float = 1.0
    elastic_net_alpha: float = 0.5
    elastic_net_grid_search: bool = False
    fit_quantile: bool = True
    # "ridge": least-squares probe of per-patient slopes on the initial
    # features; "kaiming": fan-in uniform weights with zero bias
    head_init: str = "ridge"
    head_ridge: float = 1.0
    log_every: int = 0

    def __post_init__(self):
        if self.head_init not in ("ridge", "kaiming"):
            raise ValueError(f"unknown head_init {self.head_init!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("need steps >= 0 and batch_size >= 1")
        if self.base_lr <= 0 or not 0 < self.lr_decay <= 1 or self.lr_decay_interval < 1:
            raise ValueError("learning-rate schedule parameters out of range")

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.lr_decay, self.lr_decay_interval, staircase=True)


def ols_slope(record: PatientRecord) -> float:
    weeks = np.array([v.week for v in record.visits], dtype=np.float64)
    fvc = np.array([v.fvc_ml for v in record.visits], dtype=np.float64)
    if weeks.size < 2:
        return 0.0
    w = weeks - weeks.mean()
    return float(np.dot(w, fvc - fvc.mean()) / np.dot(w, w))


def metadata_design(records: Sequence[PatientRecord]):
    """Elastic-net design over every visit: features, FVC targets, patient index."""
    X, y, groups = [], [], []
    for i, rec in enumerate(records):
        for v in rec.visits:
            X.append(enet_features(rec, rec.baseline, v.week))
            y.append(v.fvc_ml)
            groups.append(i)
    return np.asarray(X), np.asarray(y), np.asarray(groups)


def ridge_head(arrays: dict, bcfg: BackboneConfig, images, clinical: np.ndarray, records, ridge: float) -> dict:
    """Head weights from a ridge fit of per-patient OLS slopes on initial per-slice inputs.

    Columns are standardized for the solve (bias unpenalized) and the
    solution is mapped back to raw head inputs.
    """
    frozen = {k: Tensor(v) for k, v in arrays.items() if not k.startswith("head.")}
    rows, targets = [], []
    for p, rec in enumerate(records):
        if len(rec.visits) < 2:
            continue
        feats = backbone_features(Tensor(np.asarray(images[p], np.float32)[:, None]), bcfg, frozen).data
        rows.append(np.hstack([feats.astype(np.float64), np.repeat(clinical[p][None].astype(np.float64), len(feats), 0)]))
        targets.append(np.full(len(feats), ols_slope(rec)))
    X, y = np.vstack(rows), np.concatenate(targets)
    mu, sd = X.mean(axis=0), X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (X - mu) / sd
    beta = np.linalg.solve(Z.T @ Z + ridge * np.eye(Z.shape[1]), Z.T @ (y - y.mean()))
    w = beta / sd
    b = y.mean() - mu @ w
    return {"head.w": w[:, None].astype(np.float32), "head.b": np.array([b], dtype=np.float32)}


@dataclass
class TrainResult:
    model: FibrosisModel
    losses: list
    seconds: float


def train(
    cohort: Sequence[tuple],
    cfg: TrainConfig | None = None,
    preprocess_cfg: PreprocessConfig | None = None,
    backbone_cfg: BackboneConfig | None = None,
    ensemble_cfg: EnsembleConfig | None = None,
    images: Sequence[np.ndarray] | None = None,
) -> TrainResult:
    """Fit the slope network end to end on visit-level FVC, then the metadata regressors.

    ``cohort`` holds ``(PatientRecord, CtVolume)`` pairs.  Every step draws
    ``batch_size`` (patient, follow-up visit, lower-lung slice) triples and
    minimizes the MAE between extrapolated and measured FVC with Adam.
    """
    cfg = cfg or TrainConfig()
    pcfg = preprocess_cfg or PreprocessConfig()
    bcfg = backbone_cfg or BackboneConfig.desk(pcfg.target_size)
    if tuple(bcfg.input_size) != tuple(pcfg.target_size):
        raise ShapeMismatch(f"backbone input {bcfg.input_size} != preprocess target {pcfg.target_size}")
    records = [rec for rec, _ in cohort]
    triples = [(p, v) for p, rec in enumerate(records) for v in range(1, len(rec.visits))]
    if not triples:
        raise InsufficientVisits("training needs at least one patient with two or more visits")

    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    if images is None:
        images = [preprocess_volume(vol, pcfg) for _, vol in cohort]
    stats = EncodingStats.fit(records)
    clinical = np.stack([encode_metadata(r, r.baseline, stats).vector() for r in records]).astype(np.float32)

    arrays = init_backbone_params(bcfg, rng)
    arrays.update(init_head_params(bcfg.feature_dim, rng))
    if cfg.head_init == "ridge":
        arrays.update(ridge_head(arrays, bcfg, images, clinical, records, cfg.head_ridge))
    params = T.as_parameters(arrays)
    head = {k: params[k] for k in ("head.w", "head.b")}
    state = AdamState()
    schedule = cfg.schedule
    losses = []

    for step in range(cfg.steps):
        picks = rng.integers(len(triples), size=cfg.batch_size)
        batch_x, batch_c, base_fvc, elapsed, target = [], [], [], [], []
        for t in picks:
            p, v = triples[t]
            rec = records[p]
            k = rng.integers(len(images[p]))
            batch_x.append(images[p][k])
            batch_c.append(clinical[p])
            base_fvc.append(rec.baseline.fvc_ml)
            elapsed.append(rec.visits[v].week - rec.baseline.week)
            target.append(rec.visits[v].fvc_ml)
        x = Tensor(np.stack(batch_x)[:, None].astype(np.float32))
        feats = backbone_features(x, bcfg, params)
        slope = head_forward(feats, Tensor(np.stack(batch_c)), head)
        pred = T.add(T.mul(slope, np.asarray(elapsed, np.float32)[:, None]), np.asarray(base_fvc, np.float32)[:, None])
        loss = T.mae_loss(pred, np.asarray(target, np.float32)[:, None])
        T.zero_grads(params.values())
        loss.backward()
        adam_step(params, T.collect_grads(params), state, lr_at(step, schedule))
        losses.append(float(loss.data))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.2f lr %.3g", step, losses[-1], lr_at(step, schedule))

    X, y, groups = metadata_design(records)
    lam, alpha = cfg.elastic_net_lambda, cfg.elastic_net_alpha
    if cfg.elastic_net_grid_search:
        lam, alpha = select_elastic_net(X, y, groups=groups, seed=cfg.seed)
    enet = fit_elastic_net(X, y, lam, alpha)
    quantile = fit_quantile(X, y) if cfg.fit_quantile else None

    model = FibrosisModel(
        backbone_cfg=bcfg,
        preprocess_cfg=pcfg,
        backbone_params={k: params[k].data.copy() for k in arrays if not k.startswith("head.")},
        head_params={k: head[k].data.copy() for k in head},
        stats=stats,
        enet=enet,
        ensemble=ensemble_cfg or EnsembleConfig(),
        quantile=quantile,
        meta={"seed": cfg.seed, "steps": cfg.steps, "batch_size": cfg.batch_size, "final_loss": losses[-1] if losses else None},
    )
    return TrainResult(model, losses, time.perf_counter() - start)


def training_mae(model: FibrosisModel, cohort: Sequence[tuple], images: Sequence[np.ndarray] | None = None) -> float:
    """MAE (ml) of the image route (median slope, extrapolated) over all follow-up visits."""
    errors = []
    for i, (rec, vol) in enumerate(cohort):
        ps = patient_slopes(vol, rec, model, images=None if images is None else images[i])
        base = ps.base_visit
        for v in rec.visits[1:]:
            errors.append(abs(extrapolate_fvc(base.fvc_ml, base.week, ps.median, v.week) - v.fvc_ml))
    if not errors:
        raise InsufficientVisits("no follow-up visits to evaluate")
    return float(np.mean(errors))
