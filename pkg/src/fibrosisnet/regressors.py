"""Linear regressors on clinical metadata.

``fit_elastic_net`` solves

    (1/2n) * ||y - b0 - X b||^2 + lam * (alpha * ||b||_1 + (1 - alpha)/2 * ||b||_2^2)

by cyclic coordinate descent on standardized features and centered
targets.  ``fit_quantile`` fits one linear model per quantile by
subgradient descent on the mean pinball loss.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np


class ConvergenceWarning(UserWarning):
    pass


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _standardize_stats(X: np.ndarray):
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    # constant columns carry no information; a unit scale keeps them at zero
    stds = np.where(stds > 0, stds, 1.0)
    return means, stds


@dataclass
class ElasticNetModel:
    coef: np.ndarray  # standardized-feature coefficients
    intercept: float  # equals mean(y) in standardized space
    lam: float
    alpha: float
    feature_means: np.ndarray
    feature_stds: np.ndarray
    converged: bool = True
    n_iter: int = 0
    objective_history: list = field(default_factory=list, repr=False)

    @property
    def coef_original(self) -> np.ndarray:
        return self.coef / self.feature_stds

    @property
    def intercept_original(self) -> float:
        return float(self.intercept - np.dot(self.coef_original, self.feature_means))

    def to_dict(self) -> dict:
        return {
            "coef": self.coef.tolist(),
            "intercept": self.intercept,
            "lambda": self.lam,
            "alpha": self.alpha,
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "converged": self.converged,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ElasticNetModel":
        return cls(
            coef=np.asarray(d["coef"], dtype=np.float64),
            intercept=float(d["intercept"]),
            lam=float(d["lambda"]),
            alpha=float(d["alpha"]),
            feature_means=np.asarray(d["feature_means"], dtype=np.float64),
            feature_stds=np.asarray(d["feature_stds"], dtype=np.float64),
            converged=bool(d.get("converged", True)),
            n_iter=int(d.get("n_iter", 0)),
        )


def elastic_net_objective(Z, yc, beta, lam, alpha) -> float:
    n = Z.shape[0]
    r = yc - Z @ beta
    penalty = lam * (alpha * np.abs(beta).sum() + 0.5 * (1 - alpha) * np.dot(beta, beta))
    return float(np.dot(r, r) / (2 * n) + penalty)


def fit_elastic_net(X, y, lam: float = 1.0, alpha: float = 0.5, tol: float = 1e-8, max_iter: int = 10000) -> ElasticNetModel:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    n, p = X.shape
    if n < 1 or p < 1:
        raise ValueError("elastic net needs n >= 1 samples and p >= 1 features")
    if y.shape[0] != n:
        raise ValueError(f"X has {n} rows but y has {y.shape[0]}")
    if lam < 0 or not 0 <= alpha <= 1:
        raise ValueError("need lam >= 0 and 0 <= alpha <= 1")

    means, stds = _standardize_stats(X)
    Z = (X - means) / stds
    y_mean = float(y.mean())
    yc = y - y_mean
    col_sq = (Z * Z).sum(axis=0) / n
    l1, l2 = lam * alpha, lam * (1 - alpha)

    beta = np.zeros(p)
    r = yc.copy()
    history = [elastic_net_objective(Z, yc, beta, lam, alpha)]
    converged = False
    sweep = 0
    for sweep in range(1, max_iter + 1):
        max_change = 0.0
        for j in range(p):
            old = beta[j]
            denom = col_sq[j] + l2
            if denom == 0:
                new = 0.0
            else:
                rho = np.dot(Z[:, j], r) / n + col_sq[j] * old
                new = float(soft_threshold(rho, l1)) / denom
            if new != old:
                r -= Z[:, j] * (new - old)
                beta[j] = new
                max_change = max(max_change, abs(new - old))
        history.append(elastic_net_objective(Z, yc, beta, lam, alpha))
        if max_change < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"elastic net did not converge in {max_iter} sweeps", ConvergenceWarning, stacklevel=2)
    return ElasticNetModel(beta, y_mean, lam, alpha, means, stds, converged, sweep, history)


def predict_elastic_net(model: ElasticNetModel, features) -> np.ndarray | float:
    x = np.asarray(features, dtype=np.float64)
    z = (x - model.feature_means) / model.feature_stds
    out = model.intercept + z @ model.coef
    return float(out) if np.ndim(out) == 0 else out


def select_elastic_net(
    X,
    y,
    lambdas=(0.01, 0.1, 1.0, 10.0),
    alphas=(0.1, 0.5, 0.9),
    groups=None,
    val_fraction: float = 0.25,
    seed: int = 0,
):
    """Grid-search (lam, alpha) by validation MAE; splits by ``groups`` when given."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    keys = np.arange(len(y)) if groups is None else np.asarray(groups)
    unique = np.unique(keys)
    n_val = max(1, int(round(val_fraction * len(unique))))
    if len(unique) < 2:
        return 1.0, 0.5
    val_keys = rng.choice(unique, size=n_val, replace=False)
    val = np.isin(keys, val_keys)
    best = None
    for lam, alpha in itertools.product(lambdas, alphas):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            model = fit_elastic_net(X[~val], y[~val], lam, alpha)
        err = float(np.mean(np.abs(predict_elastic_net(model, X[val]) - y[val])))
        if best is None or err < best[0]:
            best = (err, lam, alpha)
    return best[1], best[2]


# -------------------------------------------------------------- quantiles


def pinball_loss(pred, y, q: float) -> float:
    """Mean pinball (quantile) loss."""
    diff = np.asarray(y, dtype=np.float64) - np.asarray(pred, dtype=np.float64)
    return float(np.mean(q * np.maximum(diff, 0) + (1 - q) * np.maximum(-diff, 0)))


@dataclass
class QuantileModel:
    quantiles: tuple
    weights: np.ndarray  # (n_quantiles, p) on standardized features
    intercepts: np.ndarray  # (n_quantiles,)
    feature_means: np.ndarray
    feature_stds: np.ndarray
    y_center: float
    y_scale: float

    def __post_init__(self):
        qs = list(self.quantiles)
        if any(not 0 < q < 1 for q in qs) or any(b <= a for a, b in zip(qs, qs[1:])):
            raise ValueError(f"quantiles must be strictly increasing in (0, 1): {qs}")

    def to_dict(self) -> dict:
        return {
            "quantiles": list(self.quantiles),
            "weights": self.weights.tolist(),
            "intercepts": self.intercepts.tolist(),
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "y_center": self.y_center,
            "y_scale": self.y_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantileModel":
        p = len(d["feature_means"])
        return cls(
            quantiles=tuple(d["quantiles"]),
            weights=np.asarray(d["weights"], dtype=np.float64).reshape(len(d["quantiles"]), p),
            intercepts=np.asarray(d["intercepts"], dtype=np.float64),
            feature_means=np.asarray(d["feature_means"], dtype=np.float64),
            feature_stds=np.asarray(d["feature_stds"], dtype=np.float64),
            y_center=float(d["y_center"]),
            y_scale=float(d["y_scale"]),
        )


def fit_quantile(X, y, quantiles=(0.2, 0.5, 0.8), lr: float = 0.05, steps: int = 2000) -> QuantileModel:
    """Per-quantile linear fits by full-batch subgradient descent.

    Features are standardized and targets scaled internally; the returned
    parameters are the Polyak average over the second half of the run,
    which settles inside the flat optimum instead of oscillating around it.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    n, p = X.shape
    if n < 1:
        raise ValueError("quantile regression needs at least one sample")
    if p:
        means, stds = _standardize_stats(X)
    else:
        means, stds = np.zeros(0), np.ones(0)
    Z = (X - means) / stds
    y_center = float(y.mean())
    y_scale = float(y.std()) or 1.0
    t = (y - y_center) / y_scale

    qs = np.asarray(quantiles, dtype=np.float64)
    W = np.zeros((len(qs), p))
    b = np.zeros(len(qs))
    W_avg, b_avg = np.zeros_like(W), np.zeros_like(b)
    start = steps // 2
    for step in range(steps):
        pred = b[:, None] + W @ Z.T  # (Q, n)
        diff = t[None, :] - pred
        # d(pinball)/d(pred): -q above the prediction, (1 - q) below, 0 at ties
        g = np.where(diff > 0, -qs[:, None], np.where(diff < 0, 1 - qs[:, None], 0.0)) / n
        W -= lr * (g @ Z)
        b -= lr * g.sum(axis=1)
        if step >= start:
            W_avg += W
            b_avg += b
    count = steps - start
    if count:
        W, b = W_avg / count, b_avg / count
    return QuantileModel(tuple(float(q) for q in qs), W, b, means, stds, y_center, y_scale)


def predict_quantiles(model: QuantileModel, features) -> np.ndarray:
    """Predictions with shape ``(..., n_quantiles)``, sorted so they never cross."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim <= 1
    x = np.atleast_2d(x) if x.size or model.feature_means.size else np.zeros((1, 0))
    z = (x - model.feature_means) / model.feature_stds
    pred = (model.intercepts[None, :] + z @ model.weights.T) * model.y_scale + model.y_center
    pred = np.sort(pred, axis=-1)
    return pred[0] if single else pred


def sigma_from_quantiles(model: QuantileModel, features) -> float | np.ndarray:
    pred = predict_quantiles(model, features)
    spread = np.maximum(pred[..., -1] - pred[..., 0], 1.0)
    return float(spread) if np.ndim(spread) == 0 else spread
