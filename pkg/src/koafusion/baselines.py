"""L2-regularized logistic regression on clinical variables.

Reference models trained by full-batch gradient descent, run to a tight
gradient-norm tolerance so results do not depend on iteration budgets.
Class weighting (none versus balanced) is selected by cross-validated
average precision, and fold models are ensembled by averaging predicted
probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import Dataset, encode_clinical
from .errors import ContractViolation
from .evaluation import average_precision

L2_PENALTY = 1.0
GRAD_TOL = 1e-8
CLASS_WEIGHTINGS = ("none", "balanced")


def class_weights(y: np.ndarray, weighting: str) -> np.ndarray:
    """Per-sample weights; 'balanced' uses n / (2 * n_class)."""
    if weighting == "none":
        return np.ones(y.size)
    if weighting != "balanced":
        raise ContractViolation(f"unknown class weighting {weighting!r}")
    n1 = int(y.sum())
    n0 = y.size - n1
    if n0 == 0 or n1 == 0:
        raise ContractViolation("balanced weighting needs both classes present")
    w1 = y.size / (2.0 * n1)
    w0 = y.size / (2.0 * n0)
    return np.where(y == 1, w1, w0)


def _objective(w, b, x, y, sw, l2):
    z = x @ w + b
    # stable log(1 + exp(-margin)) via logaddexp
    ce = np.logaddexp(0.0, z) - y * z
    return float((sw * ce).sum() + 0.5 * l2 * (w @ w))


def _gradient(w, b, x, y, sw, l2):
    z = x @ w + b
    p = 1.0 / (1.0 + np.exp(-z))
    r = sw * (p - y)
    return x.T @ r + l2 * w, float(r.sum())


def fit_logistic(x, y, sample_weights=None, l2: float = L2_PENALTY,
                 grad_tol: float = GRAD_TOL, max_iter: int = 200000):
    """Minimize weighted cross-entropy + 0.5*l2*||w||^2 (bias unpenalized).

    Full-batch gradient descent with the fixed step 1/L.  The logistic
    Hessian is bounded by 0.25 * X'SX plus the ridge, so
    L = 0.25 * sum_i sw_i * (|x_i|^2 + 1) + l2 (the +1 covers the bias
    coordinate) guarantees descent, and the ridge makes the objective
    strongly convex, so the iteration converges linearly to the unique
    minimizer.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ContractViolation("need [n, d] features and [n] labels")
    sw = np.ones(y.size) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    lips = 0.25 * float(sw @ ((x * x).sum(axis=1) + 1.0)) + l2
    step = 1.0 / lips
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(max_iter):
        gw, gb = _gradient(w, b, x, y, sw, l2)
        if np.sqrt(gw @ gw + gb * gb) < grad_tol:
            break
        w = w - step * gw
        b = b - step * gb
    return w, float(b), _objective(w, b, x, y, sw, l2)


@dataclass
class LrFoldModel:
    weights: np.ndarray
    bias: float
    train_stats: dict


@dataclass
class LrCvModel:
    variable_set: str
    weighting: str
    folds: list  # LrFoldModel per CV fold
    weighting_val_ap: dict  # mean validation AP per candidate weighting


def _fit_fold(dataset: Dataset, train_ids, variable_set, weighting):
    x, stats = encode_clinical(dataset, train_ids, variable_set, train_stats=None)
    y = dataset.label_array(train_ids).astype(np.float64)
    w, b, _ = fit_logistic(x, y, class_weights(y.astype(np.int64), weighting))
    return LrFoldModel(w, b, stats)


def lr_fit_cv(dataset: Dataset, split, variable_set: str) -> LrCvModel:
    """Fit per-fold logistic baselines, selecting the class weighting by
    mean validation AP (ties keep 'none')."""
    fits = {}
    mean_ap = {}
    for weighting in CLASS_WEIGHTINGS:
        fold_models, aps = [], []
        for train_ids, val_ids in split.folds:
            fm = _fit_fold(dataset, train_ids, variable_set, weighting)
            xv, _ = encode_clinical(dataset, val_ids, variable_set, train_stats=fm.train_stats)
            scores = 1.0 / (1.0 + np.exp(-(xv @ fm.weights + fm.bias)))
            aps.append(average_precision(scores, dataset.label_array(val_ids)))
            fold_models.append(fm)
        fits[weighting] = fold_models
        mean_ap[weighting] = float(np.mean(aps))
    best = "none" if mean_ap["none"] >= mean_ap["balanced"] else "balanced"
    return LrCvModel(variable_set, best, fits[best], mean_ap)


def lr_predict(model: LrCvModel, dataset: Dataset, ids) -> np.ndarray:
    """Ensembled probabilities: mean sigmoid over fold models."""
    out = np.zeros(len(ids))
    for fm in model.folds:
        x, _ = encode_clinical(dataset, ids, model.variable_set, train_stats=fm.train_stats)
        out += 1.0 / (1.0 + np.exp(-(x @ fm.weights + fm.bias)))
    return out / len(model.folds)
