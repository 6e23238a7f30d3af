"""Linear evaluation and the correlation-study analytics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import optimize, stats

from .errors import DataError, DomainError, StructureError


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------


def extract_features(backbone, data, indices=None, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Backbone outputs (projection removed) in eval mode, plus labels."""
    if indices is None:
        indices = data.indices("eval")
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise DataError("no samples to extract features from")
    was_training = backbone.training
    backbone.eval()
    chunks, labels = [], []
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            batch_idx = indices[start : start + batch_size]
            x = torch.stack([data.normalize(data.image(int(i))) for i in batch_idx])
            chunks.append(backbone(x).cpu().numpy())
            labels.extend(data.label(int(i)) for i in batch_idx)
    if was_training:
        backbone.train()
    return np.concatenate(chunks, axis=0), np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------


def _softmax_nll_and_grad(w_flat: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float, n_classes: int):
    n, d = x.shape
    w = w_flat.reshape(n_classes, d)
    logits = x @ w.T
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    probs = exp / exp.sum(axis=1, keepdims=True)
    nll = -np.log(probs[np.arange(n), y] + 1e-300).mean()
    # Bias column (the last one) is exempt from the L2 penalty.
    penalty = 0.5 * l2 * float((w[:, :-1] ** 2).sum())
    grad_logits = probs
    grad_logits[np.arange(n), y] -= 1.0
    grad = grad_logits.T @ x / n
    grad[:, :-1] += l2 * w[:, :-1]
    return nll + penalty, grad.ravel()


def _probe_gradient_descent(
    w_flat: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float, n_classes: int,
    grad_tol: float, max_iter: int, lr: float = 0.5, momentum: float = 0.9,
) -> np.ndarray:
    """Deterministic full-batch descent with momentum on the probe objective."""
    velocity = np.zeros_like(w_flat)
    w = w_flat.copy()
    for _ in range(max_iter):
        _, grad = _softmax_nll_and_grad(w, x, y, l2, n_classes)
        if np.abs(grad).max() < grad_tol:
            break
        velocity = momentum * velocity - lr * grad
        w = w + velocity
    return w


def _stratified_holdout(labels: np.ndarray, every: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic fit/holdout split: within each class, every ``every``-th
    sample (by position) is held out."""
    fit, hold = [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        for j, idx in enumerate(members):
            (hold if (j % every) == every - 1 else fit).append(idx)
    return np.asarray(fit, dtype=np.int64), np.asarray(hold, dtype=np.int64)


def linear_eval(
    features: np.ndarray,
    labels: np.ndarray,
    *,
    test_features: np.ndarray | None = None,
    test_labels: np.ndarray | None = None,
    l2: float = 1e-4,
    grad_tol: float = 1e-5,
    max_iter: int = 5000,
    method: str = "lbfgs",
) -> float:
    """Top-1 accuracy of a multinomial logistic probe on frozen features.

    The default probe is optimized with L-BFGS until the gradient infinity
    norm drops below ``grad_tol``; ``method="sgd"`` trains the same
    objective by full-batch gradient descent with momentum instead.  With
    no explicit test set, a deterministic stratified fifth of the samples
    is held out.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(features) != len(labels):
        raise StructureError(f"features {features.shape} and labels {labels.shape} do not align")
    if not np.all(np.isfinite(features)):
        raise DomainError("features contain non-finite values")

    if test_features is None:
        fit_idx, hold_idx = _stratified_holdout(labels)
        if len(hold_idx) == 0 or len(fit_idx) == 0:
            raise DomainError("not enough samples for an internal holdout split")
        test_features = features[hold_idx]
        test_labels = labels[hold_idx]
        features, labels = features[fit_idx], labels[fit_idx]
    else:
        test_features = np.asarray(test_features, dtype=np.float64)
        test_labels = np.asarray(test_labels, dtype=np.int64)

    classes = np.unique(labels)
    if len(classes) < 2:
        raise DomainError("linear evaluation needs at least 2 classes in the fit split")
    n_classes = int(labels.max()) + 1

    x = np.concatenate([features, np.ones((len(features), 1))], axis=1)
    w0 = np.zeros(n_classes * x.shape[1])
    if method == "lbfgs":
        result = optimize.minimize(
            _softmax_nll_and_grad,
            w0,
            args=(x, labels, l2, n_classes),
            method="L-BFGS-B",
            jac=True,
            options={"maxiter": max_iter, "maxfun": 10 * max_iter, "gtol": grad_tol, "ftol": 0.0},
        )
        _, grad = _softmax_nll_and_grad(result.x, x, labels, l2, n_classes)
        if np.abs(grad).max() > grad_tol * 10:
            result = optimize.minimize(
                _softmax_nll_and_grad, result.x, args=(x, labels, l2, n_classes),
                method="L-BFGS-B", jac=True,
                options={"maxiter": 4 * max_iter, "maxfun": 40 * max_iter, "gtol": grad_tol * 0.1, "ftol": 0.0},
            )
        w_flat = result.x
    elif method == "sgd":
        w_flat = _probe_gradient_descent(w0, x, labels, l2, n_classes, grad_tol, max_iter)
    else:
        raise DomainError(f"unknown probe method {method!r}")

    w = w_flat.reshape(n_classes, x.shape[1])
    x_test = np.concatenate([test_features, np.ones((len(test_features), 1))], axis=1)
    predictions = np.argmax(x_test @ w.T, axis=1)
    return float(np.mean(predictions == test_labels))


# ---------------------------------------------------------------------------
# correlation statistics
# ---------------------------------------------------------------------------


def _as_vector(xs, name: str) -> np.ndarray:
    arr = np.asarray(xs, dtype=np.float64)
    if arr.ndim != 1:
        raise DomainError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def average_ranks(xs) -> np.ndarray:
    """Ranks starting at 1; tied values share the average of their ranks."""
    xs = _as_vector(xs, "xs")
    order = np.argsort(xs, kind="mergesort")
    ranks = np.empty(len(xs), dtype=np.float64)
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(xs, ys) -> float:
    """Centered product-moment correlation."""
    xs, ys = _as_vector(xs, "xs"), _as_vector(ys, "ys")
    if len(xs) != len(ys):
        raise DomainError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 3:
        raise DomainError("correlation needs at least 3 points")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    ssx = float((dx * dx).sum())
    ssy = float((dy * dy).sum())
    if ssx == 0.0 or ssy == 0.0:
        raise DomainError("correlation undefined for constant input")
    return float((dx * dy).sum() / math.sqrt(ssx * ssy))


def spearman(xs, ys) -> float:
    """Rank correlation with average-rank tie handling."""
    return pearson(average_ranks(xs), average_ranks(ys))


@dataclass(frozen=True, eq=False)
class RegressionFit:
    """Least-squares line with a t-based confidence band on the mean response."""

    slope: float
    intercept: float
    x_grid: np.ndarray
    y_fit: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n: int
    residual_std: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.intercept + self.slope * np.asarray(x, dtype=np.float64)


def fit_regression_ci(xs, ys, *, confidence: float = 0.95, grid_points: int = 100) -> RegressionFit:
    """Ordinary least squares with a confidence band on the mean response."""
    xs, ys = _as_vector(xs, "xs"), _as_vector(ys, "ys")
    if len(xs) != len(ys):
        raise DomainError(f"length mismatch: {len(xs)} vs {len(ys)}")
    n = len(xs)
    if n < 3:
        raise DomainError("regression needs at least 3 points")
    sxx = float(((xs - xs.mean()) ** 2).sum())
    if sxx == 0.0:
        raise DomainError("regression undefined for constant xs")
    slope = float(((xs - xs.mean()) * (ys - ys.mean())).sum() / sxx)
    intercept = float(ys.mean() - slope * xs.mean())
    residuals = ys - (intercept + slope * xs)
    s2 = float((residuals**2).sum() / (n - 2))
    t_quantile = float(stats.t.ppf(0.5 + confidence / 2.0, n - 2))
    x_grid = np.linspace(xs.min(), xs.max(), grid_points)
    y_fit = intercept + slope * x_grid
    half_width = t_quantile * np.sqrt(s2 * (1.0 / n + (x_grid - xs.mean()) ** 2 / sxx))
    return RegressionFit(
        slope=slope,
        intercept=intercept,
        x_grid=x_grid,
        y_fit=y_fit,
        lower=y_fit - half_width,
        upper=y_fit + half_width,
        n=n,
        residual_std=math.sqrt(s2),
    )


# ---------------------------------------------------------------------------
# result tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ResultTable:
    """Model x dataset top-1 accuracy grid with per-model size statistics."""

    models: tuple[str, ...]
    datasets: tuple[str, ...]
    accuracy: np.ndarray
    params: tuple[int, ...]
    ratios: tuple[float, ...]

    def __post_init__(self):
        acc = np.asarray(self.accuracy, dtype=np.float64)
        if acc.shape != (len(self.models), len(self.datasets)):
            raise StructureError(
                f"accuracy grid {acc.shape} does not match {len(self.models)} models x {len(self.datasets)} datasets"
            )
        if np.isnan(acc).any():
            raise StructureError("accuracy grid has missing cells")
        if acc.size and (acc.min() < 0 or acc.max() > 1):
            raise StructureError("accuracies must lie in [0, 1]")
        if len(self.params) != len(self.models) or len(self.ratios) != len(self.models):
            raise StructureError("params/ratios must align with models")
        object.__setattr__(self, "accuracy", acc)


@dataclass(frozen=True, eq=False)
class CorrelationReport:
    """Pairwise rank/linear correlation matrices over dataset columns."""

    datasets: tuple[str, ...]
    spearman: np.ndarray
    pearson: np.ndarray
    n: np.ndarray

    def __post_init__(self):
        d = len(self.datasets)
        for name in ("spearman", "pearson"):
            m = getattr(self, name)
            if m.shape != (d, d):
                raise StructureError(f"{name} matrix must be {d}x{d}")
            if not np.allclose(m, m.T, atol=0.0, rtol=0.0):
                raise StructureError(f"{name} matrix must be exactly symmetric")
            if not np.all(np.diag(m) == 1.0):
                raise StructureError(f"{name} matrix must have unit diagonal")
            if m.size and (m.min() < -1 - 1e-12 or m.max() > 1 + 1e-12):
                raise StructureError(f"{name} entries must lie in [-1, 1]")


def build_correlation_matrix(table: ResultTable) -> CorrelationReport:
    """Spearman and Pearson coefficients over models for every dataset pair."""
    d = len(table.datasets)
    rho = np.eye(d)
    r = np.eye(d)
    n = np.full((d, d), len(table.models), dtype=np.int64)
    for i in range(d):
        for j in range(i + 1, d):
            rho[i, j] = rho[j, i] = spearman(table.accuracy[:, i], table.accuracy[:, j])
            r[i, j] = r[j, i] = pearson(table.accuracy[:, i], table.accuracy[:, j])
    return CorrelationReport(datasets=table.datasets, spearman=rho, pearson=r, n=n)
