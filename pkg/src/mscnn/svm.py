"""One-vs-all RBF support vector machines over frozen network descriptors.

Each binary problem is solved in the dual by sequential minimal optimisation
with second-order working-set selection. All binary problems of one fit share
a single kernel-row cache since they see the same training points.
"""

from __future__ import annotations

import itertools
import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_container, save_container

logger = logging.getLogger(__name__)

DEFAULT_C_GRID = (0.1, 1.0, 10.0, 100.0)
DEFAULT_GAMMA_GRID = (1.0 / 2048, 0.001, 0.01, 0.1)
TAU = 1e-12


class SvmError(ValueError):
    pass


def rbf_kernel(x, y, gamma: float) -> float:
    if gamma <= 0:
        raise SvmError("gamma must be positive")
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise SvmError(f"length mismatch: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.exp(-gamma * np.dot(d, d)))


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def kernel_matrix(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise SvmError("gamma must be positive")
    return np.exp(-gamma * squared_distances(a, b))


class KernelCache:
    """LRU cache of kernel rows ``K[i, :]`` over one training set."""

    def __init__(self, X: np.ndarray, gamma: float, max_rows: int = 4096, matrix: np.ndarray | None = None):
        if gamma <= 0:
            raise SvmError("gamma must be positive")
        self.X = X
        self.gamma = gamma
        self.sq = (X * X).sum(1)
        self.max_rows = max(2, max_rows)
        self.matrix = matrix
        self.rows: OrderedDict[int, np.ndarray] = OrderedDict()

    def __len__(self) -> int:
        return len(self.X)

    def row(self, i: int) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix[i]
        r = self.rows.get(i)
        if r is not None:
            self.rows.move_to_end(i)
            return r
        d = np.maximum(self.sq + self.sq[i] - 2.0 * self.X @ self.X[i], 0.0)
        r = np.exp(-self.gamma * d)
        self.rows[i] = r
        if len(self.rows) > self.max_rows:
            self.rows.popitem(last=False)
        return r


def smo_binary(cache: KernelCache, y: np.ndarray, C: float, tol: float = 1e-3, max_iter: int = 100000):
    """Dual C-SVC for labels in {-1, +1}; returns (alpha, bias) with f(x) = sum(alpha*y*K) + bias."""
    n = len(y)
    y = y.astype(np.float64)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 1/2 a'Qa - e'a
    diag = np.ones(n)  # RBF: K(x, x) = 1
    for it in range(max_iter):
        neg_yg = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        if not up.any() or not low.any():
            break
        i = int(np.flatnonzero(up)[np.argmax(neg_yg[up])])
        m_up = neg_yg[i]
        m_low = neg_yg[low].min()
        if m_up - m_low < tol:
            break
        Ki = cache.row(i)
        cand = low & (neg_yg < m_up)
        b = m_up - neg_yg[cand]
        a = diag[i] + diag[cand] - 2.0 * Ki[cand]
        a = np.where(a > 0, a, TAU)
        j = int(np.flatnonzero(cand)[np.argmin(-(b * b) / a)])
        Kj = cache.row(j)
        ai_old, aj_old = alpha[i], alpha[j]
        Qij = y[i] * y[j] * Ki[j]
        if y[i] != y[j]:
            quad = max(diag[i] + diag[j] + 2.0 * Qij, TAU)
            delta = (-grad[i] - grad[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, C - diff
            elif alpha[j] > C:
                alpha[j], alpha[i] = C, C + diff
        else:
            quad = max(diag[i] + diag[j] - 2.0 * Qij, TAU)
            delta = (grad[i] - grad[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, total - C
            elif alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, total
            if total > C:
                if alpha[j] > C:
                    alpha[j], alpha[i] = C, total - C
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, total
        di, dj = alpha[i] - ai_old, alpha[j] - aj_old
        grad += y * (y[i] * di * Ki + y[j] * dj * Kj)
    else:
        logger.warning("SMO hit the iteration cap (%d) before reaching tolerance %g", max_iter, tol)
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = yg[free].mean()
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        ub = yg[up].min() if up.any() else np.inf
        lb = yg[low].max() if low.any() else -np.inf
        rho = 0.0 if not np.isfinite(ub + lb) else (ub + lb) / 2
    return alpha, -rho


@dataclass
class SvmModel:
    """Per-class decision f_c(x) = K(x, SV) @ coef[c] + intercept[c] on standardised input."""

    support_vectors: np.ndarray
    coef: np.ndarray  # (n_classes, n_support): alpha * y
    intercept: np.ndarray
    gamma: float
    C: float
    mean: np.ndarray
    scale: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.intercept)

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Z = (X - self.mean) / self.scale
        return kernel_matrix(Z, self.support_vectors, self.gamma) @ self.coef.T + self.intercept


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(0)
    scale = X.std(0)
    return mean, np.where(scale > 0, scale, 1.0)


def svm_fit(
    descriptors,
    labels,
    C: float = 1.0,
    gamma: float = 1.0 / 2048,
    *,
    n_classes: int | None = None,
    tol: float = 1e-3,
    cache_rows: int = 4096,
) -> SvmModel:
    X = np.asarray(descriptors, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise SvmError(f"expected (n, d) descriptors and n labels, got {X.shape}, {y.shape}")
    k = n_classes if n_classes is not None else int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise SvmError("need at least two classes")
    if C <= 0:
        raise SvmError("C must be positive")
    if np.all(X == X[0]):
        raise SvmError("all descriptors are identical")
    mean, scale = _standardize(X)
    Z = (X - mean) / scale
    cache = KernelCache(Z, gamma, cache_rows)
    coefs = np.zeros((k, len(Z)))
    intercepts = np.zeros(k)
    for c in range(k):
        target = np.where(y == c, 1.0, -1.0)
        if not (target > 0).any():
            intercepts[c] = -1.0
            continue
        alpha, b = smo_binary(cache, target, C, tol)
        coefs[c] = alpha * target
        intercepts[c] = b
    used = np.flatnonzero(np.abs(coefs).sum(0) > 0)
    return SvmModel(Z[used], coefs[:, used], intercepts, float(gamma), float(C), mean, scale)


def svm_predict(model: SvmModel | None, descriptors) -> np.ndarray | int:
    """Arg-max of per-class decision values; ties go to the lowest class index."""
    if model is None:
        raise SvmError("model is not fitted")
    X = np.asarray(descriptors, dtype=np.float64)
    pred = model.decision_function(X).argmax(axis=1)
    return int(pred[0]) if X.ndim == 1 else pred


def tune(
    descriptors,
    labels,
    C_grid=DEFAULT_C_GRID,
    gamma_grid=DEFAULT_GAMMA_GRID,
    folds: int = 3,
    seed: int = 0,
    tol: float = 1e-3,
) -> tuple[float, float, dict]:
    """Grid search by k-fold accuracy. Ties prefer the smallest C, then the smallest gamma.

    Returns ``(C, gamma, scores)`` with ``scores[(C, gamma)]`` the mean fold accuracy.
    """
    if not len(C_grid) or not len(gamma_grid):
        raise SvmError("empty parameter grid")
    X = np.asarray(descriptors, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    k = int(y.max()) + 1
    parts = np.array_split(np.random.default_rng(seed).permutation(len(y)), folds)
    scores: dict[tuple[float, float], list[float]] = {}
    for f, val in enumerate(parts):
        tr = np.sort(np.concatenate([p for i, p in enumerate(parts) if i != f]))
        mean, scale = _standardize(X[tr])
        Ztr, Zval = (X[tr] - mean) / scale, (X[val] - mean) / scale
        d_tr = squared_distances(Ztr, Ztr)
        d_val = squared_distances(Zval, Ztr)
        for gamma in sorted(gamma_grid):
            K = np.exp(-gamma * d_tr)
            Kval = np.exp(-gamma * d_val)
            cache = KernelCache(Ztr, gamma, matrix=K)
            for C in sorted(C_grid):
                dec = np.zeros((len(val), k))
                for c in range(k):
                    target = np.where(y[tr] == c, 1.0, -1.0)
                    if not (target > 0).any():
                        dec[:, c] = -1.0
                        continue
                    alpha, b = smo_binary(cache, target, C, tol)
                    dec[:, c] = Kval @ (alpha * target) + b
                acc = float((dec.argmax(1) == y[val]).mean())
                scores.setdefault((C, gamma), []).append(acc)
    mean_scores = {key: float(np.mean(v)) for key, v in scores.items()}
    best = None
    for C, gamma in itertools.product(sorted(C_grid), sorted(gamma_grid)):
        if best is None or mean_scores[(C, gamma)] > mean_scores[best]:
            best = (C, gamma)
    return best[0], best[1], mean_scores


def save_svm(path, model: SvmModel) -> None:
    save_container(
        path,
        "svm",
        {"gamma": model.gamma, "C": model.C},
        {
            "support_vectors": model.support_vectors,
            "coef": model.coef,
            "intercept": model.intercept,
            "mean": model.mean,
            "scale": model.scale,
        },
    )


def load_svm(path) -> SvmModel:
    meta, arrays = load_container(path, "svm")
    return SvmModel(gamma=meta["gamma"], C=meta["C"], **arrays)
