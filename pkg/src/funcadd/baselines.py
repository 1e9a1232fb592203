"""Functional linear regression baselines.

Two comparison estimators for ``Y = alpha + int X(t) beta(t) dt + eps``:

* a smoothing-spline fit with a discretized ``int beta''(t)^2 dt`` penalty,
* truncated functional principal component regression (FPCA).

FPCA construction follows the usual recipe (centre, eigendecompose the
quadrature-weighted covariance, OLS on the leading scores, number of
components by 5-fold CV); none of it is tuned to a particular dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import linalg

from .curves import CurveDataset, TimeGrid
from .errors import ConditioningError, InputError
from .fit import GCV_TIE_TOL, LambdaGrid

# The discrete curvature penalty is of order 1/h^3 larger than the data term,
# so the useful range sits far below the thin-plate default grid.
FLR_DEFAULT_GRID = LambdaGrid.logspace(1e-14, 1e0, 71)


# --- smoothing-spline FLR ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class FlrFit:
    alpha_hat: float
    beta_hat: np.ndarray
    lam: float
    grid: TimeGrid
    gcv_score: float = float("nan")
    edf: float = float("nan")
    fitted: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.beta_hat.shape != (len(self.grid),) or not np.all(np.isfinite(self.beta_hat)):
            raise InputError("beta_hat must be finite and match the grid")


def second_difference_penalty(points) -> np.ndarray:
    """Matrix ``P`` with ``b' P b ~ int b''(t)^2 dt`` for ``b`` sampled on ``points``."""
    t = np.asarray(points, dtype=float)
    p = t.size
    if p < 3:
        return np.zeros((p, p))
    h = np.diff(t)
    D = np.zeros((p - 2, p))
    for k in range(1, p - 1):
        hl, hr = h[k - 1], h[k]
        D[k - 1, k - 1] = 2.0 / (hl * (hl + hr))
        D[k - 1, k] = -2.0 / (hl * hr)
        D[k - 1, k + 1] = 2.0 / (hr * (hl + hr))
    v = 0.5 * (h[:-1] + h[1:])
    return D.T @ (v[:, None] * D)


class _FlrSystem:
    def __init__(self, dataset: CurveDataset):
        if dataset.n < 3:
            raise InputError("FLR needs at least 3 curves")
        w = dataset.grid.weights
        self.A = dataset.values * w
        self.a_mean = self.A.mean(axis=0)
        self.Ac = self.A - self.a_mean
        self.y = dataset.responses
        self.ybar = float(self.y.mean())
        self.yc = self.y - self.ybar
        self.AtA = self.Ac.T @ self.Ac
        self.Aty = self.Ac.T @ self.yc
        self.P = second_difference_penalty(dataset.grid.points)
        self.n = dataset.n

    def _factor(self, lam):
        G = self.AtA + self.n * lam * self.P
        try:
            cf = linalg.cho_factor(G, lower=True)
        except linalg.LinAlgError:
            raise ConditioningError(
                f"FLR system is singular at lambda={lam:g}; use a larger lambda"
            ) from None
        return cf

    def solve(self, lam):
        cf = self._factor(lam)
        beta = linalg.cho_solve(cf, self.Aty)
        alpha = self.ybar - float(self.a_mean @ beta)
        fitted = self.ybar + self.Ac @ beta
        edf = 1.0 + float(np.trace(self.Ac @ linalg.cho_solve(cf, self.Ac.T)))
        rss = float(np.sum((self.y - fitted) ** 2))
        denom = 1.0 - edf / self.n
        score = (rss / self.n) / denom**2 if denom > 1e-10 else float("inf")
        if not np.all(np.isfinite(beta)):
            raise ConditioningError("non-finite FLR coefficients")
        return alpha, beta, fitted, edf, score

    def hat(self, lam):
        cf = self._factor(lam)
        return np.full((self.n, self.n), 1.0 / self.n) + self.Ac @ linalg.cho_solve(cf, self.Ac.T)


def fit_flr_ss(
    dataset: CurveDataset,
    lam: Optional[float] = None,
    grid: LambdaGrid = FLR_DEFAULT_GRID,
) -> FlrFit:
    """Smoothing-spline functional linear regression.

    Minimizes ``mean((Y - alpha - A beta)^2) + lam * beta' P beta`` where
    ``A`` applies trapezoid weights to the curves and ``P`` is the
    second-difference curvature penalty. With ``lam=None`` the penalty is
    picked by GCV over ``grid``, ties going to the larger value.
    """
    sys = _FlrSystem(dataset)
    if lam is not None:
        if not lam > 0:
            raise ConditioningError("FLR requires lambda > 0")
        alpha, beta, fitted, edf, score = sys.solve(lam)
        return FlrFit(alpha, beta, float(lam), dataset.grid, score, edf, fitted)
    best = None
    for value in grid.values:
        try:
            sol = sys.solve(value)
        except ConditioningError:
            continue
        score = sol[4]
        if best is None or score < best[0][4] - GCV_TIE_TOL * max(1.0, abs(best[0][4])):
            best = (sol, value)
    if best is None:
        raise ConditioningError("FLR system singular on the whole lambda grid")
    (alpha, beta, fitted, edf, score), value = best
    return FlrFit(alpha, beta, float(value), dataset.grid, score, edf, fitted)


def predict_flr(fit: FlrFit, values) -> np.ndarray:
    vals = np.atleast_2d(np.asarray(values, dtype=float))
    if vals.shape[0] == 0:
        return np.empty(0)
    if vals.shape[1] != len(fit.grid):
        raise InputError("curves are not on the FLR training grid")
    return fit.alpha_hat + (vals * fit.grid.weights) @ fit.beta_hat


def flr_hat_matrix(dataset: CurveDataset, lam: float) -> np.ndarray:
    return _FlrSystem(dataset).hat(lam)


# --- FPCA regression ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FpcaFit:
    """Truncated principal component regression.

    ``eigenfunctions`` is ``(k, p)`` and orthonormal under the trapezoid
    weights of ``grid``.
    """

    mean_curve: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    scores_coef: np.ndarray
    intercept: float
    grid: TimeGrid
    cv_errors: Optional[dict] = None

    @property
    def k(self) -> int:
        return self.eigenfunctions.shape[0]

    def scores(self, values) -> np.ndarray:
        vals = np.atleast_2d(np.asarray(values, dtype=float))
        return ((vals - self.mean_curve) * self.grid.weights) @ self.eigenfunctions.T


def _canonical_signs(V: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    # columns of V; flip so the first non-negligible entry is positive
    V = V.copy()
    for j in range(V.shape[1]):
        col = V[:, j]
        big = np.flatnonzero(np.abs(col) > tol * max(np.abs(col).max(), 1e-300))
        if big.size and col[big[0]] < 0:
            V[:, j] = -col
    return V


def _max_rank(n: int, p: int) -> int:
    return min(n - 1, p)


def _fpca_fixed(values: np.ndarray, y: np.ndarray, grid: TimeGrid, k: int) -> FpcaFit:
    n, p = values.shape
    if k < 1 or k > _max_rank(n, p):
        raise InputError(f"k={k} exceeds the available rank min(n-1, p)={_max_rank(n, p)}")
    w = grid.weights
    sw = np.sqrt(w)
    mu = values.mean(axis=0)
    B = (values - mu) * sw
    _, s, Vt = linalg.svd(B, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-10)) if s.size and s[0] > 0 else 0
    if k > rank:
        raise InputError(f"k={k} exceeds the numerical rank {rank} of the centred curves")
    V = _canonical_signs(Vt[:k].T)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(sw > 0, V.T / sw, 0.0)
    S = B @ V
    coef = (S.T @ (y - y.mean())) / np.sum(S**2, axis=0)
    return FpcaFit(mu, phi, s[:k] ** 2 / n, coef, float(y.mean()), grid)


def predict_fpca(fit: FpcaFit, values) -> np.ndarray:
    vals = np.atleast_2d(np.asarray(values, dtype=float))
    if vals.shape[0] == 0:
        return np.empty(0)
    if vals.shape[1] != len(fit.grid):
        raise InputError("curves are not on the FPCA training grid")
    return fit.intercept + fit.scores(vals) @ fit.scores_coef


def _cv_folds(n: int, folds: int, seed: int) -> list[np.ndarray]:
    perm = np.random.Generator(np.random.Philox(seed)).permutation(n)
    return np.array_split(perm, folds)


def fit_fpca(
    dataset: CurveDataset,
    k: Optional[int] = None,
    max_k: int = 10,
    folds: int = 5,
    seed: int = 0,
) -> FpcaFit:
    """FPCA regression with ``k`` components, or ``k`` chosen by K-fold CV.

    The CV candidates are ``1 .. min(max_k, n - 2)``, further capped so every
    training fold can support them. Ties go to the smaller ``k``.
    """
    X, y, grid = dataset.values, dataset.responses, dataset.grid
    n, p = X.shape
    if k is not None:
        return _fpca_fixed(X, y, grid, k)
    if n < 3:
        raise InputError("FPCA with cross-validated k needs at least 3 curves")
    parts = _cv_folds(n, min(folds, n), seed)
    smallest_train = n - max(len(part) for part in parts)
    kmax = min(max_k, n - 2, _max_rank(smallest_train, p))
    if kmax < 1:
        raise InputError("too few curves to cross-validate FPCA")
    sse = np.zeros(kmax)
    for part in parts:
        train = np.setdiff1d(np.arange(n), part)
        full = _fpca_fixed(X[train], y[train], grid, min(kmax, _train_rank(X[train], grid)))
        S_test = full.scores(X[part])
        resid = y[part] - full.intercept
        for kk in range(1, kmax + 1):
            kk_eff = min(kk, full.k)
            pred = S_test[:, :kk_eff] @ full.scores_coef[:kk_eff]
            sse[kk - 1] += float(np.sum((resid - pred) ** 2))
    best_k = int(np.argmin(sse)) + 1
    fit = _fpca_fixed(X, y, grid, min(best_k, _train_rank(X, grid)))
    cv = {kk + 1: float(sse[kk] / n) for kk in range(kmax)}
    return FpcaFit(fit.mean_curve, fit.eigenfunctions, fit.eigenvalues, fit.scores_coef,
                   fit.intercept, grid, cv)


def _train_rank(X: np.ndarray, grid: TimeGrid) -> int:
    B = (X - X.mean(axis=0)) * np.sqrt(grid.weights)
    s = linalg.svdvals(B)
    return max(1, int(np.sum(s > s[0] * 1e-10))) if s.size and s[0] > 0 else 1


def fpca_hat_matrix(dataset: CurveDataset, fit: FpcaFit) -> np.ndarray:
    """Hat matrix of the score regression with ``fit``'s components."""
    S = fit.scores(dataset.values)
    n = dataset.n
    return np.full((n, n), 1.0 / n) + S @ linalg.solve(S.T @ S, S.T)


# --- serialization -----------------------------------------------------------


def flr_to_dict(fit: FlrFit) -> dict:
    return {
        "model": "flr",
        "lambda": fit.lam,
        "alpha": fit.alpha_hat,
        "beta": fit.beta_hat.tolist(),
        "grid": fit.grid.points.tolist(),
        "gcv": fit.gcv_score,
        "edf": fit.edf,
    }


def flr_from_dict(d: dict) -> FlrFit:
    return FlrFit(float(d["alpha"]), np.asarray(d["beta"], dtype=float), float(d["lambda"]),
                  TimeGrid(d["grid"]), float(d.get("gcv", "nan")), float(d.get("edf", "nan")))


def fpca_to_dict(fit: FpcaFit) -> dict:
    return {
        "model": "fpca",
        "k": fit.k,
        "intercept": fit.intercept,
        "mean_curve": fit.mean_curve.tolist(),
        "eigenfunctions": fit.eigenfunctions.tolist(),
        "eigenvalues": fit.eigenvalues.tolist(),
        "scores_coef": fit.scores_coef.tolist(),
        "grid": fit.grid.points.tolist(),
        "cv_errors": {str(k): v for k, v in (fit.cv_errors or {}).items()},
    }


def fpca_from_dict(d: dict) -> FpcaFit:
    grid = TimeGrid(d["grid"])
    return FpcaFit(
        np.asarray(d["mean_curve"], dtype=float),
        np.asarray(d["eigenfunctions"], dtype=float).reshape(-1, len(grid)),
        np.asarray(d["eigenvalues"], dtype=float),
        np.asarray(d["scores_coef"], dtype=float),
        float(d["intercept"]),
        grid,
        {int(k): float(v) for k, v in d.get("cv_errors", {}).items()},
    )


def save_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")
