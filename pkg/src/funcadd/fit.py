"""Penalized least squares for the additive functional model.

The fitted surface is

    F(t, x) = d1 + d3 * x + sum_i c_i * int J_2(|(t, x) - (s, X_i(s))|) ds

with ``c`` orthogonal to the null-space design ``[1, int X_i]``. Given the
Gram matrix ``Sigma`` the coefficients come from the QR closed form

    c = Q2 (Q2' Sigma Q2 + n lam I)^-1 Q2' Y,   d = R^-1 Q1' (Y - Sigma c)

and ``lam`` is chosen by generalized cross-validation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .curves import CurveDataset, FunctionalCurve, TimeGrid, ValueTransform, stack_curves
from .errors import ConditioningError, DegenerateDesignError, InputError
from .tps_kernel import (
    GramMatrices,
    TpsKernelSpec,
    assemble_cross,
    build_gram,
    has_degenerate_xi,
    pair_integrals,
)

logger = logging.getLogger(__name__)

# scores closer than this (relative to max(1, |best|)) count as ties
GCV_TIE_TOL = 1e-12


@dataclass(frozen=True)
class LambdaGrid:
    """Strictly decreasing positive penalty values."""

    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise InputError("lambda grid is empty")
        if any(not np.isfinite(v) or v <= 0 for v in vals):
            raise InputError("lambda grid values must be positive and finite")
        if any(b >= a for a, b in zip(vals, vals[1:])):
            raise InputError("lambda grid must be strictly decreasing")
        object.__setattr__(self, "values", vals)

    @classmethod
    def logspace(cls, lo: float = 1e-8, hi: float = 1e2, count: int = 50) -> "LambdaGrid":
        if not (0 < lo < hi) or count < 1:
            raise InputError("lambda grid needs 0 < lo < hi and count >= 1")
        if count == 1:
            return cls((hi,))
        return cls(tuple(np.logspace(np.log10(hi), np.log10(lo), count)))

    @classmethod
    def parse(cls, text: str) -> "LambdaGrid":
        """Parse ``lo:hi:count``."""
        try:
            lo, hi, count = text.split(":")
            return cls.logspace(float(lo), float(hi), int(count))
        except ValueError as exc:
            raise InputError(f"bad lambda grid {text!r}: expected lo:hi:count") from exc

    def __len__(self) -> int:
        return len(self.values)


DEFAULT_GRID = LambdaGrid.logspace()


@dataclass(frozen=True, eq=False)
class FitResult:
    """Coefficients of a fitted surface plus what prediction needs.

    ``d_hat`` holds ``(intercept, slope on int X)``. ``edf`` is the trace of
    the hat matrix, intercept included. ``transform``, ``grid`` and
    ``train_values`` (already transformed) are filled by
    :func:`fit_thinspline`; bare :func:`solve_penalized` results leave them
    empty and cannot predict new curves.
    """

    c_hat: np.ndarray
    d_hat: np.ndarray
    lam: float
    gcv_score: float
    edf: float
    fitted: np.ndarray
    m: int = 2
    transform: Optional[ValueTransform] = None
    grid: Optional[TimeGrid] = None
    train_values: Optional[np.ndarray] = None
    lambda_fixed: bool = False

    @property
    def intercept(self) -> float:
        return float(self.d_hat[0])

    @property
    def slope(self) -> float:
        return float(self.d_hat[1])

    @property
    def n(self) -> int:
        return self.c_hat.size


def _null_design(xi: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(xi.shape[0]), xi])


def _qr_split(xi: np.ndarray):
    if xi.shape[1] and has_degenerate_xi(xi):
        raise DegenerateDesignError(
            "null-space design is rank deficient: all curves have the same mean value"
        )
    N = _null_design(xi)
    Q, Rfull = linalg.qr(N)
    k = N.shape[1]
    R = Rfull[:k, :k]
    if np.min(np.abs(np.diag(R))) <= 1e-12 * np.abs(R).max():
        raise DegenerateDesignError("null-space design is rank deficient")
    return N, Q[:, :k], Q[:, k:], R


def _factor(M: np.ndarray):
    try:
        return linalg.cho_factor(M, lower=True)
    except linalg.LinAlgError:
        pass
    jitter = 1e-10 * abs(np.trace(M)) / max(M.shape[0], 1)
    try:
        return linalg.cho_factor(M + jitter * np.eye(M.shape[0]), lower=True)
    except linalg.LinAlgError:
        raise ConditioningError(
            "penalized system is not positive definite; try a larger lambda"
        ) from None


def _gcv_from(rss: float, edf: float, n: int) -> float:
    denom = 1.0 - edf / n
    if not denom > 1e-10:
        return float("inf")
    return (rss / n) / denom**2


def solve_penalized(gram: GramMatrices, y, lam: float) -> FitResult:
    """Minimize ``|Y - Xi d - Sigma c|^2 / n + lam c' Sigma c`` in closed form.

    The responses are centred first; the intercept column of the null-space
    design then absorbs the mean, so the result equals the uncentred solve.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    n = gram.n
    if y.size != n:
        raise InputError(f"{y.size} responses for a {n} x {n} Gram matrix")
    if not (np.isfinite(lam) and lam > 0):
        raise InputError("lambda must be positive and finite")
    ybar = y.mean()
    yc = y - ybar
    sigma = gram.sigma
    N, Q1, Q2, R = _qr_split(gram.xi)

    M = Q2.T @ sigma @ Q2
    M = 0.5 * (M + M.T) + n * lam * np.eye(M.shape[0])
    cf = _factor(M)
    c = Q2 @ linalg.cho_solve(cf, Q2.T @ yc)
    d = linalg.solve_triangular(R, Q1.T @ (yc - sigma @ c))
    d[0] += ybar
    fitted = N @ d + sigma @ c
    if d.size == 1:
        d = np.array([d[0], 0.0])
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(d))):
        raise ConditioningError("non-finite coefficients; try a larger lambda")
    edf = n - n * lam * float(np.trace(linalg.cho_solve(cf, np.eye(M.shape[0]))))
    rss = float(np.sum((y - fitted) ** 2))
    return FitResult(c, d, float(lam), _gcv_from(rss, edf, n), edf, fitted)


def hat_matrix(gram: GramMatrices, lam: float) -> np.ndarray:
    """``H = I - n lam Q2 (Q2' Sigma Q2 + n lam I)^-1 Q2'``."""
    n = gram.n
    _, _, Q2, _ = _qr_split(gram.xi)
    M = Q2.T @ gram.sigma @ Q2
    M = 0.5 * (M + M.T) + n * lam * np.eye(M.shape[0])
    cf = _factor(M)
    return np.eye(n) - n * lam * Q2 @ linalg.cho_solve(cf, Q2.T)


def gcv(gram: GramMatrices, y, lam: float) -> float:
    """GCV score at one lambda; ``inf`` when ``tr H / n`` reaches 1."""
    return solve_penalized(gram, y, lam).gcv_score


class _Spectral:
    """Eigen-decomposition of ``Q2' Sigma Q2`` reused across a lambda grid."""

    def __init__(self, gram: GramMatrices, y: np.ndarray):
        _, _, Q2, _ = _qr_split(gram.xi)
        S = Q2.T @ gram.sigma @ Q2
        self.mu, V = linalg.eigh(0.5 * (S + S.T))
        self.z = V.T @ (Q2.T @ y)
        self.n = gram.n

    def score(self, lam: float) -> tuple[float, float]:
        nl = self.n * lam
        denom = self.mu + nl
        if np.any(denom <= 0):
            return float("inf"), float("nan")
        shrink = nl / denom
        rss = float(np.sum((shrink * self.z) ** 2))
        edf = self.n - float(shrink.sum())
        return _gcv_from(rss, edf, self.n), edf


def gcv_curve(gram: GramMatrices, y, grid: LambdaGrid = DEFAULT_GRID) -> np.ndarray:
    """GCV scores over ``grid`` (same order as ``grid.values``)."""
    spec = _Spectral(gram, np.asarray(y, dtype=float).reshape(-1))
    return np.array([spec.score(lam)[0] for lam in grid.values])


def trace_curve(gram: GramMatrices, grid: LambdaGrid = DEFAULT_GRID) -> np.ndarray:
    spec = _Spectral(gram, np.zeros(gram.n))
    return np.array([spec.score(lam)[1] for lam in grid.values])


def select_lambda(gram: GramMatrices, y, grid: LambdaGrid = DEFAULT_GRID) -> tuple[float, FitResult]:
    """Grid lambda with the smallest GCV score, refitted.

    Ties within ``GCV_TIE_TOL`` go to the largest lambda (the grid is
    decreasing, so the first one in grid order).
    """
    scores = gcv_curve(gram, y, grid)
    finite = np.isfinite(scores)
    if not finite.any():
        raise ConditioningError("GCV is infinite on the whole lambda grid")
    best = scores[finite].min()
    tol = GCV_TIE_TOL * max(1.0, abs(best))
    idx = int(np.flatnonzero(finite & (scores <= best + tol))[0])
    lam = grid.values[idx]
    return lam, solve_penalized(gram, y, lam)


# --- end-to-end fit and prediction ------------------------------------------


def fit_thinspline(
    dataset: CurveDataset,
    lam: Optional[float] = None,
    grid: LambdaGrid = DEFAULT_GRID,
    spec: TpsKernelSpec = TpsKernelSpec(),
    threads: int = 1,
    cache_dir=None,
) -> FitResult:
    """Scale curve values into [0, 1], build the Gram matrices and fit.

    ``lam`` fixes the penalty; otherwise it is chosen by GCV over ``grid``.
    """
    if dataset.n < 3:
        raise InputError("need at least 3 curves to fit")
    tf = ValueTransform.fit(dataset.values)
    scaled = CurveDataset(dataset.grid, tf.apply(dataset.values), dataset.responses, tf)
    gram = build_gram(scaled, spec, threads=threads, cache_dir=cache_dir)
    if has_degenerate_xi(gram.xi):
        # every curve has the same mean: the slope is not identifiable, keep only the intercept
        logger.info("int X(t) dt is constant across curves; fitting without the slope term")
        gram = GramMatrices(gram.sigma, np.empty((gram.n, 0)))
    if lam is None:
        _, res = select_lambda(gram, scaled.responses, grid)
    else:
        res = solve_penalized(gram, scaled.responses, lam)
    return FitResult(
        res.c_hat, res.d_hat, res.lam, res.gcv_score, res.edf, res.fitted,
        m=spec.m, transform=tf, grid=dataset.grid, train_values=scaled.values,
        lambda_fixed=lam is not None,
    )


def _require_predictive(fit: FitResult) -> None:
    if fit.transform is None or fit.grid is None or fit.train_values is None:
        raise InputError("fit has no training curves attached; use fit_thinspline")


def predict_many(fit: FitResult, values, threads: int = 1) -> np.ndarray:
    """Predictions for raw curve values of shape ``(k, p)`` on the training grid."""
    _require_predictive(fit)
    raw = np.atleast_2d(np.asarray(values, dtype=float))
    if raw.shape[0] == 0:
        return np.empty(0)
    if raw.shape[1] != len(fit.grid):
        raise InputError("curves are not on the training grid")
    x = fit.transform.apply(raw)
    K = assemble_cross(x, fit.train_values, fit.grid, TpsKernelSpec(fit.m), threads=threads)
    return fit.d_hat[0] + fit.d_hat[1] * (x @ fit.grid.weights) + K @ fit.c_hat


def predict(fit: FitResult, new_curve: FunctionalCurve, interp: bool = False) -> float:
    _require_predictive(fit)
    vals = stack_curves([new_curve], fit.grid, interp=interp)
    return float(predict_many(fit, vals)[0])


def predict_dataset(fit: FitResult, dataset: CurveDataset, interp: bool = False, threads: int = 1) -> np.ndarray:
    _require_predictive(fit)
    if dataset.grid != fit.grid:
        if not interp:
            raise InputError("dataset grid differs from the training grid (use interpolation)")
        dataset = dataset.interpolate_to(fit.grid)
    return predict_many(fit, dataset.values, threads=threads)


def eval_surface(fit: FitResult, t_grid: Sequence[float], x_grid: Sequence[float]) -> np.ndarray:
    """``F(t, x)`` on the product grid, shape ``(len(t_grid), len(x_grid))``.

    ``x`` is on the transformed [0, 1] scale.
    """
    _require_predictive(fit)
    t_grid = np.asarray(t_grid, dtype=float)
    x_grid = np.asarray(x_grid, dtype=float)
    if np.any((t_grid < 0) | (t_grid > 1)) or np.any((x_grid < 0) | (x_grid > 1)):
        raise InputError("surface grids must lie inside [0, 1]")
    n, nx = fit.n, x_grid.size
    I, J = (g.ravel() for g in np.meshgrid(np.arange(nx), np.arange(n), indexing="ij"))
    out = np.empty((t_grid.size, nx))
    pts = x_grid.reshape(-1, 1)
    for r, t in enumerate(t_grid):
        K = pair_integrals(pts, fit.train_values, I, J, np.array([t]), np.ones(1),
                           fit.grid.points, fit.grid.weights).reshape(nx, n)
        out[r] = fit.d_hat[0] + fit.d_hat[1] * x_grid + K @ fit.c_hat
    return out


def write_surface_csv(path, t_grid, x_grid, surface: np.ndarray) -> None:
    lines = ["t,x,F"]
    for i, t in enumerate(t_grid):
        for j, x in enumerate(x_grid):
            lines.append(f"{float(t):.17g},{float(x):.17g},{surface[i, j]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- serialization -----------------------------------------------------------


def fit_to_dict(fit: FitResult) -> dict:
    _require_predictive(fit)
    return {
        "model": "thinspline",
        "m": fit.m,
        "lambda": fit.lam,
        "lambda_fixed": fit.lambda_fixed,
        "intercept": fit.intercept,
        "d3": fit.slope,
        "gcv": fit.gcv_score,
        "edf": fit.edf,
        "c": fit.c_hat.tolist(),
        "transform": fit.transform.to_dict(),
        "grid": fit.grid.points.tolist(),
        "curves": fit.train_values.tolist(),
        "fitted": fit.fitted.tolist(),
    }


def fit_from_dict(d: dict) -> FitResult:
    try:
        grid = TimeGrid(d["grid"])
        curves = np.asarray(d["curves"], dtype=float).reshape(-1, len(grid))
        c = np.asarray(d["c"], dtype=float)
        if c.size != curves.shape[0]:
            raise InputError("fit JSON: c and curves disagree in length")
        return FitResult(
            c_hat=c,
            d_hat=np.array([float(d["intercept"]), float(d["d3"])]),
            lam=float(d["lambda"]),
            gcv_score=float(d.get("gcv", float("nan"))),
            edf=float(d.get("edf", float("nan"))),
            fitted=np.asarray(d.get("fitted", []), dtype=float),
            m=int(d.get("m", 2)),
            transform=ValueTransform.from_dict(d["transform"]),
            grid=grid,
            train_values=curves,
            lambda_fixed=bool(d.get("lambda_fixed", False)),
        )
    except KeyError as exc:
        raise InputError(f"fit JSON is missing field {exc.args[0]!r}") from None


def save_fit(fit: FitResult, path) -> None:
    Path(path).write_text(json.dumps(fit_to_dict(fit), indent=1) + "\n", encoding="utf-8")


def load_fit(path) -> FitResult:
    return fit_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
