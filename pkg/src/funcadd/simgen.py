"""Synthetic designs, RMSPE experiments and the empirical rate study.

Random numbers come from numpy's counter-based Philox bit generator. A
replication ``r`` of an experiment with master seed ``s`` uses
``Philox(s + r)``; training curves are drawn before test curves.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Union

import numpy as np

from .baselines import fit_flr_ss, fit_fpca, predict_flr, predict_fpca
from .curves import CurveDataset, TimeGrid
from .errors import ConfigError, ExperimentError, NumericalError
from .fit import fit_thinspline, predict_many

logger = logging.getLogger(__name__)

LINEAR_DESIGNS = ("linear_wellspaced", "linear_closelyspaced")
NONLINEAR_DESIGNS = ("nonlinear_cos", "nonlinear_texp")
DESIGNS = LINEAR_DESIGNS + NONLINEAR_DESIGNS
N_TERMS = 50
NONLINEAR_SPAN = 10.0
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class ExperimentConfig:
    design: str
    sigma: float
    nu: Optional[float] = None
    n_train: int = 67
    n_test: int = 33
    grid_size: int = 101
    replications: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ConfigError(f"design: unknown design {self.design!r}; expected one of {DESIGNS}")
        if self.design in LINEAR_DESIGNS:
            if self.nu is None or not (isinstance(self.nu, (int, float)) and self.nu > 0):
                raise ConfigError(f"nu: design {self.design} needs a positive nu")
        elif self.nu is not None:
            raise ConfigError(f"nu: design {self.design} takes no nu")
        # sigma = 0 is allowed for noiseless checks
        if not (isinstance(self.sigma, (int, float)) and self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ConfigError("sigma: must be a nonnegative number")
        for name in ("n_train", "n_test", "replications"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name}: must be a positive integer")
        if not isinstance(self.grid_size, int) or self.grid_size < 3:
            raise ConfigError("grid_size: must be an integer >= 3")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed: must be a nonnegative integer")

    @classmethod
    def from_dict(cls, d: Mapping, path: str = "config") -> "ExperimentConfig":
        if not isinstance(d, Mapping):
            raise ConfigError(f"{path}: expected an object")
        known = {f for f in cls.__dataclass_fields__}
        for key in d:
            if key not in known:
                raise ConfigError(f"{path}.{key}: unknown field")
        if "design" not in d or "sigma" not in d:
            missing = "design" if "design" not in d else "sigma"
            raise ConfigError(f"{path}.{missing}: required field missing")
        try:
            return cls(**d)
        except ConfigError as exc:
            raise ConfigError(f"{path}.{exc}") from None
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# --- linear design -------------------------------------------------------------


def linear_zeta(design: str, nu: float, n_terms: int = N_TERMS) -> np.ndarray:
    """Coefficients ``zeta_1 .. zeta_n_terms`` of the cosine expansion of X."""
    k = np.arange(1, n_terms + 1)
    if design == "linear_wellspaced":
        return (-1.0) ** (k + 1) * k ** (-nu / 2)
    if design != "linear_closelyspaced":
        raise ConfigError(f"design: {design!r} is not a linear design")
    zeta = np.empty(n_terms)
    zeta[0] = 1.0
    for j in (2, 3, 4):
        if j <= n_terms:
            zeta[j - 1] = 0.2 * (-1.0) ** (j + 1) * (1 - 0.0001 * j)
    # indices 5j + k, j >= 1, 0 <= k <= 4, as printed; truncated at n_terms
    for idx in range(5, n_terms + 1):
        j, kk = divmod(idx, 5)
        zeta[idx - 1] = 0.2 * (-1.0) ** (idx + 1) * (5 * j) ** (-nu / 2) - 0.0001 * kk
    return zeta


def beta0(t, n_terms: int = N_TERMS) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    k = np.arange(2, n_terms + 1)
    coef = 4 * np.sqrt(2) * (-1.0) ** (k + 1) * k**-2.0
    return 0.3 + np.cos(np.pi * np.multiply.outer(t, k)) @ coef


def linear_basis(t, n_terms: int = N_TERMS) -> np.ndarray:
    """``(n_terms, p)`` matrix with rows ``1, sqrt2 cos(2 pi t), ..., sqrt2 cos(n pi t)``."""
    t = np.asarray(t, dtype=float)
    k = np.arange(1, n_terms + 1)
    basis = np.sqrt(2) * np.cos(np.pi * np.multiply.outer(k, t))
    basis[0] = 1.0
    return basis


def linear_curves(Z: np.ndarray, zeta: np.ndarray, t) -> np.ndarray:
    return (Z * zeta) @ linear_basis(t, zeta.size)


# --- nonlinear design ----------------------------------------------------------


def nonlinear_curve(u1, u2, t_raw) -> np.ndarray:
    """X(t) on the original time scale ``t in [0, 10]``; broadcasts over ``u1, u2``."""
    u1 = np.asarray(u1, dtype=float)[..., None]
    u2 = np.asarray(u2, dtype=float)[..., None]
    a = np.pi * np.asarray(t_raw, dtype=float) / 5
    return np.cos(u1) * np.sin(a) + np.sin(u1) * np.cos(a) + np.cos(u2) * np.sin(2 * a) + np.sin(u2) * np.cos(2 * a)


def nonlinear_integrand(design: str, t_raw, x) -> np.ndarray:
    if design == "nonlinear_cos":
        return np.cos(t_raw - x - 5.0)
    if design == "nonlinear_texp":
        return t_raw * np.exp(x)
    raise ConfigError(f"design: {design!r} is not a nonlinear design")


# --- sampling ------------------------------------------------------------------


def draw_design(config: ExperimentConfig, n: int, rng: np.random.Generator, noise: bool = True):
    """Draw ``n`` curves; returns ``(dataset, eta0)`` with the noiseless means.

    Nonlinear designs live on ``t in [0, 10]``; the dataset grid is ``t / 10``
    and integrals over the original interval are ``10 *`` unit-interval ones.
    """
    grid = TimeGrid.uniform(config.grid_size)
    w = grid.weights
    if config.design in LINEAR_DESIGNS:
        zeta = linear_zeta(config.design, config.nu)
        Z = rng.uniform(-np.sqrt(3), np.sqrt(3), size=(n, zeta.size))
        X = linear_curves(Z, zeta, grid.points)
        eta = X @ (w * beta0(grid.points))
    else:
        U = rng.uniform(0.0, 2 * np.pi, size=(n, 2))
        t_raw = NONLINEAR_SPAN * grid.points
        X = nonlinear_curve(U[:, 0], U[:, 1], t_raw)
        eta = NONLINEAR_SPAN * (nonlinear_integrand(config.design, t_raw, X) @ w)
    y = eta + config.sigma * rng.standard_normal(n) if noise else eta.copy()
    return CurveDataset(grid, X, y), eta


def gen_linear_design(config: ExperimentConfig, rep: int = 0):
    if config.design not in LINEAR_DESIGNS:
        raise ConfigError(f"design: {config.design!r} is not a linear design")
    rng = make_rng(config.seed + rep)
    train, _ = draw_design(config, config.n_train, rng)
    test, _ = draw_design(config, config.n_test, rng)
    return train, test


def gen_nonlinear_design(config: ExperimentConfig, rep: int = 0):
    if config.design not in NONLINEAR_DESIGNS:
        raise ConfigError(f"design: {config.design!r} is not a nonlinear design")
    rng = make_rng(config.seed + rep)
    train, _ = draw_design(config, config.n_train, rng)
    test, _ = draw_design(config, config.n_test, rng)
    return train, test


def generate(config: ExperimentConfig, rep: int = 0):
    if config.design in LINEAR_DESIGNS:
        return gen_linear_design(config, rep)
    return gen_nonlinear_design(config, rep)


# --- methods and metrics -------------------------------------------------------

Method = Callable[[CurveDataset, CurveDataset], np.ndarray]


def _thinspline(train: CurveDataset, test: CurveDataset) -> np.ndarray:
    return predict_many(fit_thinspline(train), test.values)


def _flr(train: CurveDataset, test: CurveDataset) -> np.ndarray:
    return predict_flr(fit_flr_ss(train), test.values)


def _fpca(train: CurveDataset, test: CurveDataset) -> np.ndarray:
    return predict_fpca(fit_fpca(train), test.values)


METHODS: dict[str, Method] = {"thinspline": _thinspline, "flr": _flr, "fpca": _fpca}


def rmspe(pred, y) -> float:
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.sqrt(np.mean((pred - y) ** 2)))


@dataclass(frozen=True)
class RmspeSummary:
    mean: float
    sd: float
    per_rep: tuple
    failures: int = 0

    @classmethod
    def from_values(cls, values: Iterable[float], failures: int = 0) -> "RmspeSummary":
        vals = tuple(float(v) for v in values)
        arr = np.array(vals)
        mean = float(arr.mean()) if arr.size else float("nan")
        sd = float(arr.std(ddof=1)) if arr.size > 1 else float("nan")
        return cls(mean, sd, vals, failures)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    summaries: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)


def _resolve_methods(methods) -> dict[str, Method]:
    if isinstance(methods, Mapping):
        resolved = dict(methods)
    else:
        resolved = {}
        for name in methods:
            if name not in METHODS:
                raise ConfigError(f"methods: unknown method {name!r}; expected one of {tuple(METHODS)}")
            resolved[name] = METHODS[name]
    if not resolved:
        raise ConfigError("methods: at least one method is required")
    return resolved


def _one_replication(config: ExperimentConfig, rep: int, methods: dict[str, Method]):
    train, test = generate(config, rep)
    out = {}
    for name, method in methods.items():
        try:
            out[name] = rmspe(method(train, test), test.responses)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            logger.warning("replication %d, method %s failed: %s", rep, name, exc)
            out[name] = None
    return out


def run_experiment(
    config: ExperimentConfig,
    methods: Union[Iterable[str], Mapping[str, Method]] = ("thinspline", "fpca"),
    workers: int = 1,
) -> ExperimentResult:
    """Fit every method on each replication's training set and score the test set.

    Failed replications are skipped and counted; more than 5% failures for a
    method raises :class:`ExperimentError`.
    """
    resolved = _resolve_methods(methods)
    reps = range(config.replications)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda r: _one_replication(config, r, resolved), reps))
    else:
        outcomes = [_one_replication(config, r, resolved) for r in reps]

    result = ExperimentResult(config)
    for rep, outcome in zip(reps, outcomes):
        for name in resolved:
            value = outcome[name]
            if value is not None:
                result.rows.append({
                    "design": config.design, "nu": config.nu, "sigma": config.sigma,
                    "method": name, "rep": rep, "rmspe": value,
                })
    for name in resolved:
        values = [o[name] for o in outcomes if o[name] is not None]
        failed = config.replications - len(values)
        result.failures[name] = failed
        if failed > MAX_FAILURE_RATE * config.replications:
            raise ExperimentError(
                f"method {name}: {failed} of {config.replications} replications failed"
            )
        result.summaries[name] = RmspeSummary.from_values(values, failed)
    return result


def _fmt_nu(nu) -> str:
    return "" if nu is None else format(nu, "g")


def write_results_csv(results: Iterable[ExperimentResult], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["design", "nu", "sigma", "method", "rep", "rmspe"])
        for res in results:
            for row in res.rows:
                w.writerow([row["design"], _fmt_nu(row["nu"]), format(row["sigma"], "g"),
                            row["method"], row["rep"], format(row["rmspe"], ".17g")])


def write_summary_csv(results: Iterable[ExperimentResult], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["design", "nu", "sigma", "method", "mean", "sd"])
        for res in results:
            cfg = res.config
            for name, s in res.summaries.items():
                w.writerow([cfg.design, _fmt_nu(cfg.nu), format(cfg.sigma, "g"), name,
                            format(s.mean, ".6f"), format(s.sd, ".6f")])


# --- rate study ----------------------------------------------------------------


@dataclass(frozen=True)
class RateStudyResult:
    n_list: tuple
    mean_excess_risk: tuple
    sd_excess_risk: tuple
    slope: float

    def rows(self):
        return list(zip(self.n_list, self.mean_excess_risk, self.sd_excess_risk))


def rate_study(
    design: str,
    n_list: Iterable[int],
    replications: int,
    seed: int = 0,
    sigma: float = 1.0,
    nu: Optional[float] = None,
    n_test: int = 500,
    grid_size: int = 101,
    method: str = "thinspline",
) -> RateStudyResult:
    """Mean excess risk ``mean((eta_hat - eta0)^2)`` on a fresh test set per ``n``.

    ``eta0`` is the generator's noiseless response. The slope is the least
    squares fit of log risk on log n.
    """
    n_list = tuple(int(n) for n in n_list)
    if len(n_list) < 2 or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigError("n_list: must be strictly increasing with at least two entries")
    if method not in METHODS:
        raise ConfigError(f"method: unknown method {method!r}")
    means, sds = [], []
    for n in n_list:
        cfg = ExperimentConfig(design, sigma, nu, n_train=n, n_test=n_test,
                               grid_size=grid_size, replications=replications, seed=seed)
        risks = []
        for rep in range(replications):
            rng = make_rng(seed + 1000 * n + rep)
            train, _ = draw_design(cfg, n, rng)
            test, eta0 = draw_design(cfg, n_test, rng, noise=False)
            pred = _predictor(method, train)(test.values)
            risks.append(float(np.mean((pred - eta0) ** 2)))
        means.append(float(np.mean(risks)))
        sds.append(float(np.std(risks, ddof=1)) if len(risks) > 1 else float("nan"))
    logs = np.log(np.maximum(means, np.finfo(float).tiny))
    slope = float(np.polyfit(np.log(n_list), logs, 1)[0])
    return RateStudyResult(n_list, tuple(means), tuple(sds), slope)


def _predictor(method: str, train: CurveDataset):
    if method == "thinspline":
        fit = fit_thinspline(train)
        return lambda v: predict_many(fit, v)
    if method == "flr":
        fit = fit_flr_ss(train)
        return lambda v: predict_flr(fit, v)
    fit = fit_fpca(train)
    return lambda v: predict_fpca(fit, v)


def write_rate_csv(result: RateStudyResult, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "mean_excess_risk", "sd_excess_risk"])
        for n, m, s in result.rows():
            w.writerow([n, format(m, ".10g"), format(s, ".10g")])
        w.writerow(["slope", format(result.slope, ".10g"), ""])


def config_to_dict(config: ExperimentConfig) -> dict:
    return asdict(config)
