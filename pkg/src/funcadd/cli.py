"""Command-line front-end.

Exit codes: 0 success, 2 input error, 3 numerical failure. Every output file
gets a ``<name>.manifest.json`` sidecar describing the run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    FLR_DEFAULT_GRID,
    fit_flr_ss,
    fit_fpca,
    flr_from_dict,
    flr_to_dict,
    fpca_from_dict,
    fpca_to_dict,
    predict_flr,
    predict_fpca,
    save_json,
)
from .curves import read_csv_dataset
from .errors import ConfigError, ExperimentError, InputError, NumericalError
from .fit import (
    DEFAULT_GRID,
    LambdaGrid,
    eval_surface,
    fit_from_dict,
    fit_thinspline,
    predict_dataset,
    save_fit,
    write_surface_csv,
)
from .simgen import (
    ExperimentConfig,
    METHODS,
    rate_study,
    rmspe,
    run_experiment,
    write_rate_csv,
    write_results_csv,
    write_summary_csv,
)
from .tps_kernel import TpsKernelSpec

logger = logging.getLogger("funcadd")


class _Stage:
    """Tags exceptions with the pipeline stage that raised them."""

    current = "startup"


def _set_stage(name: str) -> None:
    _Stage.current = name


# --- manifest ----------------------------------------------------------------


def _config_hash(inputs: list[Path], flags: dict) -> str:
    h = hashlib.sha256()
    for p in inputs:
        h.update(Path(p).read_bytes())
    h.update(json.dumps(flags, sort_keys=True, default=str).encode())
    return h.hexdigest()


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.isoformat(timespec="seconds")


def write_manifest(output: Path, command: str, inputs: list[Path], flags: dict, seed) -> Path:
    manifest = {
        "command": command,
        "config_hash": _config_hash(inputs, flags),
        "seed": seed,
        "tool_version": __version__,
        "timestamp": _timestamp(),
    }
    path = output.with_name(output.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def _flags(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_json(path, what: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _lambda_grid(args, default: LambdaGrid) -> LambdaGrid:
    return LambdaGrid.parse(args.lambda_grid) if args.lambda_grid else default


# --- commands ----------------------------------------------------------------


def cmd_fit(args) -> int:
    _set_stage("read dataset")
    data = read_csv_dataset(args.dataset, normalize_time=args.normalize_time)
    _set_stage("fit")
    fit = fit_thinspline(data, lam=args.lam, grid=_lambda_grid(args, DEFAULT_GRID),
                         spec=TpsKernelSpec(args.m), threads=args.threads, cache_dir=args.cache)
    out = _out_dir(args)
    _set_stage("write output")
    path = out / "fit.json"
    save_fit(fit, path)
    write_manifest(path, "fit", [Path(args.dataset)], _flags(args), args.seed)
    fitted_path = out / "fitted.csv"
    lines = ["y,fitted"] + [f"{y:.17g},{f:.17g}" for y, f in zip(data.responses, fit.fitted)]
    fitted_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(fitted_path, "fit", [Path(args.dataset)], _flags(args), args.seed)
    how = "fixed" if fit.lambda_fixed else "selected by GCV"
    print(f"lambda: {fit.lam:.6g} ({how})")
    print(f"gcv: {fit.gcv_score:.6g}")
    print(f"edf: {fit.edf:.4f}")
    print(f"in-sample RMSPE: {rmspe(fit.fitted, data.responses):.6g}")
    print(f"wrote {path}")
    return 0


def _predict_any(model: dict, data, interp: bool) -> np.ndarray:
    kind = model.get("model", "thinspline")
    if kind == "thinspline":
        return predict_dataset(fit_from_dict(model), data, interp=interp)
    if kind in ("flr", "fpca"):
        fit = flr_from_dict(model) if kind == "flr" else fpca_from_dict(model)
        if data.grid != fit.grid:
            if not interp:
                raise InputError("dataset grid differs from the training grid (use --interp)")
            data = data.interpolate_to(fit.grid)
        return predict_flr(fit, data.values) if kind == "flr" else predict_fpca(fit, data.values)
    raise InputError(f"unknown model type {kind!r} in fit file")


def cmd_predict(args) -> int:
    _set_stage("read fit")
    model = _load_json(args.fit, "fit file")
    _set_stage("read dataset")
    data = read_csv_dataset(args.newdata, normalize_time=args.normalize_time)
    _set_stage("predict")
    preds = _predict_any(model, data, args.interp)
    _set_stage("write output")
    path = _out_dir(args) / "predictions.csv"
    lines = ["prediction"] + [f"{v:.17g}" for v in preds]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(path, "predict", [Path(args.fit), Path(args.newdata)], _flags(args), args.seed)
    print(f"wrote {len(preds)} predictions to {path}")
    return 0


def _scenario_list(cfg, seed_override):
    if not isinstance(cfg, dict):
        raise ConfigError("config: expected a JSON object")
    methods = cfg.get("methods", ["thinspline", "fpca"])
    if not isinstance(methods, list) or not all(isinstance(m, str) for m in methods):
        raise ConfigError("config.methods: expected a list of method names")
    for i, m in enumerate(methods):
        if m not in METHODS:
            raise ConfigError(f"config.methods[{i}]: unknown method {m!r}")
    if "scenarios" in cfg:
        raw = cfg["scenarios"]
        if not isinstance(raw, list) or not raw:
            raise ConfigError("config.scenarios: expected a non-empty list")
        base = {k: v for k, v in cfg.items() if k not in ("scenarios", "methods", "workers")}
        items = [({**base, **s} if isinstance(s, dict) else s, f"config.scenarios[{i}]")
                 for i, s in enumerate(raw)]
    else:
        items = [({k: v for k, v in cfg.items() if k not in ("methods", "workers")}, "config")]
    scenarios = []
    for d, path in items:
        if seed_override is not None and isinstance(d, dict):
            d = {**d, "seed": seed_override}
        scenarios.append(ExperimentConfig.from_dict(d, path))
    workers = cfg.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError("config.workers: expected a positive integer")
    return scenarios, methods, workers


def cmd_simulate(args) -> int:
    _set_stage("read config")
    cfg = _load_json(args.config, "config")
    scenarios, methods, workers = _scenario_list(cfg, args.seed)
    workers = max(workers, args.threads)
    _set_stage("simulate")
    results = []
    for sc in scenarios:
        res = run_experiment(sc, methods, workers=workers)
        for name, s in res.summaries.items():
            print(f"{sc.design} nu={sc.nu} sigma={sc.sigma} {name}: mean RMSPE {s.mean:.4f} (sd {s.sd:.4f})")
        results.append(res)
    _set_stage("write output")
    out = _out_dir(args)
    for name, writer in (("results.csv", write_results_csv), ("summary.csv", write_summary_csv)):
        writer(results, out / name)
        write_manifest(out / name, "simulate", [Path(args.config)], _flags(args), args.seed)
    print(f"wrote {out / 'results.csv'} and {out / 'summary.csv'}")
    return 0


_RATE_FIELDS = {"design", "n_list", "replications", "seed", "sigma", "nu", "n_test", "grid_size", "method"}


def cmd_rate(args) -> int:
    _set_stage("read config")
    cfg = _load_json(args.config, "config")
    if not isinstance(cfg, dict):
        raise ConfigError("config: expected a JSON object")
    for key in cfg:
        if key not in _RATE_FIELDS:
            raise ConfigError(f"config.{key}: unknown field")
    for key in ("design", "n_list", "replications"):
        if key not in cfg:
            raise ConfigError(f"config.{key}: required field missing")
    if not isinstance(cfg["n_list"], list) or not all(isinstance(n, int) and n > 2 for n in cfg["n_list"]):
        raise ConfigError("config.n_list: expected a list of integers > 2")
    kwargs = dict(cfg)
    if args.seed is not None:
        kwargs["seed"] = args.seed
    _set_stage("rate study")
    try:
        res = rate_study(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"config.{exc}") from None
    _set_stage("write output")
    path = _out_dir(args) / "rate.csv"
    write_rate_csv(res, path)
    write_manifest(path, "rate", [Path(args.config)], _flags(args), kwargs.get("seed", 0))
    for n, m, s in res.rows():
        print(f"n={n}: mean excess risk {m:.6g} (sd {s:.3g})")
    print(f"log-log slope: {res.slope:.4f}")
    return 0


def affine_residual(x_grid, surface: np.ndarray) -> float:
    """Largest deviation of ``surface`` from its per-``t`` least-squares line in ``x``."""
    x = np.asarray(x_grid, dtype=float)
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, surface.T, rcond=None)
    return float(np.abs(surface.T - A @ coef).max())


def cmd_surface(args) -> int:
    _set_stage("read fit")
    model = _load_json(args.fit, "fit file")
    if model.get("model", "thinspline") != "thinspline":
        raise InputError("surface export needs a thin-plate fit")
    fit = fit_from_dict(model)
    _set_stage("evaluate surface")
    t = np.linspace(0.0, 1.0, args.t_points)
    x = np.linspace(0.0, 1.0, args.x_points)
    F = eval_surface(fit, t, x)
    _set_stage("write output")
    path = _out_dir(args) / "surface.csv"
    write_surface_csv(path, t, x, F)
    write_manifest(path, "surface", [Path(args.fit)], _flags(args), args.seed)
    print(f"max nonlinearity residual: {affine_residual(x, F):.6g}")
    print(f"wrote {path}")
    return 0


def cmd_baseline(args) -> int:
    _set_stage("read dataset")
    data = read_csv_dataset(args.dataset, normalize_time=args.normalize_time)
    _set_stage(f"fit {args.method}")
    if args.method == "flr":
        fit = fit_flr_ss(data, lam=args.lam, grid=_lambda_grid(args, FLR_DEFAULT_GRID))
        doc, fitted = flr_to_dict(fit), predict_flr(fit, data.values)
        print(f"lambda: {fit.lam:.6g} ({'fixed' if args.lam else 'selected by GCV'})")
    else:
        seed = 0 if args.seed is None else args.seed
        fit = fit_fpca(data, k=args.k, seed=seed)
        doc, fitted = fpca_to_dict(fit), predict_fpca(fit, data.values)
        print(f"components: {fit.k}")
    print(f"in-sample RMSPE: {rmspe(fitted, data.responses):.6g}")
    inputs = [Path(args.dataset)]
    if args.test:
        _set_stage("predict test")
        test = read_csv_dataset(args.test, normalize_time=args.normalize_time)
        pred = _predict_any(doc, test, args.interp)
        print(f"test RMSPE: {rmspe(pred, test.responses):.6g}")
        inputs.append(Path(args.test))
    _set_stage("write output")
    path = _out_dir(args) / f"{args.method}.json"
    save_json(doc, path)
    write_manifest(path, f"baseline {args.method}", inputs, _flags(args), args.seed)
    print(f"wrote {path}")
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("-v", "--verbose", action="store_true")

    lam = argparse.ArgumentParser(add_help=False)
    lam.add_argument("--lambda", dest="lam", type=float, default=None, help="fix lambda (skips GCV)")
    lam.add_argument("--lambda-grid", default=None, metavar="LO:HI:COUNT", help="GCV search grid")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--normalize-time", action="store_true",
                      help="map the CSV time grid onto [0, 1]")
    data.add_argument("--interp", action="store_true",
                      help="interpolate curves onto the training grid when grids differ")

    parser = argparse.ArgumentParser(prog="funcadd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common, lam, data], help="fit the thin-plate predictor")
    p.add_argument("dataset")
    p.add_argument("--m", type=int, default=2, help="thin-plate order (only 2 is supported)")
    p.add_argument("--cache", default=None, help="directory for the Gram-matrix cache")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common, data], help="predict new curves")
    p.add_argument("fit")
    p.add_argument("newdata")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", parents=[common], help="run RMSPE simulations")
    p.add_argument("config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("rate", parents=[common], help="empirical excess-risk study")
    p.add_argument("config")
    p.set_defaults(func=cmd_rate)

    p = sub.add_parser("surface", parents=[common], help="export the fitted surface")
    p.add_argument("fit")
    p.add_argument("--t-points", type=int, default=50)
    p.add_argument("--x-points", type=int, default=50)
    p.set_defaults(func=cmd_surface)

    p = sub.add_parser("baseline", parents=[common, lam, data], help="fit a linear baseline")
    p.add_argument("method", choices=["flr", "fpca"])
    p.add_argument("dataset")
    p.add_argument("--k", type=int, default=None, help="FPCA components (default: 5-fold CV)")
    p.add_argument("--test", default=None, help="optional test CSV to score")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_stage("startup")
    try:
        return args.func(args)
    except (InputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error [{_Stage.current}]: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, ExperimentError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure [{_Stage.current}]: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
