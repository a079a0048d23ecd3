"""Command-line interface: ``ffvdfr {fit,cv,simulate,export-surface}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from ffvdfr import simstudy
from ffvdfr.dataio import (
    InputError,
    dump_json,
    load_dataset,
    load_fit,
    save_fit,
    write_csv,
)
from ffvdfr.presmooth import MIN_OBSERVATIONS, smooth_all
from ffvdfr.quadrature import assemble_psi
from ffvdfr.simstudy import ScenarioConfig, fold_assignment, rmse_fold
from ffvdfr.vdfr import FAMILIES, FitError, beta_surface, fit_design, make_tensor, predict_design

log = logging.getLogger("ffvdfr")

EXIT_INPUT, EXIT_FIT = 2, 3
DEFAULT_GRID_SIZE = 100
CONFIG_KEYS = {f.name: f.type for f in fields(ScenarioConfig)} | {"jobs": "int"}
NAMED_GRIDS = {
    "all": {},
    "acceptance": None,  # the two table scenarios checked by the acceptance suite
    "poisson": {"family": ["poisson"]},
    "gaussian": {"family": ["gaussian"]},
    "negbin": {"domain_law": ["negbin"]},
    "uniform": {"domain_law": ["uniform"]},
}


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------


def parse_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}", file=str(path)) from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}: line {lineno} is not 'key = value'", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise InputError(f"{path}: unknown config key {key!r} at line {lineno}; accepted "
                             f"keys: {sorted(CONFIG_KEYS)}", key=key, accepted=sorted(CONFIG_KEYS))
        out[key] = value
    return out


def _coerce(key, value):
    kind = CONFIG_KEYS[key]
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise InputError(f"config key {key!r} expects a {kind}, got {value!r}", key=key) from None
    return value


def config_from_mapping(raw: dict) -> tuple[ScenarioConfig, int]:
    values = {k: _coerce(k, v) for k, v in raw.items()}
    jobs = values.pop("jobs", 1)
    try:
        return ScenarioConfig(**values), int(jobs)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def parse_grid(text: str | None, base: ScenarioConfig) -> list[ScenarioConfig]:
    """Scenario subset: a name from ``NAMED_GRIDS`` or ``key=v1,v2;key=v``."""
    if text is None:
        return [base]
    shared = {k: getattr(base, k) for k in ("replicates", "seed", "p", "q", "r", "folds")}
    if text == "acceptance":
        return [
            ScenarioConfig(n=100, family="poisson", domain_law="negbin", sigma_x=0.0, beta=1,
                           **shared),
            ScenarioConfig(n=200, family="poisson", domain_law="negbin", sigma_x=1.0, beta=3,
                           **shared),
        ]
    if text in NAMED_GRIDS:
        filters = NAMED_GRIDS[text]
    else:
        filters = {}
        for part in filter(None, (p.strip() for p in text.split(";"))):
            if "=" not in part:
                raise InputError(f"grid {text!r}: expected a name from {sorted(NAMED_GRIDS)} "
                                 "or 'key=v1,v2;key=v'")
            key, vals = (s.strip() for s in part.split("=", 1))
            if key not in ("n", "family", "domain_law", "sigma_x", "beta"):
                raise InputError(f"grid key {key!r} not accepted; use n, family, domain_law, "
                                 "sigma_x or beta", key=key)
            filters[key] = [_coerce(key, v.strip()) for v in vals.split(",")]
    try:
        grid = simstudy.scenario_grid(**filters)
    except (KeyError, ValueError) as exc:
        raise InputError(f"grid {text!r}: {exc}") from exc
    return [ScenarioConfig(**{**asdict(c), **shared}) for c in grid]


def parse_axis(text: str, name: str) -> np.ndarray:
    """``lo:hi:n`` (inclusive linspace) or a comma-separated list."""
    try:
        if ":" in text:
            lo, hi, n = text.split(":")
            return np.linspace(float(lo), float(hi), int(n))
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise InputError(f"--{name}: expected 'lo:hi:n' or 'v1,v2,...', got {text!r}") from None


def default_axes(tensor, size: int = DEFAULT_GRID_SIZE):
    hi_t = tensor.marginal_t.hi
    t_grid = np.linspace(0.0, hi_t, size)
    mT = tensor.marginal_T
    T_grid = np.array([hi_t]) if mT is None else np.linspace(mT.lo, mT.hi, size)
    return t_grid, T_grid


def surface_rows(t_grid, T_grid, surf):
    for j, T in enumerate(T_grid):
        for i, t in enumerate(t_grid):
            if np.isfinite(surf[j, i]):
                yield (float(t), float(T), float(surf[j, i]))


def surface_extrema(t_grid, T_grid, surf) -> dict:
    j_min, i_min = np.unravel_index(np.nanargmin(surf), surf.shape)
    j_max, i_max = np.unravel_index(np.nanargmax(surf), surf.shape)
    return {
        "min": float(surf[j_min, i_min]), "argmin": [float(t_grid[i_min]), float(T_grid[j_min])],
        "max": float(surf[j_max, i_max]), "argmax": [float(t_grid[i_max]), float(T_grid[j_max])],
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _prepare(args):
    data = load_dataset(args.curves, args.subjects, impute=args.impute,
                        min_observations=args.min_obs)
    if args.family == "poisson" and np.any((data.y < 0) | (data.y != np.round(data.y))):
        raise InputError("poisson family needs nonnegative integer y values")
    curves = smooth_all(data, p=args.p)
    r = 1 if np.ptp(curves.domains) == 0 else args.r
    tensor = make_tensor(curves.domains, args.q, r)
    a_psi = assemble_psi(curves, tensor, keep_blocks=False).a_psi
    return data, tensor, a_psi


def cmd_fit(args) -> dict:
    data, tensor, a_psi = _prepare(args)
    fit = fit_design(a_psi, data.y, tensor, args.family, data.covariates,
                     covariate_names=data.covariate_names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t_grid, T_grid = default_axes(tensor, args.grid_size)
    surf = beta_surface(fit, t_grid, T_grid)
    grid_meta = {"t": [float(t_grid[0]), float(t_grid[-1]), int(t_grid.size)],
                 "T": [float(T_grid[0]), float(T_grid[-1]), int(T_grid.size)]}
    save_fit(fit, out / "fit.json", meta={"n": len(data), "p": args.p, "grid": grid_meta})
    write_csv(out / "surface.csv", ("t", "T", "beta"), surface_rows(t_grid, T_grid, surf))
    summary = {
        "command": "fit",
        "n": len(data),
        "family": args.family,
        "p": args.p, "q": tensor.q, "r": tensor.r,
        "aic": fit.aic,
        "deviance": fit.deviance,
        "effective_dimension": fit.ed,
        "tau2_t": fit.tau2_t,
        "tau2_T": fit.tau2_T,
        "phi": fit.phi,
        "alpha": fit.alpha,
        "gamma": dict(zip(fit.covariate_names, fit.gamma.tolist())),
        "convergence": {"iterations": fit.iterations, "rel_change": fit.rel_change,
                        "converged": fit.converged},
        "grid": grid_meta,
        "surface": surface_extrema(t_grid, T_grid, surf),
        "outputs": ["fit.json", "surface.csv", "summary.json"],
    }
    if not args.no_plot:
        from ffvdfr.plotting import surface_heatmap

        surface_heatmap(t_grid, T_grid, surf, out / "surface.png")
        summary["outputs"].append("surface.png")
    dump_json(summary, out / "summary.json")
    return summary


def cmd_cv(args) -> dict:
    data, tensor, a_psi = _prepare(args)
    if len(data) < args.folds:
        raise InputError(f"{args.folds}-fold CV needs at least {args.folds} subjects, "
                         f"got {len(data)}", n=len(data), folds=args.folds)
    labels = fold_assignment(len(data), args.folds, np.random.default_rng(args.seed))
    cov = data.covariates
    rows = []
    for j in range(args.folds):
        test, train = np.flatnonzero(labels == j), np.flatnonzero(labels != j)
        fit = fit_design(a_psi[train], data.y[train], tensor, args.family,
                         None if cov is None else cov[train])
        pred = predict_design(fit, a_psi[test], None if cov is None else cov[test])
        rows.append((j + 1, int(test.size), rmse_fold(data.y[test], pred)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "folds.csv", ("fold", "n_test", "rmse"), rows)
    write_csv(out / "assignment.csv", ("subject_id", "fold"),
              ((sid, int(f) + 1) for sid, f in zip(data.ids, labels)))
    summary = {
        "command": "cv",
        "n": len(data),
        "family": args.family,
        "folds": args.folds,
        "seed": args.seed,
        "mean_rmse": float(np.mean([r[2] for r in rows])),
        "rmse": [r[2] for r in rows],
        "outputs": ["folds.csv", "assignment.csv", "summary.json"],
    }
    dump_json(summary, out / "summary.json")
    return summary


REPLICATE_COLUMNS = ("scenario", "replicate", "seed", "rmse_ffvdfr", "rmse_sof", "amse_ffvdfr",
                     "T_max", "n_clamped", "converged", "excluded", "error")


def cmd_simulate(args) -> dict:
    raw = parse_config(args.config)
    for key in ("seed", "folds", "p", "q", "r", "family"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = str(val)
    base, jobs = config_from_mapping(raw)
    if args.jobs is not None:
        jobs = args.jobs
    configs = parse_grid(args.grid, base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, summaries, timings = [], [], []
    for cfg in configs:
        log.info("running %s (%d replicates)", cfg.scenario_id, cfg.replicates)
        res = simstudy.run_scenario(cfg, jobs=jobs)
        summaries.append(res.summary())
        timings.append(res.timings())
        for r in res.replicates:
            rows.append((cfg.scenario_id, r.replicate, r.seed, r.rmse_ffvdfr, r.rmse_sof,
                         r.amse_ffvdfr, r.T_max, r.n_clamped, str(r.converged).lower(),
                         str(r.excluded).lower(), r.error))
    write_csv(out / "replicates.csv", REPLICATE_COLUMNS, rows)
    summary = {"command": "simulate", "scenarios": summaries,
               "outputs": ["replicates.csv", "summary.json"]}
    if args.timings:
        # wall-clock numbers are opt-in and kept apart; everything else is byte-stable
        dump_json({"scenarios": timings}, out / "timings.json")
        summary["outputs"].append("timings.json")
    if not args.no_plot:
        from ffvdfr.plotting import scenario_boxplots

        by = {}
        for row in rows:
            d = by.setdefault(row[0], {"ffvdfr": [], "sof": [], "amse": []})
            d["ffvdfr"].append(row[3])
            d["sof"].append(row[4])
            d["amse"].append(row[5])
        scenario_boxplots({s: {"ffvdfr": d["ffvdfr"], "sof": d["sof"]} for s, d in by.items()},
                          out / "rmse.png", "rmse")
        scenario_boxplots({s: {"ffvdfr": d["amse"]} for s, d in by.items()},
                          out / "amse.png", "amse")
        summary["outputs"] += ["rmse.png", "amse.png"]
    dump_json(summary, out / "summary.json")
    return summary


def cmd_export_surface(args) -> dict:
    archive = load_fit(args.archive)
    fit = archive.fit
    t_def, T_def = default_axes(fit.tensor)
    grid = archive.meta.get("grid")
    if grid:
        t_def = np.linspace(*grid["t"][:2], int(grid["t"][2]))
        T_def = np.linspace(*grid["T"][:2], int(grid["T"][2]))
    t_grid = parse_axis(args.t_grid, "t-grid") if args.t_grid else t_def
    T_grid = parse_axis(args.T_grid, "T-grid") if args.T_grid else T_def
    mt, mT = fit.tensor.marginal_t, fit.tensor.marginal_T
    if not np.all(mt.contains(t_grid)):
        raise InputError(f"--t-grid leaves the fitted t range [{mt.lo}, {mt.hi}]")
    if mT is not None and not np.all(mT.contains(T_grid)):
        raise InputError(f"--T-grid leaves the fitted T range [{mT.lo}, {mT.hi}]")
    surf = beta_surface(fit, t_grid, T_grid)
    rows = list(surface_rows(t_grid, T_grid, surf))
    write_csv(args.out, ("t", "T", "beta"), rows)
    summary = {"command": "export-surface", "rows": len(rows), "output": str(args.out)}
    if rows:
        summary["surface"] = surface_extrema(t_grid, T_grid, surf)
    if args.plot:
        from ffvdfr.plotting import surface_heatmap

        surface_heatmap(t_grid, T_grid, surf, args.plot)
    return summary


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true",
                        help="print a JSON summary (or error) on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--curves", required=True, help="CSV with columns subject_id,t,x")
    model.add_argument("--subjects", required=True, help="CSV with columns subject_id,y,...")
    model.add_argument("--family", choices=FAMILIES, default="gaussian")
    model.add_argument("--p", type=int, default=25, help="curve basis dimension")
    model.add_argument("--q", type=int, default=25, help="t-marginal dimension")
    model.add_argument("--r", type=int, default=25, help="T-marginal dimension")
    model.add_argument("--impute", action="store_true",
                       help="interpolate missing x values instead of rejecting them")
    model.add_argument("--min-obs", type=int, default=MIN_OBSERVATIONS)
    model.add_argument("--out", required=True, help="output directory")

    parser = argparse.ArgumentParser(prog="ffvdfr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common, model], help="fit a model")
    p.add_argument("--grid-size", type=int, default=DEFAULT_GRID_SIZE,
                   help="points per axis of the exported surface grid")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", parents=[common, model], help="K-fold cross-validated RMSE")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("simulate", parents=[common], help="run simulation scenarios")
    p.add_argument("config", help="key = value scenario file")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", help=f"scenario subset: {sorted(NAMED_GRIDS)} or 'key=v1,v2;...'")
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--timings", action="store_true",
                   help="also write wall-clock timings to timings.json")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("export-surface", parents=[common], help="grid CSV from a fit archive")
    p.add_argument("archive")
    p.add_argument("--t-grid", help="'lo:hi:n' or comma list")
    p.add_argument("--T-grid", dest="T_grid", help="'lo:hi:n' or comma list")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--plot", help="optional PNG path for a heat map")
    p.set_defaults(func=cmd_export_surface)
    return parser


def _fail(args, code, exc, extra=None):
    payload = {"error": {"type": type(exc).__name__, "message": str(exc), **(extra or {})}}
    if getattr(args, "json", False):
        sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    else:
        sys.stderr.write(f"ffvdfr {args.command}: error: {exc}\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except InputError as exc:
        return _fail(args, EXIT_INPUT, exc, exc.details)
    except FitError as exc:
        return _fail(args, EXIT_FIT, exc, {"iterations": len(exc.trace)})
    except ValueError as exc:
        return _fail(args, EXIT_INPUT, exc)
    if args.json:
        sys.stdout.write(dump_json(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
