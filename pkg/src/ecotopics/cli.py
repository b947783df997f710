"""Command-line interface: ``ecotopics <subcommand> ...``."""

import argparse
import json
import logging
import os
import sys

import numpy as np
import pandas as pd

from . import io
from .community import Hyperparameters, active_communities, train
from .corpus import date_years, iso_dates
from .evaluation import (
    METHODS,
    SweepConfig,
    compare_methods,
    derive_seed,
    hyperparameter_sweep,
    thread_count,
)
from .preprocessing import FeatureConfig, build_feature_table, ingest_counts_csv, transform_readings
from .regression import DEFAULT_LAMBDA_GRID, RidgeRegressor, predict_taxa, project_to_simplex

logger = logging.getLogger("ecotopics")


class CLIError(Exception):
    pass


def _json_arg(value, what):
    """Inline JSON, or a path to a JSON file."""
    if value is None:
        return None
    if os.path.exists(value):
        return io.read_json(value)
    try:
        return json.loads(value)
    except json.JSONDecodeError as exc:
        raise CLIError(f"{what}: not a JSON document or existing file: {value!r}") from exc


def _require(args, *names):
    for name in names:
        path = getattr(args, name)
        if path is None:
            raise CLIError(f"--{name} is required")
        if not os.path.isfile(path):
            raise CLIError(f"--{name}: no such file {path!r}")


def _load_inputs(args, need_env):
    _require(args, "counts")
    if need_env:
        _require(args, "env")
    if args.features is not None:
        _require(args, "features")
    corpus = ingest_counts_csv(args.counts)
    env = None
    if need_env:
        config = FeatureConfig.from_json(args.features) if args.features else FeatureConfig()
        env = build_feature_table(args.env, config)
    return corpus, env


def _hyper(args):
    return Hyperparameters(
        alpha=args.alpha, beta=args.beta, gamma=args.gamma, g_radius=args.g,
        max_communities=args.max_communities, n_sweeps=args.sweeps,
        seed=derive_seed(args.seed, "train"),
    )


def _lambda_grid(args):
    grid = _json_arg(args.lambda_grid, "--lambda-grid")
    if grid is None:
        return list(DEFAULT_LAMBDA_GRID)
    if not isinstance(grid, list) or not grid:
        raise CLIError("--lambda-grid must be a non-empty JSON list")
    return [float(g) for g in grid]


def _out(args, *parts):
    if args.out is None:
        raise CLIError("--out is required")
    return os.path.join(args.out, *parts)


def _theta_frame(dates, theta, prefix="community"):
    frame = pd.DataFrame(theta, columns=[f"{prefix}_{k}" for k in range(theta.shape[1])])
    frame.insert(0, "date", iso_dates(dates))
    return frame


def _taxa_frame(dates, dist, names):
    frame = pd.DataFrame(dist, columns=list(names))
    frame.insert(0, "date", iso_dates(dates))
    return frame


def _weights_frame(reg, feature_names):
    frame = pd.DataFrame(reg.coef_, columns=[f"community_{k}" for k in range(reg.coef_.shape[1])])
    frame.insert(0, "feature", list(feature_names))
    intercept = pd.DataFrame([["(intercept)", *reg.intercept_.tolist()]], columns=frame.columns)
    return pd.concat([frame, intercept], ignore_index=True)


def _day_of_year_profile(dates, theta):
    doy = (dates - dates.astype("datetime64[Y]").astype("datetime64[D]")).astype(int)
    frame = pd.DataFrame(theta, columns=[f"community_{k}" for k in range(theta.shape[1])])
    frame.insert(0, "day_of_year", doy)
    return frame.groupby("day_of_year", as_index=False).mean()


def _full_regressor(cmp_, env, lambda_grid):
    data = cmp_.data
    return RidgeRegressor(
        lambda_grid=lambda_grid,
        feature_names=list(env.feature_names),
        standardization=list(env.standardization),
    ).fit(data.X[data.train_mask], cmp_.theta[data.train_mask])


def cmd_ingest(args):
    corpus, env = _load_inputs(args, need_env=args.env is not None)
    outputs = {"corpus.csv": _taxa_frame(corpus.dates, corpus.counts, corpus.taxon_names)}
    if env is not None:
        frame = pd.DataFrame(env.features, columns=env.feature_names)
        frame.insert(0, "date", iso_dates(env.dates))
        outputs["features.csv"] = frame
        mask = pd.DataFrame(env.missing_mask.astype(int), columns=env.feature_names)
        mask.insert(0, "date", iso_dates(env.dates))
        outputs["features_mask.csv"] = mask
    for name, frame in outputs.items():
        io.write_csv(_out(args, name), frame)
    if env is not None:
        io.write_json(_out(args, "standardization.json"), {
            "format_version": io.FORMAT_VERSION, "features": env.params_dict()})
    print(f"{corpus.n_days} days, {corpus.n_taxa} taxa, {corpus.n_observations} observations")
    if env is not None:
        print(f"{len(env.dates)} environment days, {env.n_features} features")


def cmd_train(args):
    corpus, _ = _load_inputs(args, need_env=False)
    hyper = _hyper(args)
    model = train(corpus, hyper)
    diag = pd.DataFrame({
        "sweep": np.arange(1, hyper.n_sweeps + 1),
        "log_likelihood": model.loglik_trace,
        "k_active": model.k_active_trace,
    })
    io.save_model(_out(args, "model.json"), model)
    io.write_csv(_out(args, "diagnostics.csv"), diag)
    print(f"trained {model.n_communities} communities "
          f"({active_communities(model)} active); final log-likelihood {model.loglik_trace[-1]:.6g}")


def _sweep_config(args):
    grid = _json_arg(args.grid, "--grid") or {}
    if not isinstance(grid, dict):
        raise CLIError("--grid must be a JSON object")
    unknown = set(grid) - {"alpha", "beta", "gamma", "g_radius", "g"}
    if unknown:
        raise CLIError(f"--grid has unknown keys {sorted(unknown)}")
    return SweepConfig(
        alpha=grid.get("alpha", [args.alpha]),
        beta=grid.get("beta", [args.beta]),
        gamma=grid.get("gamma", [args.gamma]),
        g_radius=grid.get("g_radius", grid.get("g", [args.g])),
        n_sweeps=args.sweeps,
        max_communities=args.max_communities,
        seed=args.seed,
        lambda_grid=_lambda_grid(args),
    )


def _write_fold_regressors(args, cmp_, env, subdir="regressors"):
    for fold, reg in zip(cmp_.data.folds, cmp_.regressors):
        reg.feature_names = list(env.feature_names)
        reg.standardization = list(env.standardization)
        io.save_regressor(_out(args, subdir, f"fold_{fold.year}.json"), reg)


def cmd_sweep(args):
    corpus, env = _load_inputs(args, need_env=True)
    sweep = _sweep_config(args)
    result = hyperparameter_sweep(corpus, env, sweep, n_jobs=args.threads,
                                  cache_dir=_out(args, ".sweep-cache"))
    board = result.leaderboard_frame()
    io.write_csv(_out(args, "leaderboard.csv"), board)
    io.write_json(_out(args, "leaderboard.json"),
                  json.loads(board.to_json(orient="records", double_precision=15)))
    io.save_model(_out(args, "best_model.json"), result.best_model)
    _write_fold_regressors(args, result.best_comparison, env)
    best = result.best_entry
    print(f"{len(board)} grid points; best mean KL {best.mean_kl:.6g} at "
          f"alpha={best.hyper.alpha} beta={best.hyper.beta} gamma={best.hyper.gamma} "
          f"g={best.hyper.g_radius}")


def cmd_evaluate(args):
    corpus, env = _load_inputs(args, need_env=True)
    if args.model is not None:
        _require(args, "model")
        model = io.load_model(args.model)
        if model.theta.shape[0] != corpus.n_days or np.any(model.dates != corpus.dates):
            raise CLIError("--model was trained on different days than --counts")
    else:
        model = train(corpus, _hyper(args))
    lambda_grid = _lambda_grid(args)
    cmp_ = compare_methods(corpus, env, model, lambda_grid)
    data = cmp_.data

    kl = pd.DataFrame({"date": iso_dates(data.dates), "year": date_years(data.dates)})
    for m in METHODS:
        kl[m] = cmp_.reports[m].kl
    rows = []
    for m in METHODS:
        for year, stats in cmp_.reports[m].per_year.items():
            rows.append({"method": m, "year": year, **stats})
    box = pd.DataFrame(rows)
    report = {
        "format_version": io.FORMAT_VERSION,
        "n_days": int(len(data.dates)),
        "pca_components": int(cmp_.n_components),
        "methods": {m: cmp_.reports[m].to_dict() for m in METHODS},
    }
    full_reg = _full_regressor(cmp_, env, lambda_grid)

    if args.model is None:
        io.save_model(_out(args, "model.json"), model)
    io.write_csv(_out(args, "kl_per_day.csv"), kl)
    io.write_csv(_out(args, "boxplot_stats.csv"), box)
    io.write_json(_out(args, "report.json"), report)
    io.write_csv(_out(args, "taxa_observed.csv"),
                 _taxa_frame(data.dates, data.Y, corpus.taxon_names))
    for m in METHODS:
        io.write_csv(_out(args, f"taxa_predicted_{m}.csv"),
                     _taxa_frame(data.dates, cmp_.predictions[m], corpus.taxon_names))
    io.write_csv(_out(args, "theta.csv"), _theta_frame(model.dates, model.theta))
    io.write_csv(_out(args, "theta_predicted.csv"), _theta_frame(data.dates, cmp_.theta_hat))
    _write_fold_regressors(args, cmp_, env)
    io.save_regressor(_out(args, "regressor.json"), full_reg)
    io.write_csv(_out(args, "regressor_weights.csv"), _weights_frame(full_reg, env.feature_names))
    for m in METHODS:
        r = cmp_.reports[m]
        print(f"{m:>9}: mean KL {r.overall_mean:.6g}, median KL {r.overall_median:.6g}")


def cmd_predict(args):
    for name in ("model", "regressor"):
        _require(args, name)
    model = io.load_model(args.model)
    reg = io.load_regressor(args.regressor)
    readings = _json_arg(args.readings, "--readings")
    if not isinstance(readings, dict):
        raise CLIError("--readings must be a JSON object of raw feature values")
    if reg.standardization is None:
        raise CLIError("regressor has no stored standardization parameters")
    try:
        x = transform_readings(reg.standardization, readings)
    except KeyError as exc:
        raise CLIError(exc.args[0]) from exc
    theta_hat = project_to_simplex(reg.predict(x[None, :]))[0]
    taxa = predict_taxa(reg, model, x[None, :])[0]
    out = {
        "theta_hat": theta_hat.tolist(),
        "taxa": dict(zip(model.taxon_names, taxa.tolist())),
    }
    text = json.dumps(out, indent=1)
    if args.out is not None:
        io.write_json(_out(args, "prediction.json"), out)
    print(text)


def cmd_export(args):
    _require(args, "model")
    model = io.load_model(args.model)
    reg = None
    if args.regressor is not None:
        _require(args, "regressor")
        reg = io.load_regressor(args.regressor)
    phi = pd.DataFrame(model.phi, columns=model.taxon_names)
    phi.insert(0, "community", np.arange(model.n_communities))
    io.write_csv(_out(args, "theta.csv"), _theta_frame(model.dates, model.theta))
    io.write_csv(_out(args, "phi.csv"), phi)
    io.write_csv(_out(args, "theta_day_of_year.csv"),
                 _day_of_year_profile(model.dates, model.theta))
    io.write_csv(_out(args, "taxa_fitted.csv"),
                 _taxa_frame(model.dates, model.taxon_distribution(), model.taxon_names))
    if reg is not None:
        names = reg.feature_names or [f"x{j}" for j in range(reg.coef_.shape[0])]
        io.write_csv(_out(args, "regressor_weights.csv"), _weights_frame(reg, names))
    print(f"exported {model.n_communities} communities over {len(model.dates)} days")


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "export": cmd_export,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ecotopics", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--counts")
        p.add_argument("--env")
        p.add_argument("--features")
        p.add_argument("--out")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--alpha", type=float, default=0.1)
        p.add_argument("--beta", type=float, default=0.05)
        p.add_argument("--gamma", type=float, default=1e-4)
        p.add_argument("--g", type=int, default=3, help="temporal smoothing radius in days")
        p.add_argument("--max-communities", type=int, default=20)
        p.add_argument("--sweeps", type=int, default=200)
        p.add_argument("--grid", help="JSON object (or file) of hyperparameter lists")
        p.add_argument("--lambda-grid", help="JSON list (or file) of ridge strengths")
        p.add_argument("--model")
        p.add_argument("--regressor")
        p.add_argument("--readings", help="JSON object (or file) of raw readings")
        p.add_argument("--threads", type=int, default=None,
                       help="parallel sweep workers (default: $ECOTOPICS_THREADS or 1)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        args.threads = thread_count(args.threads)
    try:
        COMMANDS[args.command](args)
    except (CLIError, ValueError, KeyError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
