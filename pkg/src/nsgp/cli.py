"""Batch front door: fit, predict, evaluate, sample priors, generate synthetic
benchmarks, and run the experiment suites.

All outputs are deterministic given (config, seed); volatile values (wall
time, package version) go to separate *_meta.json files. Exit codes:
0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench
from . import data as dt
from . import fields as fl
from . import kernels as kn
from . import pipeline as pl
from .exceptions import (
    ConfigError,
    DegenerateSplit,
    DivergedObjective,
    EmptyDataset,
    KTooLarge,
    NonFiniteGradient,
    NonPositiveTarget,
    NotPositiveDefinite,
    ParseError,
)
from .results import canonical_json, fit_to_json, load_fit, save_fit, trace_csv_lines

CONFIG_ERRORS = (
    ConfigError,
    ParseError,
    EmptyDataset,
    DegenerateSplit,
    NonPositiveTarget,
    KTooLarge,
    FileNotFoundError,
    json.JSONDecodeError,
    KeyError,
    ValueError,
)
NUMERICAL_ERRORS = (NotPositiveDefinite, DivergedObjective, NonFiniteGradient)


def _load_config(path):
    if path is None:
        raise ConfigError("--config is required")
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _resolve_seed(args, config):
    if args.seed is not None:
        return int(args.seed)
    if "seed" in config:
        return int(config["seed"])
    raise ConfigError("seed: required (config key 'seed' or --seed)")


def _out_dir(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _float_csv(value):
    return repr(float(value))


def cmd_fit(args):
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    out = _out_dir(args)
    fit = pl.run_fit(config, seed)
    save_fit(fit, out / "fit.json")
    _write(out / "trace.csv", "".join(trace_csv_lines(fit.trace)))
    _write(out / "fit_meta.json", canonical_json(fit.meta()))
    print(f"wrote {out / 'fit.json'} ({len(fit.trace.objective_per_iter)} iterations)")
    return 0


def _load_predict_data(args, config):
    data_cfg = dict(config.get("data", {}))
    if args.data:
        data_cfg["path"] = args.data
    if "path" not in data_cfg and "synthetic" not in data_cfg:
        raise ConfigError("predict/evaluate need a data path (--data or config data.path)")
    try:
        return pl.load_dataset(data_cfg, config.get("seed", 0))
    except EmptyDataset:
        return None


def cmd_predict(args):
    config = _load_config(args.config) if args.config else {}
    fit = load_fit(args.fit)
    out = _out_dir(args)
    quantiles = tuple(config.get("prediction", {}).get("quantiles", pl.DEFAULT_QUANTILES))
    dataset = _load_predict_data(args, config)
    cols = list(dt.COLUMNS[:3])
    header = cols + ["mean", "variance"] + [f"q{q:g}" for q in quantiles]
    lines = [",".join(header) + "\n"]
    if dataset is not None:
        pred = pl.predict(fit, dataset, quantiles=quantiles)
        for i in range(len(dataset)):
            row = [_float_csv(getattr(dataset, c)[i]) for c in cols]
            row.append(_float_csv(pred["mean"][i]))
            row.append(_float_csv(pred["variance"][i]))
            row.extend(_float_csv(pred[f"q{q:g}"][i]) for q in quantiles)
            lines.append(",".join(row) + "\n")
    _write(out / "predictions.csv", "".join(lines))
    print(f"wrote {out / 'predictions.csv'} ({len(lines) - 1} rows)")
    return 0


def cmd_evaluate(args):
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    out = _out_dir(args)
    fit = load_fit(args.fit)
    dataset = _load_predict_data(args, config)
    if dataset is None:
        raise EmptyDataset("no rows to evaluate")
    regimes_cfg = config.get("regimes")
    if regimes_cfg:
        _, _, row_labels = dt.kmeans_regimes(
            dataset, int(regimes_cfg["k"]), regimes_cfg.get("seed", pl.derive_seed(seed, "regimes"))
        )
        dataset.regime_labels = row_labels
    if "split" in config:
        dataset = pl.apply_split(dataset, config["split"], seed)
        target = dataset.test()
    else:
        target = dataset
    metrics = pl.evaluate(fit, target, regimes=regimes_cfg)
    payload = {
        "metrics": metrics,
        "split": config.get("split"),
        "seed": seed,
        "fingerprint": target.fingerprint(),
    }
    _write(out / "metrics.json", canonical_json(payload))
    print(f"wrote {out / 'metrics.json'} (rmse {metrics['rmse']:.4f}, nlpd {metrics['nlpd']:.4f})")
    return 0


def cmd_sample_prior(args):
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    out = _out_dir(args)
    grid_cfg = config.get("grid", {})
    num = int(grid_cfg.get("num", 200))
    x = np.linspace(float(grid_cfg.get("start", 0.0)), float(grid_cfg.get("stop", 1.0)), num)
    x = x[:, None]
    spec = kn.spec_from_json(config["kernel"]) if "kernel" in config else kn.se_ard(1.0, [0.2], (0,))
    count = int(config.get("count", 5))
    draws = fl.sample_prior_functions(
        spec, x, count, seed,
        field_prior_lengthscale=float(config.get("field_prior_lengthscale", 1.0)),
    )
    refs = sorted(draws.fields)
    header = ["input", "draw", "f"]
    for ref in refs:
        width = draws.fields[ref].shape[2] if draws.fields[ref].size else 1
        header.extend(f"latent_{ref}_{d}" for d in range(width))
    lines = [",".join(header) + "\n"]
    for j in range(count):
        for i in range(num):
            row = [_float_csv(x[i, 0]), str(j), _float_csv(draws.functions[j, i])]
            for ref in refs:
                row.extend(_float_csv(v) for v in draws.fields[ref][j, i])
            lines.append(",".join(row) + "\n")
    _write(out / "prior_draws.csv", "".join(lines))
    print(f"wrote {out / 'prior_draws.csv'} ({count} draws)")
    return 0


def cmd_synth(args):
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    out = _out_dir(args)
    syn_cfg = config.get("synthetic", {})
    result = dt.synth_nonstationary(
        n_points=int(syn_cfg.get("n_points", 200)),
        profile=syn_cfg.get("profile", "piecewise"),
        noise=float(syn_cfg.get("noise", 0.1)),
        seed=syn_cfg.get("seed", seed),
    )
    ds = result.dataset
    lines = ["time,lat,lon,value\n"]
    for i in range(len(ds)):
        lines.append(
            ",".join(_float_csv(v) for v in (ds.time[i], ds.lat[i], ds.lon[i], ds.value[i])) + "\n"
        )
    _write(out / "synthetic.csv", "".join(lines))
    truth = ["lon,true_log_lengthscale,latent_function\n"]
    for i in range(len(ds)):
        truth.append(
            ",".join(
                _float_csv(v)
                for v in (ds.lon[i], result.true_log_lengthscale[i], result.latent_function[i])
            )
            + "\n"
        )
    _write(out / "synthetic_truth.csv", "".join(truth))
    print(f"wrote {out / 'synthetic.csv'} ({len(ds)} rows)")
    return 0


def cmd_bench(args):
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    out = _out_dir(args)
    table = bench.run_suite(args.suite, config, seed, threads=args.threads)
    _write(out / f"bench_{args.suite}.json", canonical_json(table))
    print(f"wrote {out / f'bench_{args.suite}.json'}")
    for name, metrics in sorted(table["models"].items()):
        rm, nl = metrics["rmse"], metrics["nlpd"]
        print(
            f"  {name}: rmse {rm['mean']:.4f} +/- {rm['stderr']:.4f}, "
            f"nlpd {nl['mean']:.4f} +/- {nl['stderr']:.4f}"
        )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nsgp",
        description="Non-stationary GP regression: fit, predict, evaluate, sample priors, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fit_arg=False, data_arg=False, suite_arg=False):
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (default: current)")
        p.add_argument("--threads", type=int, default=1, help="parallel workers where supported")
        if fit_arg:
            p.add_argument("--fit", required=True, help="fit.json produced by the fit command")
        if data_arg:
            p.add_argument("--data", help="CSV path (overrides config data.path)")
        if suite_arg:
            p.add_argument("--suite", required=True, choices=bench.SUITES)

    common(sub.add_parser("fit", help="fit a model and write fit.json + trace.csv"))
    common(sub.add_parser("predict", help="predict at CSV rows"), fit_arg=True, data_arg=True)
    common(sub.add_parser("evaluate", help="score a fit on held-out rows"), fit_arg=True, data_arg=True)
    common(sub.add_parser("sample-prior", help="draw from the prior predictive"))
    common(sub.add_parser("synth", help="generate the synthetic non-stationary benchmark"))
    common(sub.add_parser("bench", help="run a comparison suite"), suite_arg=True)
    return parser


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sample-prior": cmd_sample_prior,
    "synth": cmd_synth,
    "bench": cmd_bench,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure during {args.command}: {exc}", file=sys.stderr)
        return 3
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
