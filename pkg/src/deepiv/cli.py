"""Command-line entry point.

Exit codes: 0 success, 1 usage or input error, 2 compute error. Logging goes
to stderr; artifacts are written only to the paths given with ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .archive import load_model, save_model
from .config import RunConfig, config_from_dict, sweep_settings
from .core import child_rng
from .data import Dataset, format_float, load_dataset, save_dataset
from .errors import ConfigError, DeepIVError, SchemaError
from .outcome import OutcomeModel, oos_causal_loss, train_second_stage
from .simulation import SimConfig, run_sweep, simulate
from .treatment import TreatmentModel, oos_deviance, relevance_diagnostic, train_first_stage

log = logging.getLogger("deepiv")

EXIT_OK, EXIT_USAGE, EXIT_COMPUTE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed_default() -> int | None:
    raw = os.environ.get("DEEPIV_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"DEEPIV_SEED must be an integer, got {raw!r}") from None


def _load_config(args) -> RunConfig:
    """Config file (if any) with the master seed resolved as --seed, file, DEEPIV_SEED, 0."""
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(str(path), "file not found")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"malformed JSON: {exc}") from exc
    cfg = config_from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    elif not (isinstance(doc, dict) and "seed" in doc):
        env = _seed_default()
        cfg.seed = 0 if env is None else env
    if cfg.seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    return cfg


def _load_data(path: str) -> Dataset:
    if not Path(path).exists():
        raise UsageError(f"data file not found: {path}")
    return load_dataset(path)


def _load(path: str, kind: type):
    if not Path(path).exists():
        raise UsageError(f"model file not found: {path}")
    model = load_model(path)
    if not isinstance(model, kind):
        raise UsageError(f"{path} is not a {'treatment' if kind is TreatmentModel else 'outcome'} model")
    return model


def _query_points(args, data: Dataset | None, x_names: list[str]):
    """Query (p, x) rows from --query, else from the data rows."""
    if args.query:
        if not Path(args.query).exists():
            raise UsageError(f"query file not found: {args.query}")
        text = Path(args.query).read_text()
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise SchemaError("query file is empty")
        header = rows[0]
        need = ["p"] + [f"x_{n}" for n in x_names]
        missing = [c for c in need if c not in header]
        if missing:
            raise SchemaError(f"query file lacks columns {missing}")
        try:
            table = np.array([[float(r[header.index(c)]) for c in need] for r in rows[1:]], dtype=np.float64)
        except (ValueError, IndexError) as exc:
            raise SchemaError(f"query file: {exc}") from exc
        table = table.reshape(-1, len(need))
        return table[:, 0], table[:, 1:]
    return data.p, data.x


def _write_band_csv(path, p, x, x_names, estimate, lower, upper, method):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["p", *[f"x_{n}" for n in x_names], "estimate", "lower", "upper", "method"])
    for i in range(len(p)):
        writer.writerow([format_float(p[i]), *[format_float(v) for v in x[i]], format_float(estimate[i]),
                         format_float(lower[i]), format_float(upper[i]), method])
    Path(path).write_text(buf.getvalue())


def _plot_path(out: str) -> Path:
    return Path(out).with_suffix(".png")


# -- commands -----------------------------------------------------------------

def cmd_simulate(args) -> None:
    if args.n < 1 or not 0.0 <= args.rho <= 1.0:
        raise UsageError("--n must be >= 1 and --rho must lie in [0, 1]")
    seed = args.seed if args.seed is not None else (_seed_default() or 0)
    if seed < 0:
        raise UsageError("seed must be non-negative")
    data = simulate(SimConfig(args.n, args.rho, seed))
    save_dataset(data, args.out)
    log.info("wrote %d rows to %s", len(data), args.out)


def cmd_train_first(args) -> None:
    cfg = _load_config(args)
    data = _load_data(args.data)
    model = train_first_stage(data, dataclasses.replace(cfg.first_stage, seed=cfg.seed))
    save_model(model, args.out)
    log.info("first stage: %d epochs, wrote %s", model.metadata.get("epochs_run", 0), args.out)


def cmd_train_second(args) -> None:
    cfg = _load_config(args)
    data = _load_data(args.data)
    tmodel = _load(args.first, TreatmentModel)
    model = train_second_stage(data, tmodel, dataclasses.replace(cfg.second_stage, seed=cfg.seed))
    save_model(model, args.out)
    log.info("second stage: %d epochs, wrote %s", model.metadata.get("epochs_run", 0), args.out)


def cmd_validate(args) -> None:
    cfg = _load_config(args)
    data = _load_data(args.data)
    tmodel = _load(args.first, TreatmentModel)
    metrics = {"n": len(data), "oos_deviance": oos_deviance(tmodel, data)}
    if args.permutations:
        metrics["relevance_p_value"] = relevance_diagnostic(tmodel, data, args.permutations,
                                                            child_rng(cfg.seed, 10))
    if args.second:
        omodel = _load(args.second, OutcomeModel)
        metrics["oos_causal_loss"] = oos_causal_loss(omodel, tmodel, data, cfg.inference.eval_draws,
                                                     child_rng(cfg.seed, 11))
    Path(args.out).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    log.info("validation metrics written to %s", args.out)


def cmd_infer_split(args) -> None:
    from .inference import counterfactual_ci, split_two_stage

    cfg = _load_config(args)
    data = _load_data(args.data)
    if bool(args.first) != bool(args.second):
        raise UsageError("--first and --second must be given together")
    if args.first:
        tmodel, omodel = _load(args.first, TreatmentModel), _load(args.second, OutcomeModel)
        leftout = data
    else:
        train, leftout = data.split(cfg.inference.split_fraction, child_rng(cfg.seed, 12))
        tmodel = train_first_stage(train, dataclasses.replace(cfg.first_stage, seed=cfg.seed))
        omodel = train_second_stage(train, tmodel, dataclasses.replace(cfg.second_stage, seed=cfg.seed))
    result = split_two_stage(omodel, tmodel, leftout, cfg.inference.eval_draws, child_rng(cfg.seed, 13))
    if result.ridge > 0:
        log.warning("moment matrix condition number %.3g; ridge load %.3g applied",
                    result.condition_number, result.ridge)
    p, x = _query_points(args, leftout, omodel.x_names)
    est, half = counterfactual_ci(result, omodel, p, x, cfg.inference.level)
    _write_band_csv(args.out, p, x, omodel.x_names, est, est - half, est + half, "split")
    if args.plot:
        from .plotting import plot_band
        plot_band(p, est, est - half, est + half, _plot_path(args.out), title="split-sample interval")
    log.info("split inference on %d left-out rows written to %s", result.n_leftout, args.out)


def cmd_infer_bayes(args) -> None:
    from .inference import dropout_posterior_predict

    cfg = _load_config(args)
    tmodel, omodel = _load(args.first, TreatmentModel), _load(args.second, OutcomeModel)
    data = _load_data(args.data) if args.data else None
    if data is None and not args.query:
        raise UsageError("infer-bayes needs --query or --data for the query points")
    p, x = _query_points(args, data, omodel.x_names)
    alpha = 1.0 - cfg.inference.level
    band = dropout_posterior_predict(omodel, tmodel, p, x, cfg.inference.posterior_draws,
                                     child_rng(cfg.seed, 14), quantiles=(alpha / 2, 1 - alpha / 2))
    _write_band_csv(args.out, p, band.x, omodel.x_names, band.mean, band.lower, band.upper, "vb")
    if args.plot:
        from .plotting import plot_band
        plot_band(p, band.mean, band.lower, band.upper, _plot_path(args.out),
                  title=f"dropout posterior, keep {band.keep_probability:g}")
    log.info("posterior band from %d draws written to %s", band.n_draws, args.out)


def cmd_benchmark(args) -> None:
    cfg = _load_config(args)
    sw = cfg.sweep
    table = run_sweep(sw.rhos, sw.ns, sw.methods, sw.seeds, lambda n: sweep_settings(cfg, n))
    Path(args.out).write_text(table.to_csv(include_wall_time=not args.no_timing))
    if not args.no_plot:
        from .plotting import plot_mse_curves
        plot_mse_curves(table, _plot_path(args.out))
    failed = [r for r in table.rows if r.status != "ok"]
    log.info("%d sweep rows written to %s (%d failed)", len(table), args.out, len(failed))


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deepiv", description="Two-stage neural instrumental-variable estimation.")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", required=True, help="output path")
        p.add_argument("--seed", type=int, default=None, help="master seed (fallback: DEEPIV_SEED, then 0)")
        p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        if config:
            p.add_argument("--config", help="JSON run configuration")
        return p

    p = command("simulate", cmd_simulate, "draw a dataset from the simulated pricing economy", config=False)
    p.add_argument("--n", type=int, required=True, help="number of rows")
    p.add_argument("--rho", type=float, required=True, help="endogeneity, in [0, 1]")

    p = command("train-first", cmd_train_first, "fit the treatment network; writes a JSON model")
    p.add_argument("--data", required=True)

    p = command("train-second", cmd_train_second, "fit the outcome network on the integral loss")
    p.add_argument("--data", required=True)
    p.add_argument("--first", required=True, help="treatment model from train-first")

    p = command("validate", cmd_validate, "held-out first-stage deviance and second-stage causal loss")
    p.add_argument("--data", required=True, help="held-out rows")
    p.add_argument("--first", required=True)
    p.add_argument("--second", help="outcome model; adds the causal loss")
    p.add_argument("--permutations", type=int, default=0, help="instrument relevance test permutations")

    p = command("infer-split", cmd_infer_split, "split-sample intervals for h(p, x)")
    p.add_argument("--data", required=True,
                   help="left-out rows when models are given, otherwise the full sample to split")
    p.add_argument("--first")
    p.add_argument("--second")
    p.add_argument("--query", help="CSV with p and x_* columns; defaults to the left-out rows")
    p.add_argument("--plot", action="store_true", help="also render a PNG next to --out")

    p = command("infer-bayes", cmd_infer_bayes, "dropout posterior bands for h(p, x)")
    p.add_argument("--first", required=True)
    p.add_argument("--second", required=True)
    p.add_argument("--data", help="query rows taken from this dataset")
    p.add_argument("--query", help="CSV with p and x_* columns")
    p.add_argument("--plot", action="store_true", help="also render a PNG next to --out")

    p = command("benchmark", cmd_benchmark, "simulation sweep; writes a results CSV and an MSE plot")
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--no-timing", action="store_true", help="leave the wall-time column empty")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        args.func(args)
    except (UsageError, ConfigError, SchemaError, FileNotFoundError) as exc:
        print(f"deepiv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DeepIVError, ArithmeticError, ValueError) as exc:
        print(f"deepiv {args.command}: compute error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
