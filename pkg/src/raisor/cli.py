"""Command-line entry point.

Subcommands::

    raisor simulate --n 640 --seed 1 --out data/
    raisor fit --data data/data.csv --method raisor --out fit/
    raisor predict --data data/data.csv --posterior fit/posterior.csv --grid grid.csv --out fit/
    raisor replicate-figure fig1 --seed 7 --scale 0.1 --out figs/
    raisor benchmark --sizes 320,640 --thread-counts 1,4 --seed 3 --out bench/

Exit codes: 0 on success, 2 for configuration, argument or file errors and
3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from raisor import __version__, io
from raisor.errors import ConfigError, InvalidArgument, RaisorError

log = logging.getLogger("raisor")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    """Bad command-line usage detected after argument parsing."""


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive")
    return values


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _scale(text):
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError("scale must be in (0, 1]")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=_seed, help="random seed")
    common.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="raisor", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate GP point data")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--nngp", action="store_true", help="draw from the NNGP approximation")
    p.add_argument("--params", type=json.loads, default=None,
                   help='JSON overrides, e.g. \'{"phi": 0.1}\'')

    p = sub.add_parser("fit", parents=[common], help="fit a model to point data")
    p.add_argument("--data", type=Path)
    p.add_argument("--method", choices=("raisor", "mcmc"), default="raisor")
    p.add_argument("--checkpoint", type=Path, help="save engine state after every round")
    p.add_argument("--resume", type=Path, help="resume from a checkpoint")

    p = sub.add_parser("predict", parents=[common], help="posterior predictive at new locations")
    p.add_argument("--data", type=Path)
    p.add_argument("--posterior", type=Path, required=True)
    p.add_argument("--grid", type=Path)
    p.add_argument("--no-nugget", action="store_true", help="predict the latent surface")

    p = sub.add_parser("replicate-figure", parents=[common], help="regenerate figure data")
    p.add_argument("figure", choices=("fig1", "fig2", "fig3", "fig4"))
    p.add_argument("--scale", type=_scale, default=1.0)
    p.add_argument("--full", action="store_true", help="original study sizes (hours)")

    p = sub.add_parser("benchmark", parents=[common], help="time RAISOR against MCMC")
    p.add_argument("--sizes", type=_int_list, default=[640])
    p.add_argument("--methods", default="raisor,mcmc")
    p.add_argument("--thread-counts", type=_int_list, default=None)
    p.add_argument("--particles", type=int, default=20000)
    p.add_argument("--iterations", type=int, default=20000)
    return parser


def _run_config(args) -> io.RunConfig:
    cfg = io.load_config(args.config) if args.config else io.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args, cfg) -> Path:
    out = args.out or Path(cfg.output.get("dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(path, what):
    if path is None:
        raise UsageError(f"missing {what} path")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} file not found: {path}")
    return path


def _engine_config(cfg, args):
    from raisor.engine import EngineConfig

    doc = dict(cfg.engine)
    if cfg.seed is not None:
        doc["seed"] = cfg.seed
    if args.threads is not None:
        doc["threads"] = args.threads
    return EngineConfig.from_dict(doc)


def _build_model(cfg, data_path):
    from raisor.experiments import gp_model_from_points
    from raisor.models import ConjugateNormalModel

    spec = dict(cfg.model)
    kind = spec.pop("type", "gp")
    if kind == "conjugate":
        header, rows = io.read_rows(data_path)
        if "value" not in header:
            raise InvalidArgument(f"{data_path}: need a 'value' column")
        col = header.index("value")
        values = np.array([float(r[col]) for r in rows])
        return ConjugateNormalModel(values, **spec)
    data = io.read_points_csv(data_path)
    return gp_model_from_points(data, **spec)


def cmd_simulate(args):
    from raisor.experiments import simulate_gp

    cfg = _run_config(args)
    seed = 0 if cfg.seed is None else cfg.seed
    data = simulate_gp(args.n, params=args.params, seed=seed, nngp=args.nngp)
    path = io.write_points_csv(_out_dir(args, cfg) / "data.csv", data)
    log.info("wrote %s", path)


def cmd_fit(args):
    from raisor import engine as eng
    from raisor import mcmc
    from raisor.experiments import posterior_summary

    cfg = _run_config(args)
    model = _build_model(cfg, _existing(args.data or cfg.data, "data"))
    out = _out_dir(args, cfg)
    seed = 0 if cfg.seed is None else cfg.seed
    if args.method == "mcmc":
        if not hasattr(model, "structure"):
            raise UsageError("the MCMC baseline is implemented for the GP model only")
        if args.threads is not None:
            import numba

            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        m = cfg.mcmc
        res = mcmc.run_chain(model, m["iterations"], m["burn_in"], np.random.default_rng(seed),
                             thin=m.get("thin", 1))
        io.write_chain_csv(out / "chain.csv", res)
        weights = np.ones(len(res.samples))
        summary = posterior_summary(res.samples, weights, res.param_names)
        for rec, ess in zip(summary, res.ess):
            rec["ess"] = float(ess)
        io.write_table_csv(out / "summary.csv", summary)
        log.info("mcmc: %.1f s, acceptance %.3f", res.seconds, res.acceptance_rate)
        return
    if args.resume is not None:
        engine, sample = io.load_checkpoint(_existing(args.resume, "checkpoint"), model)
    else:
        engine, sample = eng.Engine(model, _engine_config(cfg, args)), None
    sample, trace = engine.run(sample, checkpoint=args.checkpoint)
    io.write_posterior_csv(out / "posterior.csv", sample, model)
    io.write_trace_csv(out / "trace.csv", trace)
    theta = model.transform.to_model(sample.particles)
    io.write_table_csv(out / "summary.csv",
                       posterior_summary(theta, sample.weights(), model.param_names))
    (out / "config_used.json").write_text(json.dumps(
        dict(cfg.to_dict(), engine=engine.config.to_dict()), indent=2) + "\n")
    log.info("raisor: %d replenishments, %d likelihood terms", trace.count("replenish"),
             engine.n_evals)


def cmd_predict(args):
    cfg = _run_config(args)
    model = _build_model(cfg, _existing(args.data or cfg.data, "data"))
    if not hasattr(model, "predict"):
        raise UsageError("prediction needs the GP model")
    names, theta, weights = io.read_posterior_csv(_existing(args.posterior, "posterior"))
    if tuple(names) != tuple(model.param_names):
        raise InvalidArgument(f"posterior columns {names} do not match the model")
    grid, cov, coord_names = io.read_grid_csv(_existing(args.grid or cfg.grid, "grid"))
    X_grid = np.column_stack([np.ones(len(grid)), grid] + ([cov] if cov is not None else []))
    if args.threads is not None:
        import numba

        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    mean, sd = model.predict(theta, weights, grid, X_grid=X_grid, nugget=not args.no_nugget)
    io.write_prediction_csv(_out_dir(args, cfg) / "predictions.csv", grid, mean, sd, coord_names)


def cmd_replicate_figure(args):
    from raisor.experiments import replicate_figure

    cfg = _run_config(args)
    if cfg.seed is None:
        raise UsageError("replicate-figure needs an explicit --seed")
    bundle = replicate_figure(args.figure, scale=args.scale, seed=cfg.seed,
                              out=_out_dir(args, cfg), threads=args.threads, full=args.full)
    log.info("wrote %s", ", ".join(sorted(bundle)))


def cmd_benchmark(args):
    import os

    from raisor.experiments import BENCHMARK_COLUMNS, benchmark

    cfg = _run_config(args)
    threads = args.thread_counts or [args.threads or os.cpu_count() or 1]
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    records = benchmark(args.sizes, methods=methods, threads=threads,
                        seed=0 if cfg.seed is None else cfg.seed, M=args.particles,
                        iterations=args.iterations, burn_in=min(5000, args.iterations // 4))
    io.write_table_csv(_out_dir(args, cfg) / "benchmark.csv", records, BENCHMARK_COLUMNS)


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "replicate-figure": cmd_replicate_figure,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        COMMANDS[args.command](args)
    except (UsageError, ConfigError, ValueError, OSError) as exc:
        # InvalidArgument and DuplicateLocation are ValueErrors: bad input, not numerics
        print(f"raisor: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RaisorError as exc:
        print(f"raisor: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
