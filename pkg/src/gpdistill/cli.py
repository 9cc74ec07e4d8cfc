"""Command-line entry point: ``gpdistill discover|calibrate|metrics|export-plots``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_STAGE = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpdistill", description="Constitutive model discovery with quantified uncertainty.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("discover", "calibrate"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="run config JSON (merged over the preset)")
        s.add_argument("--preset", help="named preset")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--threads", type=int, default=1)
        if name == "discover":
            s.add_argument("--stage", default="all", choices=["gp", "distill", "sobol", "refine", "all"])
    for name in ("metrics", "export-plots"):
        s = sub.add_parser(name)
        s.add_argument("--run", required=True, help="run directory")
        s.add_argument("--threads", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _build_config(args):
    from .pipeline import PRESETS, ConfigError, RunConfig

    d = {}
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        d.update(json.loads(json.dumps(PRESETS[args.preset])))
    if args.config:
        try:
            with open(args.config) as fh:
                d.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out:
        d["output_dir"] = args.out
    if "data" not in d:
        raise ConfigError("no dataset: give --config with a 'data' section or a preset that defines one")
    return RunConfig.from_dict(d)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    from .distill import DistillError
    from .gp import GpError
    from .pipeline import ConfigError, StageError, compute_run_metrics, export_plot_data, load_run, run_calibration, run_discovery

    numeric = (GpError, DistillError, FloatingPointError, ArithmeticError)
    try:
        if args.command in ("discover", "calibrate"):
            cfg = _build_config(args)
            run = run_discovery(cfg, args.stage) if args.command == "discover" else run_calibration(cfg)
            print(json.dumps(run.metrics.get("model", run.metrics.get("gp", {})).get("total", {}), sort_keys=True))
        elif args.command == "metrics":
            run = load_run(args.run)
            metrics = compute_run_metrics(run)
            (run.out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
            print(json.dumps(metrics, indent=2, sort_keys=True))
        else:
            run = load_run(args.run)
            for path in export_plot_data(run):
                print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.checkpoint:
            print(f"last checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, numeric) else EXIT_STAGE
    except numeric as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
