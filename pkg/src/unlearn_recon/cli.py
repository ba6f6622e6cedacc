"""Command-line entry point: ``unlearn-recon {run,validate,montage}``.

Exit codes: 0 success, 1 experiment failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiment import (OUTPUT_ENV, ConfigError, ExperimentError, load_config, montage,
                         run_experiment, summarize)

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unlearn-recon",
                                description="Reconstruct deleted training samples from model updates.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full experiment pipeline")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    run.add_argument("--jobs", type=int)
    run.add_argument("--seed", type=int)

    val = sub.add_parser("validate", help="check a config file without side effects")
    val.add_argument("--config", required=True)

    mon = sub.add_parser("montage", help="image strip: original / HRec / MaxDiff per label")
    mon.add_argument("--config", required=True)
    mon.add_argument("--out", help="directory holding the run outputs")
    mon.add_argument("--seed", type=int, help="seed for choosing one deletion per label")
    mon.add_argument("--output", help="image path (default: <out>/montage.pgm|ppm)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "validate":
            load_config(args.config)
            print("config ok")
            return EXIT_OK
        if args.command == "run":
            cfg = load_config(args.config, out=args.out, jobs=args.jobs, seed=args.seed)
            result = run_experiment(cfg)
            print(json.dumps({"output_dir": str(cfg.output_dir), "config_digest": cfg.digest,
                              "summary": summarize(result.records, cfg.methods)}, indent=2))
            return EXIT_OK
        cfg = load_config(args.config, out=args.out)
        path = montage(cfg, seed=args.seed, output=args.output)
        print(path)
        return EXIT_OK
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(f"config error: {d}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentError as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, ValueError) as exc:
        print(f"experiment failed: [{args.command}] {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
