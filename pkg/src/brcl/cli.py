"""Command-line interface.

Subcommands mirror the experiment kinds; every run takes a TOML/JSON config
plus optional overrides.  Exit codes: 0 success, 2 configuration error,
3 systemic failure.
"""

import argparse
import os
import sys


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="brcl",
        description="Brown-Resnick / Poisson-Delaunay composite-likelihood toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in ("simulate", "fit", "mc-clt", "mc-maxtwo", "mc-br-rate",
                 "constants", "geometry-check", "eval"):
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", help="TOML or JSON experiment config")
        p.add_argument("--seed", type=int, help="override master seed")
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS/OpenMP thread count (set before numpy loads)")
        p.add_argument("--out", help="override output directory")
        p.add_argument("--resume", action="store_true",
                       help="skip replications already in the manifest")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    # numpy picks up the thread env at import; import lazily on purpose
    from .harness import ConfigError, ExperimentConfig, IngestError, \
        load_config, run

    overrides = {"kind": args.command, "master_seed": args.seed,
                 "out": args.out}
    try:
        if args.config:
            cfg = load_config(args.config, overrides=overrides)
        else:
            cfg = ExperimentConfig(
                kind=args.command,
                master_seed=args.seed if args.seed is not None else 0,
                out=args.out or f"runs/{args.command}")
        code = run(cfg, resume=args.resume,
                   progress=lambda kind, n, rep: print(
                       f"[{kind}] N={n} replication {rep} done", flush=True))
    except (ConfigError, IngestError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    return code


if __name__ == "__main__":
    sys.exit(main())
