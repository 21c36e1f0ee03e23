import argparse
import logging
import os
import sys

from dotenv import load_dotenv

from bench_orchestrator import load_config, run
from errors import ConfigError, DataError

load_dotenv()

EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3

logger = logging.getLogger("nncomplete")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nncomplete",
        description="Nearest-neighbor matrix completion benchmarks",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    bench = commands.add_parser("bench", help="Run an estimator x dataset experiment and write its report")
    bench.add_argument("--config", help="Flat KEY=value config file")
    bench.add_argument(
        "--dataset",
        choices=["synthetic-scalar", "synthetic-dist", "long-csv", "samples-csv", "movielens"],
        help="Data source",
    )
    bench.add_argument(
        "--estimator",
        action="append",
        help="Method id (can be used multiple times), e.g. drnn, tsnn, autonn, kernelnn",
    )
    bench.add_argument("--sigma", type=float, help="Noise standard deviation of synthetic data")
    bench.add_argument("--propensity", type=float, help="Observation probability of synthetic data")
    bench.add_argument("--n-rows", type=int, help="Rows of synthetic data")
    bench.add_argument("--n-cols", type=int, help="Columns of synthetic data")
    bench.add_argument("--trials", type=int, help="Number of repetitions")
    bench.add_argument("--seed", type=int, help="Base seed; trial k uses seed + k")
    bench.add_argument("--metric", choices=["abs_error", "ks_distance"], help="Evaluation metric")
    bench.add_argument("--out", help="Output folder for report.json and entries.csv")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.getenv("NNCOMPLETE_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )
    args = build_parser().parse_args(argv)

    overrides = {
        "dataset": args.dataset,
        "estimators": args.estimator,
        "sigma": args.sigma,
        "propensity": args.propensity,
        "n_rows": args.n_rows,
        "n_cols": args.n_cols,
        "trials": args.trials,
        "seed": args.seed,
        "metric": args.metric,
        "out": args.out,
    }
    try:
        config = load_config(args.config, overrides)
        report = run(config)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG_ERROR
    except (DataError, FileNotFoundError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA_ERROR

    logger.info(f"Report written to {report.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
