import argparse
import logging
import os
import sys

from .errors import ConfigError
from .service import apply_overrides, emit, load_config, run_pes

logger = logging.getLogger(__name__)


def _env_int(name: str) -> int | None:
    value = os.getenv(name)
    return int(value) if value not in (None, "") else None


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Run a PT-VQE potential energy surface scan")
    parser.add_argument("--config", default=os.getenv("PTVQE_CONFIG"))
    parser.add_argument("--shots", type=int, default=None)
    parser.add_argument("--seed", type=int, default=_env_int("PTVQE_SEED"))
    parser.add_argument("--restrict-3rdm", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--screen", type=float, default=None)
    parser.add_argument("--mitigate", default=None, help="comma-separated: sv, rdm or none")
    parser.add_argument("--output", default=os.getenv("PTVQE_OUTPUT"))
    parser.add_argument("--format", choices=("csv", "json"), default=os.getenv("PTVQE_FORMAT"))
    parser.add_argument("--log-level", default=os.getenv("PTVQE_LOG_LEVEL", "INFO"))
    return parser.parse_args(argv)


def run(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if not args.config:
        logger.error("No configuration given; pass --config or set PTVQE_CONFIG")
        return 1
    try:
        config = apply_overrides(
            load_config(args.config),
            shots=args.shots,
            seed=args.seed,
            restrict_3rdm=args.restrict_3rdm,
            screen=args.screen,
            mitigate=args.mitigate,
            output=args.output,
            format=args.format,
        )
    except ConfigError as exc:
        logger.error("Configuration error", extra={"error": str(exc)})
        return 1

    table = run_pes(config)
    try:
        path = emit(table, config.output.path, config.output.format)
    except ConfigError as exc:
        logger.error("Output error", extra={"error": str(exc)})
        return 1
    logger.info("Wrote PES table", extra={"path": str(path), "rows": len(table.rows), "failures": table.failures})
    return 2 if table.failures else 0


if __name__ == "__main__":
    sys.exit(run())
