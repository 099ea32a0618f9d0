"""
Command-line front end for usp-ebm

    usp-ebm run --config <path> [--seed <u64>] [--out <dir>]
    usp-ebm emit-figures --run <dir>
    usp-ebm validate --config <path>

Exit status is 0 on success, 2 for configuration errors and 1 for runtime
failures. Numerical divergence is recorded in the manifest, not raised.
"""

import argparse
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import psutil
from loguru import logger

from . import __version__
from .components import (
    DiagnosticsComponent,
    FigureEmitter,
    MissingArtifactsError,
    OodComponent,
    TrainingComponent,
    VerificationComponent,
)
from .models import ExperimentConfig, ExperimentKind, ExperimentOutcome, RunManifest
from .utils.config import (
    ConfigError,
    Settings,
    get_settings,
    load_experiment_config,
    parse_experiment_config,
)
from .utils.io import read_json, write_json

LOG_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - "
    "<level>{message}</level>"
)

COMPONENTS = {
    ExperimentKind.TRAIN_1D: TrainingComponent,
    ExperimentKind.TRAIN_2D: TrainingComponent,
    ExperimentKind.VERIFY_PROP1: VerificationComponent,
    ExperimentKind.VERIFY_PROP2: VerificationComponent,
    ExperimentKind.VERIFY_PROP3: VerificationComponent,
    ExperimentKind.SRLMC_DIAGNOSTICS: DiagnosticsComponent,
    ExperimentKind.OOD_EVAL: OodComponent,
}


def setup_logging(log_level: str = "INFO"):
    """Setup logging configuration"""
    logger.remove()
    logger.add(sys.stderr, level=log_level, format=LOG_FORMAT)


def get_memory_usage() -> Dict[str, float]:
    process = psutil.Process()
    memory_info = process.memory_info()
    return {
        "rss_mb": memory_info.rss / 1024 / 1024,
        "vms_mb": memory_info.vms / 1024 / 1024,
        "percent": process.memory_percent(),
    }


def resolve_run_dir(
    config: ExperimentConfig, out: Optional[str], settings: Settings
) -> Path:
    """--out, then the USP_EBM_OUTPUT_DIR root, then the config, then runs/"""
    if out:
        return Path(out)
    name = f"{config.experiment.value}-{config.seed}"
    if settings.output_dir:
        return Path(settings.output_dir) / name
    if config.output_dir:
        return Path(config.output_dir)
    return Path("runs") / name


def run_experiment(config: ExperimentConfig, run_dir: Path) -> RunManifest:
    """Run one experiment and write metrics.json and manifest.json into run_dir"""
    settings = get_settings()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    sink = logger.add(run_dir / "run.log", level=settings.log_level, format=LOG_FORMAT)
    start = time.perf_counter()
    manifest = RunManifest(
        experiment=config.experiment.value,
        version=__version__,
        seed=config.seed,
        config=config.model_dump(mode="json"),
    )
    try:
        logger.info(
            f"Running {config.experiment.value} (seed {config.seed}) into {run_dir}"
        )
        component = COMPONENTS[config.experiment](run_dir)
        outcome: ExperimentOutcome = component.process(config)
        write_json(run_dir / "metrics.json", outcome.model_dump(mode="json")["results"])
        manifest.results = outcome.results
        manifest.passed = outcome.passed
        manifest.diverged_chains = outcome.diverged_chains
        if outcome.diverged_chains:
            logger.warning(f"{outcome.diverged_chains} chains diverged during the run")
    except Exception as e:
        manifest.status = "failed"
        manifest.results = {"error": str(e)}
        raise
    finally:
        memory = get_memory_usage()
        if memory["percent"] > settings.memory_warn_percent:
            logger.warning(f"High memory usage ({memory['percent']:.1f}%)")
        manifest.wall_time_seconds = time.perf_counter() - start
        manifest.memory_mb = memory["rss_mb"]
        manifest.artifacts = sorted(
            {p.name for p in run_dir.iterdir() if p.is_file()} | {"manifest.json"}
        )
        write_json(run_dir / "manifest.json", manifest.model_dump(mode="json"))
        logger.remove(sink)
    logger.info(
        f"Finished in {manifest.wall_time_seconds:.1f}s; passed={manifest.passed}"
    )
    return manifest


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command line arguments"""
    parser = argparse.ArgumentParser(
        prog="usp-ebm",
        description="usp-ebm - EBM maximum-likelihood experiments on mixture targets",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  usp-ebm run --config configs/train_1d_riemann.json
  usp-ebm run --config configs/verify_prop2.json --seed 7 --out runs/prop2
  usp-ebm emit-figures --run runs/train-1d-0
  usp-ebm validate --config configs/train_2d_psusp.json

Environment Variables:
  USP_EBM_OUTPUT_DIR          - Root directory for run outputs
  USP_EBM_LOG_LEVEL           - Log level (DEBUG, INFO, WARNING, ERROR)
  USP_EBM_GRID_CACHE_SIZE     - Cached quadrature grids
  USP_EBM_CHUNK_SIZE          - Rows per batched model evaluation
  USP_EBM_MEMORY_WARN_PERCENT - Memory usage warning threshold
  USP_EBM_TRACE_WALL_TIME     - Fill the trace.csv wall_time column (true/false)
        """,
    )
    parser.add_argument(
        "--log-level",
        type=str,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Set logging level",
    )
    parser.add_argument("--version", action="version", version=f"usp-ebm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an experiment")
    run.add_argument("--config", required=True, help="Experiment config (JSON)")
    run.add_argument("--seed", type=int, help="Override the config seed")
    run.add_argument("--out", help="Run directory")

    figures = sub.add_parser(
        "emit-figures", help="Write per-panel figure CSVs for a run"
    )
    figures.add_argument("--run", required=True, help="Run directory")

    validate = sub.add_parser(
        "validate", help="Validate a config or a manifest's config echo"
    )
    validate.add_argument("--config", required=True, help="Config or manifest (JSON)")
    return parser.parse_args(argv)


def cmd_run(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config)
    if args.seed is not None:
        config = parse_experiment_config(
            {**config.model_dump(mode="json"), "seed": args.seed}
        )
    run_dir = resolve_run_dir(config, args.out, get_settings())
    manifest = run_experiment(config, run_dir)
    print(f"{run_dir}: status={manifest.status} passed={manifest.passed}")
    return 0


def cmd_emit_figures(args: argparse.Namespace) -> int:
    emitter = FigureEmitter(Path(args.run))
    try:
        written = emitter.emit()
    except MissingArtifactsError as e:
        print(f"Missing inputs: {', '.join(e.missing)}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    path = Path(args.config)
    data: Dict[str, Any] = read_json(path) if path.is_file() else {}
    if "config" in data and "version" in data:
        config = parse_experiment_config(data["config"])
        if config.model_dump(mode="json") != data["config"]:
            raise ConfigError("Manifest config echo does not round-trip", ["config"])
    else:
        config = load_experiment_config(path)
    print(
        f"OK: {config.experiment.value} "
        f"(schema {config.schema_version}, seed {config.seed})"
    )
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = parse_args(argv)
    setup_logging(args.log_level or get_settings().log_level)
    commands = {
        "run": cmd_run, "emit-figures": cmd_emit_figures, "validate": cmd_validate
    }
    try:
        return commands[args.command](args)
    except ConfigError as e:
        logger.error(str(e))
        print(str(e), file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 1
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


def cli_main():
    """Console script entry point"""
    sys.exit(main())


if __name__ == "__main__":
    cli_main()
