"""
Command-line interface: reproduce the convergence studies and write the
result tables, plots and summaries.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from . import __version__
from .config import Settings, get_settings
from .exceptions import ConfigError, ParseError, SurfVemError
from .models import ExperimentConfig, MeshFamily, StabKind
from .pipeline import case_summary, run_experiment
from .services.reporting import write_error_report

logger = logging.getLogger(__name__)

# Settings fields that feed an experiment, and the config field each one sets
_SETTINGS_TO_CONFIG = {
    "output_dir": "output_dir",
    "default_seed": "seed",
    "lloyd_iterations": "lloyd_iterations",
    "parallel_levels": "parallel_levels",
    "record_timings": "record_timings",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surfvem",
        description="Virtual element convergence studies on parametrized surfaces",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config-file", type=Path, help="JSON file with experiment fields")
    parser.add_argument("--log-level", type=str, help="Logging level (default from SURFVEM_LOG_LEVEL)")

    parser.add_argument("--test-case", type=int, choices=[1, 2, 3, 4], help="Test case 1-4")
    parser.add_argument("--orders", type=int, nargs="+", help="VEM orders (subset of 1 2 3 4)")
    parser.add_argument("--mesh-family", type=str, choices=[m.value for m in MeshFamily])
    parser.add_argument("--levels", type=int, help="Number of mesh levels")
    parser.add_argument("--r", type=float, help="Monge radius parameter")
    parser.add_argument("--a", type=float, help="Monge perturbation amplitude")
    parser.add_argument("--freq", type=int, help="Monge perturbation frequency")
    parser.add_argument("--stab-kind", type=str, choices=[s.value for s in StabKind])
    parser.add_argument("--w-hat", type=float, nargs=2, metavar=("W1", "W2"), help="Advection components")
    parser.add_argument("--gamma", type=float, help="Reaction coefficient")
    parser.add_argument("--seed", type=int, help="Seed for Voronoi meshes")
    parser.add_argument("--output-dir", type=str, help="Directory for result files")
    parser.add_argument("--n-boundary-nodes", type=int, help="Nodes on the curved boundary")
    parser.add_argument("--n-cells", type=int, help="Polygonal cell count")
    parser.add_argument("--lloyd-iterations", type=int, help="Lloyd relaxation sweeps")
    parser.add_argument("--fit-window", type=int, help="Levels used by the least-squares slope")
    parser.add_argument("--parallel-levels", action="store_true", default=None)
    parser.add_argument("--record-timings", action="store_true", default=None)
    parser.add_argument("--surface-weighted", action="store_true", default=None)
    parser.add_argument("--mesh-files", type=str, nargs="+", help="JSON meshes used as the levels, coarsest first")
    return parser


def load_config_file(path: Path) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ParseError(f"cannot read config file {path}: {e}", path=str(path)) from e
    except json.JSONDecodeError as e:
        raise ParseError(f"config file {path} is not valid JSON: {e}", path=str(path)) from e
    if not isinstance(data, dict):
        raise ParseError(f"config file {path} must hold a JSON object", path=str(path))
    return data


def settings_overrides(settings: Settings) -> Dict[str, Any]:
    """Experiment fields set through SURFVEM_* variables or .env"""
    return {
        config_field: getattr(settings, field)
        for field, config_field in _SETTINGS_TO_CONFIG.items()
        if field in settings.model_fields_set
    }


def cli_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    values = vars(args).copy()
    values.pop("config_file", None)
    values.pop("log_level", None)
    if values.get("w_hat") is not None:
        values["w_hat"] = tuple(values["w_hat"])
    return {key: value for key, value in values.items() if value is not None}


def resolve_config(args: argparse.Namespace, settings: Optional[Settings] = None) -> ExperimentConfig:
    """CLI flags over SURFVEM_* variables over the config file over per-test-case defaults"""
    settings = settings or get_settings()
    data: Dict[str, Any] = {}
    if args.config_file is not None:
        data.update(load_config_file(args.config_file))
    data.update(settings_overrides(settings))
    data.update(cli_overrides(args))
    if "test_case" not in data:
        raise ConfigError("--test-case is required (flag or config file)")
    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        messages = "; ".join(f"{'.'.join(map(str, err['loc'])) or 'config'}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid experiment configuration: {messages}", test_case=data.get("test_case")) from e


def _error_dir(args: argparse.Namespace, settings: Settings) -> Path:
    if args.output_dir:
        return Path(args.output_dir)
    return Path(settings.output_dir)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    settings = get_settings()
    level = (args.log_level or settings.log_level).upper()
    logging.getLogger().setLevel(getattr(logging, level, logging.INFO))

    try:
        config = resolve_config(args, settings)
        logger.info(f"CLI: Running test case {config.test_case}")
        result = run_experiment(config)
        for k, slope_l2, slope_h1 in case_summary(result):
            logger.info(f"CLI: k={k} slopes L2={slope_l2} H1={slope_h1}")
        return 0
    except SurfVemError as e:
        logger.error(f"CLI: {type(e).__name__}: {e}")
        report = e.to_dict()
    except Exception as e:
        logger.error(f"CLI: Unexpected failure: {e}")
        logger.exception("Full traceback:")
        report = {"error": type(e).__name__, "message": str(e), "exit_code": 3, "context": {}}

    write_error_report(report, _error_dir(args, settings))
    print(json.dumps(report, indent=2, sort_keys=True), file=sys.stderr)
    return int(report["exit_code"])


if __name__ == "__main__":
    sys.exit(main())
