import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Tuple

import sentry_sdk
from dotenv import dotenv_values, load_dotenv
from sentry_sdk.integrations.logging import LoggingIntegration

from .bbm_core import (
    BudgetExceededError,
    SimConfig,
    SimConfigError,
    max_displacement,
    population_count,
    save_run,
    simulate,
)
from .experiments import (
    BUDGET_METHOD,
    EXPERIMENTS,
    ConfigError,
    ExperimentSpec,
    run_experiment,
    theory_rows,
)
from .storage import ResultStore

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID_CONFIG = 1
EXIT_BUDGET = 2

COMMON_DEFAULTS = {
    "dim": 2,
    "beta": 1.0,
    "k": 0.5,
    "r0": 150.0,
    "dt": 0.025,
    "t_grid": "6,8,10",
    "seeds": 10,
    "seed": 20240601,
    "samples": 100_000,
    "estimator": None,
    "voxel": None,
    "out": "results",
    "format": "csv",
    "eta": 0.25,
    "max_points": 5_000_000,
    "theta": 0.7,
    "lam": 0.1,
    "trap_radius": 0.5,
    "R": 1.0,
    "paths": None,
    "workers": None,
    "no_plot": False,
}

# Desk-scale defaults; each keeps sqrt(d*dt) <= eta*r(T) and the expected points at a fifth
# of the budget or less, since the stored points of one run scale with N_T.
EXPERIMENT_DEFAULTS: Dict[str, Dict] = {
    "sausage_scaling": {},
    "enlargement_scaling": {"k": 0.25, "r0": 12.0, "dt": 0.02},
    "d1_law": {"dim": 1, "k": 0.0, "r0": 0.9, "dt": 0.04, "seeds": 20},
    "wiener_sausage": {
        "dim": 3, "k": 0.0, "r0": 0.5, "dt": 0.005, "t_grid": "50,100,150,200", "seeds": 100,
    },
    "hitting": {"dim": 3, "k": 1.0, "r0": 0.1, "dt": 2e-5, "t_grid": "4", "paths": 100_000},
    "coverage": {"r0": 300.0, "dt": 0.05, "t_grid": "10"},
    "trap_survival": {"k": 0.0, "r0": 0.5, "dt": 0.005, "t_grid": "4", "seeds": 200},
    "population_growth": {"dim": 1, "k": 0.0, "r0": 1.0, "dt": 0.05, "t_grid": "2,5,8",
                          "seeds": 200},
    "simulate": {"t_grid": "8", "seeds": 1},
    "theory": {},
}

_INT_KEYS = {"dim", "seeds", "seed", "samples", "max_points", "paths", "workers"}
_FLOAT_KEYS = {"beta", "k", "r0", "dt", "voxel", "eta", "theta", "lam", "trap_radius", "R"}


def init_sentry():
    sentry_dsn = os.getenv("SENTRY_DSN")
    if sentry_dsn:
        sentry_sdk.init(
            dsn=sentry_dsn,
            # Attach the host and user that ran the experiment to error reports
            send_default_pii=True,
            integrations=[LoggingIntegration(level=logging.INFO, event_level=logging.ERROR)],
        )
        logger.info("Sentry SDK initialized")
    else:
        logger.info("SENTRY_DSN not provided; Sentry is disabled")


def _add_common_flags(parser: argparse.ArgumentParser):
    # Defaults are None so that config-file values are only overridden by explicit flags.
    parser.add_argument("--config", help="key=value file of defaults (flags win)")
    parser.add_argument("--dim", type=int, help="dimension d")
    parser.add_argument("--beta", type=float, help="branching rate")
    parser.add_argument("--k", type=float, help="radius decay exponent")
    parser.add_argument("--r0", type=float, help="initial radius")
    parser.add_argument("--dt", type=float, help="path sampling step")
    parser.add_argument("--t-grid", dest="t_grid", help="comma separated observation times")
    parser.add_argument("--seeds", type=int, help="number of seed indices (replicates)")
    parser.add_argument("--seed", type=int, help="root seed")
    parser.add_argument("--samples", type=int, help="Monte Carlo samples / probes")
    parser.add_argument("--estimator", choices=["mc", "voxel", "exact1d"])
    parser.add_argument("--voxel", type=float, help="voxel size (default radius/4)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--format", choices=["csv", "json"])
    parser.add_argument("--eta", type=float, help="resolution factor")
    parser.add_argument("--max-points", dest="max_points", type=int)
    parser.add_argument("--theta", type=float, help="coverage radius factor")
    parser.add_argument("--lam", type=float, help="trap intensity")
    parser.add_argument("--trap-radius", dest="trap_radius", type=float)
    parser.add_argument("--R", type=float, help="hitting start distance")
    parser.add_argument("--paths", type=int, help="Brownian paths (wiener/hitting)")
    parser.add_argument("--workers", type=int)
    parser.add_argument("--no-plot", dest="no_plot", action="store_true", default=None)
    parser.add_argument("--log-level", dest="log_level")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bbm-sausage",
        description="Simulate shrinking BBM-sausages and compare them with their limits.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        _add_common_flags(sub.add_parser(name, help=f"run the {name} experiment"))
    _add_common_flags(sub.add_parser("simulate", help="simulate one BBM and dump it"))
    _add_common_flags(sub.add_parser("theory", help="print closed-form reference values"))
    return parser


def _coerce(key: str, value):
    if value is None or value == "":
        return None
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key == "no_plot" and isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "on")
    return value


def resolve_options(args: argparse.Namespace) -> Dict:
    """Defaults, then the config file, then explicit flags."""
    options = dict(COMMON_DEFAULTS)
    options.update(EXPERIMENT_DEFAULTS.get(args.command, {}))
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        for raw_key, raw_value in dotenv_values(args.config).items():
            key = raw_key.strip().replace("-", "_")
            if key not in options:
                raise ConfigError(f"unknown config key {raw_key!r} in {args.config}")
            options[key] = raw_value
    for key in options:
        flag = getattr(args, key, None)
        if flag is not None:
            options[key] = flag
    try:
        options = {key: _coerce(key, value) for key, value in options.items()}
    except ValueError as e:
        raise ConfigError(f"invalid configuration value: {e}") from e
    if options["workers"] is None:
        options["workers"] = int(os.getenv("BBM_WORKERS", "1"))
    if options["estimator"] is None:
        options["estimator"] = "exact1d" if options["dim"] == 1 else "mc"
    return options


def parse_t_grid(text: str) -> List[float]:
    try:
        return [float(part) for part in str(text).split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"invalid --t-grid {text!r}") from e


def build_config(options: Dict, horizon: float) -> SimConfig:
    return SimConfig(
        dimension=options["dim"],
        beta=options["beta"],
        r0=options["r0"],
        k=options["k"],
        dt=options["dt"],
        horizon=horizon,
        seed=options["seed"],
        max_points=options["max_points"],
        eta=options["eta"],
    )


def _t_grid(options: Dict) -> Tuple[float, ...]:
    t_grid = tuple(parse_t_grid(options["t_grid"]))
    if not t_grid:
        raise ConfigError("--t-grid is empty")
    return t_grid


def build_spec(name: str, options: Dict) -> ExperimentSpec:
    t_grid = _t_grid(options)
    config = build_config(options, 1.0 if name == "hitting" else t_grid[-1])
    return ExperimentSpec(
        name=name,
        config=config,
        t_grid=t_grid,
        n_seeds=options["seeds"],
        estimator=options["estimator"],
        samples=options["samples"],
        voxel=options["voxel"],
        theta=options["theta"],
        lam=options["lam"],
        trap_radius=options["trap_radius"],
        R=options["R"],
        n_paths=options["paths"],
        workers=options["workers"],
    )


def _manifest(spec: ExperimentSpec, options: Dict) -> Dict:
    return {
        "experiment": spec.name,
        "root_seed": spec.config.seed,
        "t_grid": list(spec.t_grid),
        "seed_indices": list(range(spec.n_seeds)),
        "labels": spec.labels(),
        "config": spec.config.to_dict(),
        "options": {k: v for k, v in options.items() if k not in ("workers", "out")},
    }


def run_command(command: str, options: Dict) -> int:
    store = ResultStore(options["out"])
    if command == "theory":
        t_grid = _t_grid(options)
        rows = theory_rows(build_config(options, t_grid[-1]), t_grid, options["theta"])
        store.write_rows("theory", rows, options["format"])
        for row in rows:
            note = ""
            if row.method == "coverage_k_threshold" and row.value <= 0:
                note = "  (no k >= 0 covers the ball: theta >= 1)"
            print(f"{row.method:28s} t={row.t:<8g} {row.value!r}{note}")
        return EXIT_OK

    if command == "simulate":
        config = build_config(options, _t_grid(options)[-1])
        run = simulate(config, workers=options["workers"])
        path = save_run(run, os.path.join(options["out"], f"run-{config.seed}.npz"))
        horizon = config.horizon
        logger.info(
            f"N_T={population_count(run, horizon)} points={run.total_points} "
            f"M_T={max_displacement(run, horizon):.6g} generations={run.max_generation}"
        )
        print(path)
        return EXIT_OK

    spec = build_spec(command, options)
    rows = run_experiment(spec)
    store.write_rows(spec.name, rows, options["format"])
    store.write_manifest(spec.name, _manifest(spec, options))
    if not options["no_plot"]:
        store.write_plot(spec.name, rows)
    failed = sum(1 for row in rows if row.method == BUDGET_METHOD)
    if failed:
        logger.error(f"{failed} rows exceeded a point or voxel budget; see the warnings above")
        return EXIT_BUDGET
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = (args.log_level or os.getenv("LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO))
    init_sentry()

    try:
        options = resolve_options(args)
        return run_command(args.command, options)
    except BudgetExceededError as e:
        logger.error(f"Budget exceeded: {e}")
        return EXIT_BUDGET
    except (ConfigError, SimConfigError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_INVALID_CONFIG
    except ValueError as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_INVALID_CONFIG
    except Exception:
        logger.exception("Unexpected error")
        raise


if __name__ == "__main__":
    sys.exit(main())
