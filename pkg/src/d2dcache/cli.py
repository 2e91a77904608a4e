"""Command-line entry point ``d2dcache``.

Exit codes: 0 success, 2 configuration error, 3 solver error,
4 reference mismatch (``table2`` only).
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
import warnings

from .analytic import PlacementKind, RADIUS_SCALES
from .errors import ConfigError, D2DCacheError, DiagnosticWarning, SolverError
from .experiments import (
    RADII_COLUMNS,
    SWEEP_COLUMNS,
    TABLE2_COLUMNS,
    UTILIZATION_COLUMNS,
    ExperimentSpec,
    run_radii_profile,
    run_sweep,
    run_table2,
    run_utilization,
    table2_mismatches,
    write_csv,
)
from .scenario import ScenarioConfig, load_scenario, zipf_pmf

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_MISMATCH = 4

log = logging.getLogger("d2dcache")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _strategy_list(text):
    try:
        return [PlacementKind(v.strip().upper().replace("-", "_")) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"strategies must be among {[k.value for k in PlacementKind]}, got {text!r}"
        ) from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario file with key = value lines")
    common.add_argument("--seed", type=int, help="root seed (overrides the scenario)")
    common.add_argument("--replications", type=int, default=0, help="Monte Carlo replications")
    common.add_argument("--out", help="output CSV path (default: stdout)")
    common.add_argument(
        "--strategies",
        type=_strategy_list,
        default=list(PlacementKind),
        help="comma-separated subset of MPC,GCP,MHC_A,MHC_B",
    )
    common.add_argument(
        "--full-cache-blocks",
        action="store_true",
        help="full caches keep competing in hard-core thinning",
    )
    common.add_argument("--workers", type=int, default=1, help="worker processes")
    common.add_argument(
        "--radius-scale",
        choices=RADIUS_SCALES,
        default="physical",
        help="regime rule for the hard-core lower bound",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="d2dcache", description="Cache placement experiments for D2D networks."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("table2", parents=[common], help="two-file example table")
    p.set_defaults(radius_scale="quartic")

    p = sub.add_parser("sweep", parents=[common], help="hit probability versus one parameter")
    p.add_argument("--parameter", required=True, choices=("intensity", "d2d_radius", "cache_size"))
    p.add_argument("--values", required=True, type=_float_list)

    p = sub.add_parser("utilization", parents=[common], help="cache utilization versus radius")
    p.add_argument("--radii", required=True, type=_float_list, help="D2D radii")
    p.add_argument("--intensities", type=_float_list, help="cache intensities, one curve each")

    p = sub.add_parser("radii", parents=[common], help="hard-core radii versus caching probability")
    p.add_argument("--cache-sizes", type=_int_list, default=[1, 10, 50])

    p = sub.add_parser("simulate", parents=[common], help="analytic and MC hit for one scenario")
    p.add_argument("--dump", help="write one placed realization per strategy to this CSV prefix")
    return parser


def _scenario(args) -> ScenarioConfig:
    overrides = {"seed": args.seed}
    if args.scenario:
        return load_scenario(args.scenario, **overrides)
    return ScenarioConfig(**{k: v for k, v in overrides.items() if v is not None})


def _spec(args, config, sweep=None, intensities=None) -> ExperimentSpec:
    outputs = ("analytic", "monte_carlo") if args.replications > 0 else ("analytic",)
    return ExperimentSpec(
        scenario=config,
        sweep=sweep,
        strategies=tuple(args.strategies),
        replications=args.replications,
        outputs=outputs,
        radius_scale=args.radius_scale,
        full_cache_blocks=args.full_cache_blocks,
        workers=args.workers,
        intensities=tuple(intensities) if intensities else None,
    )


@contextlib.contextmanager
def _output(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", newline="") as handle:
            yield handle


def _dump_realizations(args, config, prefix):
    from .experiments import policy_and_bounds
    from .simulator import PATTERN_STREAM, place, replication_rng, sample_ppp, write_realization

    pop = zipf_pmf(config.catalog_size, config.zipf_exponent)
    for kind in args.strategies:
        policy, _ = policy_and_bounds(config, pop, kind, args.radius_scale)
        rng = replication_rng(config.seed, PATTERN_STREAM, 0)
        pattern = place(sample_ppp(config, rng), policy, pop, rng, args.full_cache_blocks)
        with open(f"{prefix}_{kind.value}.csv", "w", newline="") as handle:
            write_realization(pattern, handle)


def run(args) -> int:
    config = _scenario(args)
    if args.command == "table2":
        rows = run_table2(radius_scale=args.radius_scale)
        with _output(args.out) as handle:
            write_csv(rows, TABLE2_COLUMNS, handle)
        bad = table2_mismatches(rows)
        for r, column, got, want in bad:
            log.warning("row R=%.6g: %s = %.6g, reference %.6g", r, column, got, want)
        return EXIT_MISMATCH if bad else EXIT_OK
    if args.command == "sweep":
        if args.parameter == "cache_size" and any(v != int(v) for v in args.values):
            raise ConfigError("cache_size values must be integers")
        rows = run_sweep(_spec(args, config, (args.parameter, args.values)))
        columns = SWEEP_COLUMNS
    elif args.command == "utilization":
        rows = run_utilization(_spec(args, config, ("d2d_radius", args.radii), args.intensities))
        columns = UTILIZATION_COLUMNS
    elif args.command == "radii":
        rows = run_radii_profile(_spec(args, config), args.cache_sizes)
        columns = RADII_COLUMNS
    else:
        rows = run_sweep(_spec(args, config))
        columns = SWEEP_COLUMNS
        if args.dump:
            _dump_realizations(args, config, args.dump)
    with _output(args.out) as handle:
        write_csv(rows, columns, handle)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    logging.captureWarnings(True)
    if not args.verbose:
        warnings.simplefilter("ignore", DiagnosticWarning)
    if args.replications < 0 or args.workers < 1:
        log.error("replications must be >= 0 and workers >= 1")
        return EXIT_CONFIG
    try:
        return run(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except SolverError as exc:
        log.error("solver error: %s", exc)
        return EXIT_SOLVER
    except D2DCacheError as exc:
        log.error("%s", exc)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
