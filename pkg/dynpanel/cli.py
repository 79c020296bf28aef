#!/usr/bin/env python3
"""Command-line interface for dynamic panel estimation, unit-root testing and simulation."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from dynpanel.exceptions import PanelError, UsageError
from dynpanel.montecarlo import run_experiment, simulate_dgp
from dynpanel.panel import ModelSpec, PanelLayout, load_panel, save_panel
from dynpanel.report import (
    RunReport,
    cointegration_report,
    estimate_report,
    file_digest,
    mc_report,
    moments_report,
    simulate_report,
    unitroot_report,
)
from dynpanel.services import (
    ConfigurationFactory,
    EstimatorRegistry,
    ExperimentRegistry,
    format_validation_error,
)
from dynpanel.unitroot import (
    ADFSpec,
    MomentTable,
    ips_tbar_test,
    levin_lin_test,
    residual_cointegration_test,
    simulate_levin_lin_null,
    simulate_moment_table,
)

logger = logging.getLogger("dynpanel")


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _names(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _lags(value: str):
    if value == "auto":
        return "auto"
    try:
        lags = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"lags must be a non-negative integer or 'auto', got {value!r}")
    if lags < 0:
        raise argparse.ArgumentTypeError("lags must be non-negative")
    return lags


def _periods(value: str) -> list[int]:
    """``5,10,13`` or ``5-13``."""
    try:
        if "-" in value:
            low, high = value.split("-", 1)
            return list(range(int(low), int(high) + 1))
        return [int(v) for v in _names(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid period list {value!r}")


def _add_output_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--format", choices=["json", "table"], default="table", help="Output rendering")
    parser.add_argument("--output", "-o", type=str, help="Write the report to this file instead of stdout")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose (DEBUG) logging")


def _add_input_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--input", "-i", required=True, type=str, help="Long-format panel CSV file")
    parser.add_argument("--entity-column", default="entity", help="Entity identifier column")
    parser.add_argument("--time-column", default="time", help="Integer time column")
    parser.add_argument("--delimiter", default=",", help="Field delimiter")


def _add_adf_options(parser: argparse.ArgumentParser, deterministic: str, lags: str) -> None:
    parser.add_argument(
        "--deterministic",
        choices=["none", "intercept", "intercept_and_trend"],
        default=deterministic,
        help="Deterministic terms of the ADF regressions",
    )
    parser.add_argument("--adf-lags", type=_lags, default=_lags(lags), help="ADF lag order or 'auto'")
    parser.add_argument("--max-lags", type=int, help="Largest lag order searched with 'auto'")
    parser.add_argument("--criterion", choices=["aic", "bic"], default="aic", help="Lag selection criterion")
    parser.add_argument("--moments", type=str, help="Moment table CSV (default: the bundled series table)")
    parser.add_argument(
        "--moment-replications", type=int, default=10_000, help="Replications when simulating moments"
    )
    parser.add_argument("--seed", type=int, default=0, help="Seed for every simulated quantity")
    parser.add_argument("--threads", type=int, default=1, help="Worker processes for simulations")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="dynpanel",
        description="Dynamic panel estimation, panel unit-root tests and Monte Carlo experiments.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"Built-in experiments: {', '.join(ExperimentRegistry.list_experiments())}",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    estimate = commands.add_parser("estimate", help="Estimate a dynamic panel regression")
    _add_input_options(estimate)
    estimate.add_argument("--dep", required=True, help="Dependent variable")
    estimate.add_argument("--exog", default="", help="Comma-separated exogenous regressors")
    estimate.add_argument("--lags", type=int, default=1, help="Autoregressive order p")
    estimate.add_argument("--method", required=True, choices=EstimatorRegistry.list_methods())
    estimate.add_argument(
        "--transform",
        choices=["first_difference", "orthogonal_deviations"],
        help="Effects-removing transform of the GMM methods",
    )
    estimate.add_argument(
        "--x-policy",
        choices=["strict_iv", "predetermined_iv", "differenced_iv"],
        default="differenced_iv",
        help="Instrumenting of exogenous regressors in GMM",
    )
    estimate.add_argument("--max-lag-depth", type=int, help="Most recent lagged levels kept per GMM block")
    estimate.add_argument("--no-intercept", action="store_true", help="Drop the levels intercept")
    estimate.add_argument(
        "--policy-variable", default="G", help="Coefficient interpreted as complementary or substitution"
    )
    _add_output_options(estimate)

    unitroot = commands.add_parser("unitroot", help="Levin-Lin and IPS panel unit-root tests")
    _add_input_options(unitroot)
    unitroot.add_argument("--variables", required=True, type=_names, help="Comma-separated variables")
    unitroot.add_argument("--tests", type=_names, default=["ll", "ips"], help="Subset of ll,ips")
    unitroot.add_argument(
        "--ll-replications", type=int, default=500, help="Simulated panels for the Levin-Lin p-value"
    )
    _add_adf_options(unitroot, "intercept", "0")
    _add_output_options(unitroot)

    coint = commands.add_parser("coint", help="Residual-based panel cointegration test")
    _add_input_options(coint)
    coint.add_argument("--dep", required=True, help="Dependent variable")
    coint.add_argument("--exog", required=True, help="Comma-separated regressors")
    coint.add_argument("--no-intercept", action="store_true", help="Drop the levels intercept")
    _add_adf_options(coint, "none", "0")
    _add_output_options(coint)

    for name, help_text in (("simulate", "Simulate a panel file"), ("mc", "Run a Monte Carlo experiment")):
        sub = commands.add_parser(name, help=help_text)
        source = sub.add_mutually_exclusive_group(required=True)
        source.add_argument("--config", "-c", type=str, help="Experiment YAML/JSON document")
        source.add_argument("--experiment", "-e", type=str, help="Built-in experiment name")
        sub.add_argument("--seed", type=int, help="Override the configured seed")
        if name == "simulate":
            sub.add_argument("--panel", required=True, type=str, help="Panel CSV file to write")
        else:
            sub.add_argument("--replications", type=int, help="Override the configured replications")
            sub.add_argument("--threads", type=int, help="Worker processes")
            sub.add_argument("--report", type=str, help="Also write the full JSON report document here")
        _add_output_options(sub)

    moments = commands.add_parser("moments", help="Simulate a moment table of the ADF t-statistic")
    moments.add_argument("--periods", "-T", required=True, type=_periods, help="e.g. 5,10,13 or 5-13")
    moments.add_argument(
        "--deterministic", choices=["none", "intercept", "intercept_and_trend"], default="intercept"
    )
    moments.add_argument("--adf-lags", type=_lags, default=0, help="ADF lag order or 'auto'")
    moments.add_argument("--max-lags", type=int, help="Largest lag order with 'auto'")
    moments.add_argument("--replications", type=int, default=10_000)
    moments.add_argument("--seed", type=int, default=0)
    moments.add_argument("--threads", type=int, default=1)
    moments.add_argument("--residuals", type=int, default=0, help="Regressors of a cointegrating regression")
    moments.add_argument("--no-intercept", action="store_true", help="Residual regression without constant")
    moments.add_argument("--table", required=True, type=str, help="Moment table CSV to write")
    _add_output_options(moments)
    return parser


def _load_input(args: argparse.Namespace):
    layout = PanelLayout(
        entity_column=args.entity_column, time_column=args.time_column, delimiter=args.delimiter
    )
    return load_panel(args.input, layout), file_digest(args.input)


def _model_spec(**kwargs) -> ModelSpec:
    try:
        return ModelSpec(**kwargs)
    except ValidationError as e:
        raise UsageError("; ".join(item["msg"] for item in e.errors())) from e


def _adf_spec(args: argparse.Namespace) -> ADFSpec:
    try:
        return ADFSpec(
            deterministic=args.deterministic,
            lags=args.adf_lags,
            max_lags=args.max_lags,
            criterion=getattr(args, "criterion", "aic"),
        )
    except ValidationError as e:
        raise UsageError(format_validation_error(e)) from e


def _moment_table(args, n_periods: int, spec: ADFSpec, n_regressors: int = 0, intercept: bool = True):
    if args.moments:
        return MomentTable.load(args.moments), []
    if n_regressors == 0:
        bundled = MomentTable.bundled()
        if all(bundled.covers(n_periods, spec.deterministic, p) for p in spec.lag_orders(n_periods)):
            logger.info(f"using bundled moment table (R={bundled.replications}, seed {bundled.seed})")
            return bundled, []
    message = (
        f"no moment table covers T={n_periods}; simulating {args.moment_replications} replications "
        f"(seed {args.seed})"
    )
    logger.warning(message)
    table = simulate_moment_table(
        [n_periods], spec, args.moment_replications, args.seed, n_regressors, intercept, args.threads
    )
    return table, [message]


def cmd_estimate(args: argparse.Namespace) -> RunReport:
    dataset, digest = _load_input(args)
    spec = _model_spec(
        dependent=args.dep, ar_order=args.lags, exogenous=args.exog, intercept=not args.no_intercept
    )
    result = EstimatorRegistry.fit(
        args.method,
        dataset,
        spec,
        transform=args.transform,
        x_policy=args.x_policy,
        max_lag_depth=args.max_lag_depth,
    )
    return estimate_report(result, args.argv, digest, args.policy_variable)


def cmd_unitroot(args: argparse.Namespace) -> RunReport:
    unknown = sorted(set(args.tests) - {"ll", "ips"})
    if unknown or not args.tests:
        raise UsageError(f"--tests must be a subset of ll,ips, got {','.join(args.tests)}")
    dataset, digest = _load_input(args)
    dataset = dataset.select(args.variables)
    spec = _adf_spec(args)
    warnings: list[str] = []
    moments = null = None
    if "ips" in args.tests:
        moments, warnings = _moment_table(args, dataset.n_periods, spec)
    if "ll" in args.tests and args.ll_replications > 0:
        null = simulate_levin_lin_null(
            dataset.n_entities, dataset.n_periods, spec, args.ll_replications, args.seed, args.threads
        )
    results = {}
    for variable in args.variables:
        results[variable] = {}
        if "ll" in args.tests:
            results[variable]["levin_lin"] = levin_lin_test(dataset, variable, spec, null)
        if "ips" in args.tests:
            results[variable]["ips"] = ips_tbar_test(dataset, variable, spec, moments)
    return unitroot_report(results, args.argv, digest, warnings)


def cmd_coint(args: argparse.Namespace) -> RunReport:
    dataset, digest = _load_input(args)
    spec = _model_spec(dependent=args.dep, ar_order=0, exogenous=args.exog, intercept=not args.no_intercept)
    adf_spec = _adf_spec(args)
    moments, warnings = _moment_table(args, dataset.n_periods, adf_spec, len(spec.exogenous), spec.intercept)
    result = residual_cointegration_test(dataset, spec, moments, adf_spec)
    return cointegration_report(result, args.argv, digest, warnings)


def _experiment_config(args: argparse.Namespace):
    config = ConfigurationFactory.load_config(args.experiment, args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "replications", None) is not None:
        updates["replications"] = args.replications
    if getattr(args, "threads", None) is not None:
        updates["workers"] = args.threads
    if updates:
        try:
            config = type(config).model_validate({**config.model_dump(), **updates})
        except ValidationError as e:
            raise UsageError(format_validation_error(e)) from e
    digest = file_digest(args.config) if args.config else None
    return config, digest


def cmd_simulate(args: argparse.Namespace) -> RunReport:
    config, _ = _experiment_config(args)
    dataset = simulate_dgp(config)
    output = save_panel(dataset, args.panel)
    return simulate_report(output, dataset.n_entities, dataset.n_periods, args.argv)


def cmd_mc(args: argparse.Namespace) -> RunReport:
    config, digest = _experiment_config(args)
    report = mc_report(run_experiment(config), args.argv, digest)
    if args.report:
        Path(args.report).write_text(report.render("json") + "\n")
    return report


def cmd_moments(args: argparse.Namespace) -> RunReport:
    spec = _adf_spec(args)
    table = simulate_moment_table(
        args.periods, spec, args.replications, args.seed, args.residuals, not args.no_intercept, args.threads
    )
    output = table.save(args.table)
    return moments_report(table, args.argv, output)


COMMANDS = {
    "estimate": cmd_estimate,
    "unitroot": cmd_unitroot,
    "coint": cmd_coint,
    "simulate": cmd_simulate,
    "mc": cmd_mc,
    "moments": cmd_moments,
}


def _emit(report: RunReport, fmt: str, output: Optional[str]) -> None:
    text = report.render(fmt)
    if output:
        Path(output).write_text(text if text.endswith("\n") else text + "\n")
        logger.info(f"Report written to {output}")
    else:
        print(text, end="" if text.endswith("\n") else "\n")


def main(argv: Optional[Sequence[str]] = None) -> None:
    """
    Main entry point of the dynpanel CLI.

    Exit codes: 1 usage errors, 2 data errors, 3 numerical errors.
    """
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv

    logging.basicConfig(format="%(levelname)s: %(message)s")
    logger.setLevel(logging.DEBUG if args.verbose else logging.INFO)

    try:
        report = COMMANDS[args.command](args)
    except PanelError as e:
        logging.error(f"{args.command}: {e}")
        sys.exit(e.exit_code)
    except KeyboardInterrupt:
        logging.error("Interrupted")
        sys.exit(130)
    except Exception as e:
        logging.error(f"{args.command}: unexpected error: {e}")
        logger.debug("Traceback", exc_info=True)
        sys.exit(1)
    _emit(report, args.format, args.output)


if __name__ == "__main__":
    main()
