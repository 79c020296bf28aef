"""Run reports: structured (JSON) and fixed-width table renderings of command results."""

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Optional, Sequence, Union

import numpy as np
from scipy import stats
from tabulate import tabulate

from dynpanel.estimators import EstimateResult
from dynpanel.gmm import GMMResult, TestResult
from dynpanel.montecarlo import MCReport
from dynpanel.unitroot import MomentTable, PanelURResult

OutputFormat = Literal["json", "table"]

TEST_LABELS = {"levin_lin": "Levin-Lin", "ips": "IPS"}
MC_HEADERS = [
    "estimator", "parameter", "true", "mean", "bias", "analytic bias", "RMSE", "MC s.e.", "failures",
]


def file_digest(path: Union[str, Path]) -> str:
    """SHA-256 of a file's content."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return None if math.isnan(value) or math.isinf(value) else value
    if isinstance(value, np.integer):
        return int(value)
    return value


@dataclass
class Table:
    title: str
    headers: list[str]
    rows: list[list[Any]]
    floatfmt: str = ".4f"

    def render(self) -> str:
        body = tabulate(self.rows, headers=self.headers, floatfmt=self.floatfmt, missingval="-")
        return f"{self.title}\n{body}"


@dataclass
class RunReport:
    """Outcome of one command, renderable as JSON or as fixed-width tables."""

    command: list[str]
    results: dict
    tables: list[Table] = field(default_factory=list)
    input_digest: Optional[str] = None
    warnings: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        from dynpanel import __version__

        return _jsonable(
            {
                "version": __version__,
                "command": self.command,
                "input_sha256": self.input_digest,
                "results": self.results,
                "warnings": self.warnings,
                "notes": self.notes,
            }
        )

    def render(self, fmt: OutputFormat = "table") -> str:
        if fmt == "json":
            return json.dumps(self.to_dict(), indent=2)
        blocks = [table.render() for table in self.tables]
        blocks += [f"Note: {note}" for note in self.notes]
        blocks += [f"Warning: {warning}" for warning in self.warnings]
        return "\n\n".join(blocks) + "\n"


def complementarity_note(result: EstimateResult, variable: str) -> Optional[str]:
    """
    Interpretation of the policy coefficient: positive means complementary, negative
    means substitution (crowding out).
    """
    if variable not in result.names:
        return None
    value = result.coefficient(variable)
    dependent = result.spec.dependent
    if value > 0:
        return (
            f"{variable} coefficient {value:+.4f} > 0: complementary; a 1% increase in {variable} "
            f"is associated with a {value:.4f}% increase in {dependent}"
        )
    if value < 0:
        return (
            f"{variable} coefficient {value:+.4f} < 0: substitution (crowding out); a 1% increase in "
            f"{variable} is associated with a {abs(value):.4f}% decrease in {dependent}"
        )
    return f"{variable} coefficient is exactly zero: neither complementary nor substitution"


def _test_dict(test: TestResult) -> dict:
    return {
        "statistic": test.statistic,
        "distribution": test.distribution,
        "df": test.df,
        "p_value": test.p_value,
        "decision": test.decision,
        "note": test.note,
    }


def estimate_report(
    result: EstimateResult,
    command: Sequence[str],
    input_digest: Optional[str] = None,
    policy_variable: Optional[str] = None,
) -> RunReport:
    errors = result.standard_errors
    rows, coefficients = [], {}
    for name in result.names:
        value, se = result.coefficient(name), errors[name]
        z = value / se if se > 0 else math.nan
        p = float(2.0 * stats.norm.sf(abs(z))) if se > 0 else math.nan
        rows.append([name, value, se, z, p])
        coefficients[name] = {"estimate": value, "std_error": se, "z": z, "p_value": p}

    results: dict = {
        "method": result.method,
        "dependent": result.spec.dependent,
        "n_obs": result.n_obs,
        "n_entities": len(result.entities),
        "coefficients": coefficients,
    }
    title = f"{result.method} estimates of {result.spec.dependent} (N obs = {result.n_obs})"
    tables = [Table(title, ["coefficient", "estimate", "std. error", "z", "p-value"], rows)]

    if isinstance(result, GMMResult):
        tests = {}
        if result.sargan is not None:
            tests["sargan"] = _test_dict(result.sargan)
        for order, test in sorted(result.ar_tests.items()):
            tests[f"ar{order}"] = _test_dict(test)
        results.update(
            {
                "transform": result.transform,
                "x_policy": result.x_policy,
                "steps": result.step_count,
                "moment_conditions": result.instruments.moment_count,
                "criterion_value": result.criterion_value,
                "tests": tests,
            }
        )
        test_rows = [
            [name, t["statistic"], t["df"], t["p_value"], t["decision"]] for name, t in tests.items()
        ]
        if test_rows:
            tables.append(
                Table(
                    f"Specification tests ({result.instruments.moment_count} moment conditions)",
                    ["test", "statistic", "df", "p-value", "decision"],
                    test_rows,
                )
            )

    notes = []
    if policy_variable:
        note = complementarity_note(result, policy_variable)
        if note:
            value = result.coefficient(policy_variable)
            interpretation = "complementary" if value > 0 else "substitution" if value < 0 else "neither"
            notes.append(note)
            results["complementarity"] = {
                "variable": policy_variable,
                "coefficient": value,
                "interpretation": interpretation,
            }
    return RunReport(list(command), results, tables, input_digest, list(result.warnings), notes)


def _ur_dict(result: PanelURResult) -> dict:
    return {
        "test": result.test,
        "statistic": result.statistic,
        "p_value": result.p_value,
        "levin_lin_rho": result.ll_rho,
        "ips_tbar": result.ips_tbar,
        "reference": result.reference,
        "note": result.note,
        "entities": [
            {"entity": r.entity, "t_statistic": r.t_statistic, "rho": r.rho, "lags": r.lags, "n_obs": r.n_obs}
            for r in result.entity_results
        ],
    }


def unitroot_report(
    results: dict[str, dict[str, PanelURResult]],
    command: Sequence[str],
    input_digest: Optional[str] = None,
    warnings: Sequence[str] = (),
) -> RunReport:
    """One row per test statistic and one column per variable, three decimals."""
    variables = list(results)
    tests = [t for t in TEST_LABELS if any(t in results[v] for v in variables)]
    statistic_rows = [
        [TEST_LABELS[t]] + [results[v][t].statistic if t in results[v] else None for v in variables]
        for t in tests
    ]
    p_rows = [
        [TEST_LABELS[t]] + [results[v][t].p_value if t in results[v] else None for v in variables]
        for t in tests
    ]
    tables = [
        Table("Unit root tests", ["test"] + variables, statistic_rows, floatfmt=".3f"),
        Table("p-values", ["test"] + variables, p_rows, floatfmt=".3f"),
    ]
    structured = {v: {t: _ur_dict(r) for t, r in per_test.items()} for v, per_test in results.items()}
    return RunReport(list(command), {"unitroot": structured}, tables, input_digest, list(warnings))


def cointegration_report(
    result: PanelURResult,
    command: Sequence[str],
    input_digest: Optional[str] = None,
    warnings: Sequence[str] = (),
) -> RunReport:
    rows = [
        ["t-bar", result.ips_tbar],
        ["IPS statistic", result.ips_statistic],
        ["p-value", result.ips_p_value],
    ]
    decision = "reject" if result.ips_p_value < 0.05 else "do not reject"
    notes = [f"{result.note}; {decision} at 5%"]
    return RunReport(
        list(command),
        {"cointegration": _ur_dict(result)},
        [Table(f"Residual cointegration test ({result.variable})", ["", "value"], rows)],
        input_digest,
        list(warnings),
        notes,
    )


def mc_report(report: MCReport, command: Sequence[str], input_digest: Optional[str] = None) -> RunReport:
    rows = []
    for name, summary in report.estimators.items():
        for parameter, p in summary.parameters.items():
            analytic = summary.analytic_bias if parameter == "L1.y" else None
            rows.append(
                [
                    name,
                    parameter,
                    p.true_value,
                    p.mean_estimate,
                    p.mean_bias,
                    analytic,
                    p.rmse,
                    p.mc_standard_error,
                    summary.failures,
                ]
            )
    tables = [
        Table(
            f"Monte Carlo ({report.config['replications']} replications)",
            MC_HEADERS,
            rows,
        )
    ]
    if report.tests:
        tables.append(
            Table(
                "Rejection rates",
                ["test", "estimator", "1%", "5%", "10%", "mean statistic", "failures"],
                [
                    [name, t.estimator, *(t.rejection_rates[level] for level in sorted(t.rejection_rates)),
                     t.mean_statistic, t.failures]
                    for name, t in report.tests.items()
                ],
            )
        )
    return RunReport(list(command), {"mc": report.to_dict()}, tables, input_digest, list(report.warnings))


def moments_report(table: MomentTable, command: Sequence[str], output: Optional[Path] = None) -> RunReport:
    frame = table.to_frame()
    rows = frame[["T", "deterministic", "lags", "mean", "variance"]].values.tolist()
    results = {
        "source": table.source,
        "replications": table.replications,
        "seed": table.seed,
        "entries": frame.to_dict(orient="records"),
    }
    if output is not None:
        results["output"] = str(output)
    title = f"Simulated ADF t moments ({table.source}, R={table.replications}, seed={table.seed})"
    headers = ["T", "deterministic", "lags", "mean", "variance"]
    return RunReport(list(command), results, [Table(title, headers, rows)])


def simulate_report(output: Path, n_entities: int, n_periods: int, command: Sequence[str]) -> RunReport:
    digest = file_digest(output)
    results = {
        "output": str(output),
        "output_sha256": digest,
        "n_entities": n_entities,
        "n_periods": n_periods,
    }
    rows = [[key, value] for key, value in results.items()]
    return RunReport(list(command), results, [Table("Simulated panel", ["", "value"], rows)])
