"""
Dynamic panel data-generating process, analytic plim biases and the Monte Carlo runner.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from dynpanel.configs import DGPConfig, ExperimentConfig
from dynpanel.exceptions import DegenerateDenominator, InvalidAlpha, InvalidConfig, PanelError
from dynpanel.gmm import GMMResult
from dynpanel.panel import ModelSpec, PanelDataset
from dynpanel.services import EstimatorRegistry

logger = logging.getLogger(__name__)

REJECTION_LEVELS = (0.01, 0.05, 0.10)


def _check_alpha(alpha: float) -> None:
    if not abs(alpha) < 1.0:
        raise InvalidAlpha(f"|alpha| < 1 required, got alpha={alpha}")


def stationary_cov0(alpha: float, sigma_mu2: float) -> float:
    """cov(y_i0, mu_i) under the stationary start: ``sigma_mu^2 / (1 - alpha)``."""
    _check_alpha(alpha)
    return sigma_mu2 / (1.0 - alpha)


def default_var0(alpha: float, sigma_mu2: float, sigma_v2: float, cov0: float) -> float:
    """var(y_i0) when ``y_i0 = (cov0 / sigma_mu^2) mu_i + w_i`` with stationary ``w_i``."""
    base = sigma_v2 / (1.0 - alpha**2)
    if sigma_mu2 == 0.0:
        return base
    return cov0**2 / sigma_mu2 + base


def initial_moments(config: DGPConfig) -> tuple[float, float]:
    """(cov(y_i0, mu_i), var(y_i0)) implied by the initial condition of ``config``."""
    sigma_mu2, sigma_v2 = config.sigma_mu**2, config.sigma_v**2
    if config.init == "fixed_zero":
        return 0.0, 0.0
    if config.init == "stationary":
        cov0 = stationary_cov0(config.alpha, sigma_mu2)
    else:
        cov0 = float(config.cov0)
    return cov0, default_var0(config.alpha, sigma_mu2, sigma_v2, cov0)


def analytic_within_bias(alpha: float, n_periods: int) -> float:
    """
    Probability limit of the within (LSDV) estimator's bias for large N.

    ``num = -A / T^2`` and ``den = (1 - 1/T - 2 alpha A / T^2) / (1 - alpha^2)`` with
    ``A = ((T - 1) - T alpha + alpha^T) / (1 - alpha)^2``; the error variance cancels.
    ``T`` counts the autoregressive equations per entity.
    """
    _check_alpha(alpha)
    if n_periods < 2:
        raise InvalidConfig(f"T >= 2 required, got T={n_periods}")
    t = float(n_periods)
    a = ((t - 1.0) - t * alpha + alpha**n_periods) / (1.0 - alpha) ** 2
    numerator = -a / t**2
    denominator = (1.0 - 1.0 / t - 2.0 * alpha * a / t**2) / (1.0 - alpha**2)
    if denominator <= 0.0:
        raise DegenerateDenominator(f"Within plim denominator is {denominator}")
    return numerator / denominator


def analytic_ols_bias(
    alpha: float,
    sigma_mu2: float,
    sigma_v2: float,
    n_periods: int,
    cov0: float,
    var0: Optional[float] = None,
) -> float:
    """
    Probability limit of the pooled OLS bias with entity effects left in the error.

    Ratio of ``(1/T) sum_t E[y_i,t-1 (mu_i + v_it)]`` to ``(1/T) sum_t E[y_i,t-1^2]``
    with ``y_it`` started from an initial value with covariance ``cov0`` with the
    effect and variance ``var0`` (default: the variance of the initial condition
    ``y_i0 = (cov0 / sigma_mu^2) mu_i + w_i`` with stationary ``w_i``).

    Raises:
        InvalidAlpha: If ``|alpha| >= 1``.
        DegenerateDenominator: If the lagged dependent variable has zero variance.
    """
    _check_alpha(alpha)
    if sigma_mu2 < 0.0 or sigma_v2 < 0.0:
        raise InvalidConfig("variances must be non-negative")
    if var0 is None:
        var0 = default_var0(alpha, sigma_mu2, sigma_v2, cov0)
    t = float(n_periods)
    geometric = (1.0 - alpha**n_periods) / (1.0 - alpha)
    squares = (1.0 - alpha ** (2 * n_periods)) / (1.0 - alpha**2)

    numerator = cov0 * geometric + sigma_mu2 * ((t - 1.0) - t * alpha + alpha**n_periods) / (1.0 - alpha) ** 2
    denominator = (
        var0 * squares
        + sigma_mu2 / (1.0 - alpha) ** 2 * (t - 2.0 * geometric + squares)
        + 2.0 * cov0 / (1.0 - alpha) * (geometric - squares)
        + sigma_v2 * (t - squares) / (1.0 - alpha**2)
    )
    if denominator <= 0.0:
        raise DegenerateDenominator("Lagged dependent variable has zero variance; OLS plim undefined")
    return (numerator / t) / (denominator / t)


def _validate(config: DGPConfig) -> None:
    if not abs(config.alpha) < 1.0:
        raise InvalidConfig(f"alpha: |alpha| < 1 required, got {config.alpha}")
    if config.sigma_mu < 0.0 or config.sigma_v < 0.0:
        raise InvalidConfig("sigma_mu and sigma_v must be non-negative")
    if config.n_entities < 1 or config.n_periods < 2:
        raise InvalidConfig("N >= 1 and T >= 2 required")
    if config.init == "custom" and config.cov0 is None:
        raise InvalidConfig("init: 'custom' requires cov0")


def _errors(rng: np.random.Generator, config: DGPConfig, shape: tuple[int, ...]) -> np.ndarray:
    if config.error_law == "student_t":
        scale = math.sqrt((config.t_df - 2.0) / config.t_df)
        return config.sigma_v * scale * rng.standard_t(config.t_df, size=shape)
    return config.sigma_v * rng.standard_normal(shape)


def simulate_dgp(
    config: DGPConfig, seed: Optional[Union[int, np.random.SeedSequence]] = None
) -> PanelDataset:
    """
    Simulate ``y_it = alpha y_i,t-1 + x_it'beta + mu_i + v_it``.

    The dataset holds ``y`` and ``x1..xk`` for periods ``0..T``, the first column
    being the initial observation. With the stationary start and no regressors
    ``y_i0 = mu_i / (1 - alpha) + w_i`` with ``var(w_i) = sigma_v^2 / (1 - alpha^2)``;
    with regressors the process runs ``burn_in`` extra periods from that start.

    Args:
        config: DGP parameters.
        seed: Overrides ``config.seed`` (Monte Carlo replications pass substreams).
    """
    _validate(config)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    n, t, alpha = config.n_entities, config.n_periods, config.alpha
    beta = np.asarray(config.beta, dtype=np.float64)
    k = len(beta)

    mu = config.sigma_mu * rng.standard_normal(n)
    w = config.sigma_v / math.sqrt(1.0 - alpha**2) * rng.standard_normal(n)
    if config.init == "fixed_zero":
        start = np.zeros(n)
    elif config.init == "stationary":
        start = mu / (1.0 - alpha) + w
    else:
        loading = config.cov0 / config.sigma_mu**2 if config.sigma_mu > 0.0 else 0.0
        start = loading * mu + w

    burn = config.burn_in if (k and config.init == "stationary") else 0
    total = burn + t + 1
    x = np.zeros((k, n, total))
    if k:
        rho, sigma = config.x_process.rho, config.x_process.sigma
        shocks = sigma * rng.standard_normal((k, n, total))
        x[:, :, 0] = shocks[:, :, 0] / math.sqrt(1.0 - rho**2)
        for s in range(1, total):
            x[:, :, s] = rho * x[:, :, s - 1] + shocks[:, :, s]
    v = _errors(rng, config, (n, total))

    y = np.empty((n, total))
    y[:, 0] = start
    for s in range(1, total):
        y[:, s] = alpha * y[:, s - 1] + np.tensordot(beta, x[:, :, s], axes=1) + mu + v[:, s]

    width = len(str(n - 1))
    entities = tuple(f"e{i:0{width}d}" for i in range(n))
    data = {"y": y[:, burn:]}
    data.update({f"x{j + 1}": x[j, :, burn:] for j in range(k)})
    return PanelDataset(entities, tuple(range(t + 1)), data)


def experiment_spec(config: DGPConfig) -> ModelSpec:
    """Regression fitted in every replication: AR(1) in ``y`` on ``x1..xk``."""
    return ModelSpec(dependent="y", ar_order=1, exogenous=[f"x{j + 1}" for j in range(len(config.beta))])


def true_parameters(config: DGPConfig) -> dict[str, float]:
    values = {"L1.y": config.alpha}
    values.update({f"x{j + 1}": float(b) for j, b in enumerate(config.beta)})
    return values


@dataclass
class ReplicationOutcome:
    """Estimates and test statistics of one replication."""

    index: int
    estimates: dict[str, dict[str, float]] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    tests: dict[str, dict[str, float]] = field(default_factory=dict)
    test_failures: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ParameterSummary:
    true_value: float
    mean_estimate: float
    mean_bias: float
    rmse: float
    mc_standard_error: float


@dataclass(frozen=True)
class EstimatorSummary:
    """Bias statistics of one estimator over the successful replications."""

    estimator: str
    replications: int
    failures: int
    parameters: dict[str, ParameterSummary]
    analytic_bias: Optional[float] = None

    @property
    def alpha(self) -> ParameterSummary:
        return self.parameters["L1.y"]

    @property
    def failure_rate(self) -> float:
        total = self.replications + self.failures
        return self.failures / total if total else 0.0


@dataclass(frozen=True)
class TestSummary:
    """Empirical rejection rates of one specification test."""

    __test__ = False

    test: str
    estimator: str
    replications: int
    failures: int
    mean_statistic: float
    rejection_rates: dict[float, float]


@dataclass
class MCReport:
    """Aggregated Monte Carlo results with the config echo and per-replication outcomes."""

    config: dict
    estimators: dict[str, EstimatorSummary]
    tests: dict[str, TestSummary]
    outcomes: list[ReplicationOutcome]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self, include_outcomes: bool = True) -> dict:
        data = {
            "config": self.config,
            "estimators": {name: asdict(s) for name, s in self.estimators.items()},
            "tests": {
                name: {**asdict(s), "rejection_rates": {f"{k:g}": v for k, v in s.rejection_rates.items()}}
                for name, s in self.tests.items()
            },
            "warnings": list(self.warnings),
        }
        if include_outcomes:
            data["outcomes"] = [asdict(o) for o in self.outcomes]
        return data


def _test_values(result: GMMResult, test: str) -> Optional[dict[str, float]]:
    found = result.sargan if test == "sargan" else result.ar_tests.get(int(test[-1]))
    if found is None:
        return None
    return {"statistic": found.statistic, "p_value": found.p_value}


def _run_replication(task: tuple) -> ReplicationOutcome:
    config, index, child, estimators, tests = task
    outcome = ReplicationOutcome(index=index)
    dataset = simulate_dgp(config, seed=child)
    spec = experiment_spec(config)
    fitted = {}
    names = list(estimators)
    if tests and config.test_estimator not in names:
        names.append(config.test_estimator)
    for name in names:
        try:
            fitted[name] = EstimatorRegistry.fit(name, dataset, spec)
        except PanelError as e:
            outcome.failures[name] = f"{type(e).__name__}: {e}"
            continue
        if name in estimators:
            outcome.estimates[name] = {
                key: value for key, value in fitted[name].coefficients.items() if key != "const"
            }
    gmm = fitted.get(config.test_estimator)
    for test in tests:
        values = _test_values(gmm, test) if gmm is not None else None
        if values is None:
            reason = outcome.failures.get(config.test_estimator, "test not computable")
            outcome.test_failures[test] = reason
        else:
            outcome.tests[test] = values
    logger.debug(f"replication {index} done, failures: {sorted(outcome.failures)}")
    return outcome


def _summarize_estimator(
    name: str, outcomes: Sequence[ReplicationOutcome], truth: dict[str, float], analytic: Optional[float]
) -> EstimatorSummary:
    used = [o.estimates[name] for o in outcomes if name in o.estimates]
    failures = sum(1 for o in outcomes if name in o.failures)
    parameters = {}
    for key, true_value in truth.items():
        values = np.array([u[key] for u in used])
        if len(values) == 0:
            parameters[key] = ParameterSummary(true_value, math.nan, math.nan, math.nan, math.nan)
            continue
        errors = values - true_value
        spread = float(np.std(values, ddof=1)) if len(values) > 1 else math.nan
        parameters[key] = ParameterSummary(
            true_value=true_value,
            mean_estimate=float(np.mean(values)),
            mean_bias=float(np.mean(errors)),
            rmse=float(np.sqrt(np.mean(errors**2))),
            mc_standard_error=spread / math.sqrt(len(values)),
        )
    return EstimatorSummary(
        estimator=name,
        replications=len(used),
        failures=failures,
        parameters=parameters,
        analytic_bias=analytic,
    )


def _summarize_test(test: str, estimator: str, outcomes: Sequence[ReplicationOutcome]) -> TestSummary:
    values = [o.tests[test] for o in outcomes if test in o.tests]
    p_values = np.array([v["p_value"] for v in values])
    rates = {
        level: float(np.mean(p_values < level)) if len(values) else math.nan for level in REJECTION_LEVELS
    }
    return TestSummary(
        test=test,
        estimator=estimator,
        replications=len(values),
        failures=len(outcomes) - len(values),
        mean_statistic=float(np.mean([v["statistic"] for v in values])) if values else math.nan,
        rejection_rates=rates,
    )


def analytic_references(config: DGPConfig) -> dict[str, Optional[float]]:
    """Analytic plim biases of the OLS and within estimators (pure AR(1) only)."""
    if config.beta:
        return {"ols": None, "within": None}
    cov0, var0 = initial_moments(config)
    return {
        "ols": analytic_ols_bias(
            config.alpha, config.sigma_mu**2, config.sigma_v**2, config.n_periods, cov0, var0
        ),
        "within": analytic_within_bias(config.alpha, config.n_periods),
    }


def run_experiment(
    config: ExperimentConfig,
    estimators: Optional[Sequence[str]] = None,
    tests: Optional[Sequence[str]] = None,
    replications: Optional[int] = None,
    workers: Optional[int] = None,
) -> MCReport:
    """
    Run a seeded Monte Carlo experiment.

    The root seed spawns one substream per replication index, so the report is
    the same for any number of workers. Estimator failures are counted and
    excluded from the averages.
    """
    updates = {
        key: value
        for key, value in {
            "estimators": list(estimators) if estimators is not None else None,
            "tests": list(tests) if tests is not None else None,
            "replications": replications,
            "workers": workers,
        }.items()
        if value is not None
    }
    if updates:
        config = ExperimentConfig.model_validate({**config.model_dump(), **updates})
    _validate(config)

    children = np.random.SeedSequence(config.seed).spawn(config.replications)
    tasks = [
        (config, index, child, tuple(config.estimators), tuple(config.tests))
        for index, child in enumerate(children)
    ]
    logger.info(
        f"Running {config.replications} replications (N={config.n_entities}, T={config.n_periods}, "
        f"alpha={config.alpha}) on {config.workers} worker(s)"
    )
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as executor:
            chunk = max(1, config.replications // (4 * config.workers))
            outcomes = list(executor.map(_run_replication, tasks, chunksize=chunk))
    else:
        outcomes = [_run_replication(task) for task in tasks]

    truth = true_parameters(config)
    references = analytic_references(config)
    summaries = {
        name: _summarize_estimator(name, outcomes, truth, references.get(name)) for name in config.estimators
    }
    test_summaries = {test: _summarize_test(test, config.test_estimator, outcomes) for test in config.tests}

    warnings = []
    for summary in summaries.values():
        if summary.failures:
            message = (
                f"{summary.estimator}: {summary.failures} of {config.replications} replications failed "
                "and were excluded"
            )
            logger.warning(message)
            warnings.append(message)
    return MCReport(
        config=config.model_dump(mode="json"),
        estimators=summaries,
        tests=test_summaries,
        outcomes=outcomes,
        warnings=warnings,
    )
