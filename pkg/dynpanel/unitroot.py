"""
Unit-root and residual cointegration tests for panels.

Individual augmented Dickey-Fuller regressions feed a pooled Levin-Lin
statistic and the IPS t-bar statistic. Null moments of the individual
t-statistic come from seeded simulation rather than published tables.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats

from dynpanel.exceptions import (
    DegenerateVariance,
    MissingMoments,
    RankDeficient,
    TooFewObservations,
    UsageError,
    handle_linalg_errors,
)
from dynpanel.kernel import least_squares
from dynpanel.panel import ModelSpec, PanelDataset, Series

logger = logging.getLogger(__name__)

Deterministic = Literal["none", "intercept", "intercept_and_trend"]

_DETERMINISTIC_CODES = {"none": 0, "intercept": 1, "intercept_and_trend": 2}
MOMENT_COLUMNS = ["T", "deterministic", "lags", "source", "mean", "variance", "replications", "seed"]
SERIES_SOURCE = "series"
BUNDLED_MOMENTS = Path(__file__).parent / "data" / "adf_moments.csv"


class ADFSpec(BaseModel):
    """Deterministic terms and lag order of an augmented Dickey-Fuller regression."""

    model_config = ConfigDict(frozen=True)

    deterministic: Deterministic = "intercept"
    lags: Union[int, Literal["auto"]] = Field(default=0)
    max_lags: Optional[int] = Field(default=None, ge=0)
    criterion: Literal["aic", "bic"] = "aic"

    def lag_orders(self, n_periods: int) -> list[int]:
        """Lag orders a regression on ``n_periods`` values may use."""
        if self.lags == "auto":
            return list(range(0, self.auto_max_lag(n_periods) + 1))
        return [int(self.lags)]

    def auto_max_lag(self, n_periods: int) -> int:
        if self.max_lags is not None:
            return self.max_lags
        return max(n_periods // 3 - 1, 0)


@dataclass(frozen=True)
class ADFResult:
    """Individual ADF regression of one series."""

    entity: str
    t_statistic: float
    """t-ratio on the lagged level (tests rho = 1)."""

    rho: float
    lag_coefficients: tuple[float, ...]
    residual_variance: float
    n_obs: int
    lags: int
    deterministic: Deterministic
    n_periods: int


@dataclass(frozen=True)
class MomentTable:
    """Simulated null mean and variance of the ADF t-statistic."""

    entries: dict[tuple[int, str, int], tuple[float, float]]
    replications: int
    seed: int
    source: str = SERIES_SOURCE

    def covers(self, n_periods: int, deterministic: str, lags: int) -> bool:
        return (n_periods, deterministic, lags) in self.entries

    def lookup(self, n_periods: int, deterministic: str, lags: int) -> tuple[float, float]:
        key = (n_periods, deterministic, lags)
        if key not in self.entries:
            raise MissingMoments(
                f"Moment table ({self.source}) has no entry for T={n_periods}, "
                f"deterministic={deterministic}, lags={lags}"
            )
        return self.entries[key]

    def to_frame(self) -> pd.DataFrame:
        rows = [
            (t, det, lags, self.source, mean, var, self.replications, self.seed)
            for (t, det, lags), (mean, var) in sorted(self.entries.items())
        ]
        return pd.DataFrame(rows, columns=MOMENT_COLUMNS)

    def save(self, path: Union[str, Path]) -> Path:
        frame = self.to_frame()
        for column in ("mean", "variance"):
            frame[column] = [repr(float(v)) for v in frame[column]]
        path = Path(path)
        frame.to_csv(path, index=False, lineterminator="\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MomentTable":
        try:
            frame = pd.read_csv(
                path,
                dtype={"deterministic": str, "source": str},
                float_precision="round_trip",
                comment="#",
            )
        except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise MissingMoments(f"Cannot read moment table {path}: {e}") from e
        missing = [c for c in MOMENT_COLUMNS if c not in frame.columns]
        if missing:
            raise MissingMoments(f"Moment table {path} lacks columns: {', '.join(missing)}")
        if frame.empty:
            raise MissingMoments(f"Moment table {path} is empty")
        if frame["source"].nunique() != 1:
            raise MissingMoments(f"Moment table {path} mixes sources {sorted(frame['source'].unique())}")
        entries = {
            (int(r.T), str(r.deterministic), int(r.lags)): (float(r.mean), float(r.variance))
            for r in frame.itertuples(index=False)
        }
        return cls(
            entries=entries,
            replications=int(frame["replications"].iloc[0]),
            seed=int(frame["seed"].iloc[0]),
            source=str(frame["source"].iloc[0]),
        )

    @classmethod
    def bundled(cls) -> "MomentTable":
        """
        Series moments shipped with the package.

        T = 5..30, all three deterministic specifications, lags 0-2, 50,000
        replications. Entries whose ADF regression keeps only two residual degrees
        of freedom (T=5 with an intercept, no lags) estimate a variance that does
        not exist in the population and change from seed to seed.
        """
        return cls.load(BUNDLED_MOMENTS)


@dataclass(frozen=True)
class LevinLinNull:
    """Sorted simulated draws of the pooled Levin-Lin t-statistic under a unit root."""

    n_entities: int
    n_periods: int
    draws: np.ndarray = field(repr=False)
    replications: int = 0
    seed: int = 0

    def p_value(self, statistic: float) -> float:
        """Left-tail empirical p-value ``(1 + #{draws <= s}) / (R + 1)``."""
        below = int(np.searchsorted(self.draws, statistic, side="right"))
        return (1 + below) / (len(self.draws) + 1)


@dataclass
class PanelURResult:
    """Panel unit-root (or residual cointegration) test outcome."""

    variable: str
    test: Literal["levin_lin", "ips", "cointegration"]
    entity_results: list[ADFResult]
    ll_statistic: Optional[float] = None
    ll_rho: Optional[float] = None
    ll_p_value: Optional[float] = None
    ips_tbar: Optional[float] = None
    ips_statistic: Optional[float] = None
    ips_p_value: Optional[float] = None
    reference: str = "standard normal (left tail)"
    note: str = ""

    @property
    def statistic(self) -> float:
        return self.ll_statistic if self.test == "levin_lin" else self.ips_statistic

    @property
    def p_value(self) -> Optional[float]:
        return self.ll_p_value if self.test == "levin_lin" else self.ips_p_value

    @property
    def p_values(self) -> dict[str, Optional[float]]:
        return {"levin_lin": self.ll_p_value, "ips": self.ips_p_value}


def residual_source(n_regressors: int, intercept: bool) -> str:
    """Source label of a moment table simulated on cointegrating-regression residuals."""
    return f"residuals(k={n_regressors},intercept={str(intercept).lower()})"


def _adf_arrays(values: np.ndarray, lags: int, deterministic: str) -> tuple[np.ndarray, np.ndarray]:
    """
    Regressors and target of the ADF regression for (R, T) stacked series.

    Rows are periods ``lags + 1 .. T - 1``. Columns: lagged level, ``lags`` lagged
    differences, then intercept and trend as requested.
    """
    n_series, n_periods = values.shape
    diffs = np.diff(values, axis=1)
    n = n_periods - 1 - lags
    columns = [values[:, lags : n_periods - 1]]
    columns += [diffs[:, lags - j : n_periods - 1 - j] for j in range(1, lags + 1)]
    if deterministic in ("intercept", "intercept_and_trend"):
        columns.append(np.ones((n_series, n)))
    if deterministic == "intercept_and_trend":
        columns.append(np.broadcast_to(np.arange(1.0, n + 1.0), (n_series, n)))
    return np.stack(columns, axis=2), diffs[:, lags:]


def _adf_names(lags: int, deterministic: str) -> list[str]:
    names = ["L1.level"] + [f"L{j}.diff" for j in range(1, lags + 1)]
    if deterministic in ("intercept", "intercept_and_trend"):
        names.append("const")
    if deterministic == "intercept_and_trend":
        names.append("trend")
    return names


def _fit_adf(series: Series, lags: int, deterministic: str):
    if len(series) < lags + 4:
        raise TooFewObservations(
            f"ADF with {lags} lag(s) needs at least {lags + 4} periods, "
            f"entity {series.entity} has {len(series)}"
        )
    x, target = _adf_arrays(series.values[None, :], lags, deterministic)
    try:
        fit = least_squares(x[0], target[0], _adf_names(lags, deterministic))
    except RankDeficient as e:
        raise RankDeficient(e.columns, f"Rank-deficient ADF regression for entity {series.entity}") from e
    except TooFewObservations as e:
        raise TooFewObservations(f"ADF regression for entity {series.entity}: {e}") from e
    tss = float(target[0] @ target[0])
    if tss == 0.0 or fit.ssr <= 1e-20 * tss:
        raise DegenerateVariance(f"ADF regression for entity {series.entity} has zero residual variance")
    return fit, x[0], target[0]


def _select_lags(series: Series, spec: ADFSpec) -> int:
    orders = spec.lag_orders(len(series))
    if len(orders) == 1:
        return orders[0]
    p_max = orders[-1]
    if len(series) < p_max + 4:
        raise TooFewObservations(
            f"Automatic lag search up to {p_max} needs {p_max + 4} periods, entity {series.entity} "
            f"has {len(series)}"
        )
    n_common = len(series) - 1 - p_max
    best, best_ic = 0, math.inf
    for p in orders:
        x, target = _adf_arrays(series.values[None, :], p, spec.deterministic)
        x, target = x[0, -n_common:], target[0, -n_common:]
        try:
            fit = least_squares(x, target)
        except (RankDeficient, TooFewObservations):
            logger.debug(f"lag order {p} skipped for entity {series.entity}")
            continue
        if fit.ssr <= 0.0:
            continue
        penalty = 2.0 if spec.criterion == "aic" else math.log(n_common)
        ic = n_common * math.log(fit.ssr / n_common) + penalty * x.shape[1]
        if ic < best_ic:
            best, best_ic = p, ic
    return best


def adf_regression(series: Series, spec: ADFSpec) -> ADFResult:
    """
    Augmented Dickey-Fuller regression of ``dy_t`` on ``y_{t-1}``, lagged
    differences and deterministic terms.

    Raises:
        TooFewObservations: If ``T < p + 4``.
        DegenerateVariance: If the residuals are identically zero.
        RankDeficient: If the regressors are collinear.
    """
    lags = _select_lags(series, spec)
    fit, _, _ = _fit_adf(series, lags, spec.deterministic)
    gamma = float(fit.params[0])
    return ADFResult(
        entity=series.entity,
        t_statistic=gamma / math.sqrt(fit.covariance[0, 0]),
        rho=1.0 + gamma,
        lag_coefficients=tuple(float(v) for v in fit.params[1 : 1 + lags]),
        residual_variance=fit.sigma2,
        n_obs=len(fit.residuals),
        lags=lags,
        deterministic=spec.deterministic,
        n_periods=len(series),
    )


def _levin_lin(series_list: Sequence[Series], spec: ADFSpec) -> tuple[float, float, list[ADFResult]]:
    """Pooled t-statistic and rho after partialling out entity-specific terms."""
    numerator = denominator = 0.0
    pieces = []
    df = 0
    results = []
    for series in series_list:
        result = adf_regression(series, spec)
        fit, x, target = _fit_adf(series, result.lags, spec.deterministic)
        others = x[:, 1:]
        level = x[:, 0]
        if others.shape[1]:
            target = least_squares(others, target).residuals
            level = least_squares(others, level).residuals
        scale = math.sqrt(fit.sigma2)
        target, level = target / scale, level / scale
        numerator += float(level @ target)
        denominator += float(level @ level)
        pieces.append((level, target))
        df += len(target) - others.shape[1]
        results.append(result)
    df -= 1
    gamma = numerator / denominator
    ssr = sum(float(np.sum((t - gamma * v) ** 2)) for v, t in pieces)
    statistic = gamma / math.sqrt(ssr / df / denominator)
    return statistic, 1.0 + gamma, results


def levin_lin_test(
    dataset: PanelDataset, variable: str, spec: ADFSpec, null: Optional[LevinLinNull] = None
) -> PanelURResult:
    """
    Levin-Lin pooled unit-root test with a homogeneous autoregressive root.

    Each entity's lagged differences and deterministic terms are partialled out
    of ``dy_t`` and ``y_{t-1}``; both are scaled by the entity's ADF residual
    standard deviation and pooled into one regression. The reported statistic is
    the pooled t-ratio; its p-value comes from ``null`` (a simulated null
    distribution) when supplied.
    """
    statistic, rho, results = _levin_lin(list(dataset.iter_series(variable)), spec)
    p_value = None
    note = "p-value requires a simulated null distribution"
    if null is not None:
        if (null.n_entities, null.n_periods) != (dataset.n_entities, dataset.n_periods):
            raise MissingMoments(
                f"Levin-Lin null simulated for N={null.n_entities}, T={null.n_periods}; "
                f"panel is N={dataset.n_entities}, T={dataset.n_periods}"
            )
        p_value = null.p_value(statistic)
        note = f"p-value from {len(null.draws)} simulated unit-root panels"
    return PanelURResult(
        variable=variable,
        test="levin_lin",
        entity_results=results,
        ll_statistic=statistic,
        ll_rho=rho,
        ll_p_value=p_value,
        reference="simulated null (left tail)",
        note=note,
    )


def _ips(series_list: Iterable[Series], spec: ADFSpec, moments: MomentTable) -> tuple[float, float, list]:
    results = [adf_regression(series, spec) for series in series_list]
    looked_up = [moments.lookup(r.n_periods, r.deterministic, r.lags) for r in results]
    n = len(results)
    tbar = float(np.mean([r.t_statistic for r in results]))
    mean = float(np.mean([m for m, _ in looked_up]))
    variance = float(np.mean([v for _, v in looked_up]))
    statistic = math.sqrt(n) * (tbar - mean) / math.sqrt(variance)
    return tbar, statistic, results


def ips_tbar_test(dataset: PanelDataset, variable: str, spec: ADFSpec, moments: MomentTable) -> PanelURResult:
    """
    Im-Pesaran-Shin t-bar test.

    ``t_IPS = sqrt(N) (tbar - E) / sqrt(Var)`` where ``E`` and ``Var`` average the
    simulated null moments over the entities' (T, p_i). Rejects the unit root for
    large negative values.

    Raises:
        MissingMoments: If the table lacks an entry needed by some entity.
    """
    if dataset.n_entities < 1:
        raise TooFewObservations("IPS test needs at least one entity")
    if moments.source != SERIES_SOURCE:
        raise MissingMoments(f"IPS test needs a '{SERIES_SOURCE}' moment table, got '{moments.source}'")
    tbar, statistic, results = _ips(dataset.iter_series(variable), spec, moments)
    return PanelURResult(
        variable=variable,
        test="ips",
        entity_results=results,
        ips_tbar=tbar,
        ips_statistic=statistic,
        ips_p_value=float(stats.norm.cdf(statistic)),
    )


def residual_cointegration_test(
    dataset: PanelDataset,
    spec: ModelSpec,
    moments: MomentTable,
    adf_spec: Optional[ADFSpec] = None,
) -> PanelURResult:
    """
    Residual-based panel cointegration test.

    Fits the static levels regression of ``spec`` entity by entity and applies
    the IPS t-bar machinery to the residual series. ``moments`` must be simulated
    on residuals of the same regression form; rejecting the residual unit root
    indicates cointegration.

    Raises:
        DegenerateVariance: If an entity's residuals are identically zero
            (trivially cointegrated).
    """
    adf_spec = adf_spec or ADFSpec(deterministic="none", lags=0)
    if spec.ar_order != 0:
        raise UsageError("Cointegration test needs a static levels regression (ar_order = 0)")
    if not spec.exogenous:
        raise UsageError("Cointegration test needs at least one regressor")
    expected = residual_source(len(spec.exogenous), spec.intercept)
    if moments.source != expected:
        raise MissingMoments(f"Cointegration test needs a '{expected}' moment table, got '{moments.source}'")
    panel = dataset.select(spec.variables)

    residual_series = []
    for entity in panel.entities:
        y = panel.series(spec.dependent, entity).values
        x = np.column_stack([panel.series(name, entity).values for name in spec.exogenous])
        if spec.intercept:
            x = np.column_stack([x, np.ones(panel.n_periods)])
        fit = least_squares(x, y, spec.coefficient_names())
        scale = float(np.abs(y).max(initial=0.0))
        if float(np.abs(fit.residuals).max(initial=0.0)) <= 1e-10 * max(scale, 1e-300):
            raise DegenerateVariance(
                f"Residuals of entity {entity} are identically zero: trivially cointegrated"
            )
        residual_series.append(Series(entity, fit.residuals))

    tbar, statistic, results = _ips(residual_series, adf_spec, moments)
    return PanelURResult(
        variable=spec.dependent,
        test="cointegration",
        entity_results=results,
        ips_tbar=tbar,
        ips_statistic=statistic,
        ips_p_value=float(stats.norm.cdf(statistic)),
        note="null: no cointegration (unit root in residuals)",
    )


@handle_linalg_errors("batched ADF")
def _batched_tstat(values: np.ndarray, lags: int, deterministic: str) -> np.ndarray:
    """ADF t-statistics of (R, T) stacked series through batched QR."""
    x, target = _adf_arrays(values, lags, deterministic)
    n, k = x.shape[1], x.shape[2]
    q, r = np.linalg.qr(x)
    coef = np.linalg.solve(r, np.einsum("rnk,rn->rk", q, target)[..., None])[..., 0]
    resid = target - np.einsum("rnk,rk->rn", x, coef)
    sigma2 = np.sum(resid**2, axis=1) / (n - k)
    r_inv = np.linalg.inv(r)
    return coef[:, 0] / np.sqrt(sigma2 * np.sum(r_inv[:, 0, :] ** 2, axis=1))


@handle_linalg_errors("batched residuals")
def _batched_residuals(walks: np.ndarray, intercept: bool) -> np.ndarray:
    """Residuals of regressing walks[:, 0] on walks[:, 1:] (and a constant), per replication."""
    y = walks[:, 0, :]
    x = np.transpose(walks[:, 1:, :], (0, 2, 1))
    if intercept:
        x = np.concatenate([x, np.ones(x.shape[:2] + (1,))], axis=2)
    q, _ = np.linalg.qr(x)
    return y - np.einsum("rnk,rk->rn", q, np.einsum("rnk,rn->rk", q, y))


def _replication_draws(entropy: list[int], replications: int, shape: tuple[int, ...]) -> np.ndarray:
    """One independent substream per replication, stacked along axis 0."""
    children = np.random.SeedSequence(entropy).spawn(replications)
    return np.stack([np.random.default_rng(child).standard_normal(shape) for child in children])


def _moment_entry(task: tuple) -> tuple[tuple[int, str, int], tuple[float, float]]:
    n_periods, deterministic, lags, replications, seed, n_regressors, intercept = task
    entropy = [seed, n_periods, lags, _DETERMINISTIC_CODES[deterministic], n_regressors, int(intercept)]
    shocks = _replication_draws(entropy, replications, (n_regressors + 1, n_periods))
    walks = np.cumsum(shocks, axis=2)
    series = walks[:, 0, :] if n_regressors == 0 else _batched_residuals(walks, intercept)
    tstats = _batched_tstat(series, lags, deterministic)
    return (n_periods, deterministic, lags), (float(np.mean(tstats)), float(np.var(tstats, ddof=1)))


def simulate_moment_table(
    t_values: Sequence[int],
    spec: ADFSpec,
    replications: int,
    seed: int,
    n_regressors: int = 0,
    intercept: bool = True,
    workers: int = 1,
) -> MomentTable:
    """
    Simulate null moments of the ADF t-statistic.

    For every T (and every lag order an ``auto`` search may select) driftless Gaussian
    random walks are generated and the ADF t-statistic is computed. With
    ``n_regressors > 0`` each replication draws ``n_regressors + 1`` independent
    walks, regresses the first on the others (plus a constant if ``intercept``)
    and tests the residuals. Each replication has its own seeded substream, so the
    table does not depend on ``workers``.
    """
    if replications < 2:
        raise UsageError("Moment simulation needs at least 2 replications")
    if replications < 10_000:
        logger.warning(f"Moment table from only {replications} replications")
    tasks = []
    for n_periods in sorted(set(int(t) for t in t_values)):
        for lags in spec.lag_orders(n_periods):
            if n_periods < lags + 4:
                raise TooFewObservations(f"T={n_periods} too short for {lags} ADF lag(s)")
            tasks.append((n_periods, spec.deterministic, lags, replications, seed, n_regressors, intercept))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            entries = dict(executor.map(_moment_entry, tasks))
    else:
        entries = dict(_moment_entry(task) for task in tasks)
    source = SERIES_SOURCE if n_regressors == 0 else residual_source(n_regressors, intercept)
    logger.info(f"Simulated {len(entries)} moment entries ({source}, R={replications}, seed={seed})")
    return MomentTable(entries=entries, replications=replications, seed=seed, source=source)


def simulate_unit_root_panel(
    n_entities: int,
    n_periods: int,
    rho: float,
    seed: Union[int, np.random.SeedSequence],
    variable: str = "y",
) -> PanelDataset:
    """
    Panel of AR(1) series ``y_t = rho y_{t-1} + e_t`` with standard normal shocks.

    Unit-root series start at zero; stationary ones start from the stationary
    distribution.
    """
    rng = np.random.default_rng(seed)
    shocks = rng.standard_normal((n_entities, n_periods))
    values = np.empty_like(shocks)
    if abs(rho) < 1.0:
        values[:, 0] = shocks[:, 0] / math.sqrt(1.0 - rho**2)
    else:
        values[:, 0] = shocks[:, 0]
    for t in range(1, n_periods):
        values[:, t] = rho * values[:, t - 1] + shocks[:, t]
    entities = tuple(f"e{i:03d}" for i in range(n_entities))
    return PanelDataset(entities, tuple(range(1, n_periods + 1)), {variable: values})


def _levin_lin_draw(task: tuple) -> float:
    n_entities, n_periods, spec, child = task
    panel = simulate_unit_root_panel(n_entities, n_periods, 1.0, child)
    statistic, _, _ = _levin_lin(list(panel.iter_series("y")), spec)
    return statistic


def simulate_levin_lin_null(
    n_entities: int, n_periods: int, spec: ADFSpec, replications: int, seed: int, workers: int = 1
) -> LevinLinNull:
    """Seeded null distribution of the pooled Levin-Lin t-statistic for an N x T panel."""
    if replications < 2:
        raise UsageError("Levin-Lin null simulation needs at least 2 replications")
    children = np.random.SeedSequence([seed, n_entities, n_periods]).spawn(replications)
    tasks = [(n_entities, n_periods, spec, child) for child in children]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            chunk = max(1, replications // (4 * workers))
            draws = list(executor.map(_levin_lin_draw, tasks, chunksize=chunk))
    else:
        draws = [_levin_lin_draw(task) for task in tasks]
    return LevinLinNull(
        n_entities=n_entities,
        n_periods=n_periods,
        draws=np.sort(np.asarray(draws)),
        replications=replications,
        seed=seed,
    )
