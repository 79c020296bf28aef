"""
Arellano-Bond difference GMM.

Instruments are the lagged levels of the dependent variable (block-diagonal per
equation period) plus exogenous-variable instruments chosen by ``x_policy``.
One-step estimates use the fixed H weighting; two-step estimates re-weight with
the outer products of the one-step residual moments.
"""

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
import scipy.linalg
from scipy import stats

from dynpanel.estimators import EstimateResult
from dynpanel.exceptions import (
    DataError,
    DegenerateVariance,
    EmptyInstrumentSet,
    NotApplicable,
    NumericalError,
    RankDeficient,
    SingularWeighting,
    TooFewPeriods,
    UnderIdentified,
    UsageError,
    handle_linalg_errors,
)
from dynpanel.kernel import RANK_TOLERANCE, collinear_columns
from dynpanel.panel import Design, ModelSpec, PanelDataset, build_design

logger = logging.getLogger(__name__)

XPolicy = Literal["strict_iv", "differenced_iv", "predetermined_iv"]
GMMTransform = Literal["first_difference", "orthogonal_deviations"]
Steps = Literal["one", "two"]
OnSingular = Literal["raise", "ridge"]

SIGNIFICANCE = 0.05


@dataclass(frozen=True)
class InstrumentColumn:
    """Provenance of one instrument column."""

    period: int
    """Dataset period of the equation this column instruments."""

    source: str
    """Variable the values come from (``D.x`` / ``FOD.x`` for transformed x)."""

    lag: int
    """Equation period minus source period (0 for transformed x)."""


@dataclass(frozen=True)
class InstrumentMatrix:
    """Stacked per-entity instrument blocks ``Z_i`` of shape (r, m)."""

    z: np.ndarray = field(repr=False)
    columns: tuple[InstrumentColumn, ...]
    row_periods: tuple[int, ...]
    transform: GMMTransform

    @property
    def moment_count(self) -> int:
        return len(self.columns)

    @property
    def n_entities(self) -> int:
        return int(self.z.shape[0])

    @property
    def n_rows(self) -> int:
        return int(self.z.shape[1])

    def block(self, entity_index: int) -> np.ndarray:
        return self.z[entity_index]


@dataclass(frozen=True)
class WeightingMatrix:
    """Moment weighting ``A_N`` and the ridge added to its inverse, if any."""

    a_n: np.ndarray = field(repr=False)
    step: Literal["first", "second"]
    ridge: float = 0.0


@dataclass(frozen=True)
class TestResult:
    """Test statistic with its reference distribution."""

    __test__ = False

    name: str
    statistic: float
    distribution: Literal["chi2", "normal"]
    p_value: float
    df: Optional[int] = None
    note: str = ""

    def reject(self, level: float = SIGNIFICANCE) -> bool:
        return self.p_value < level

    @property
    def decision(self) -> str:
        return "reject H0 at 5%" if self.reject() else "do not reject H0 at 5%"


@dataclass(kw_only=True)
class GMMResult(EstimateResult):
    """Difference GMM estimate with instrument bookkeeping and diagnostics."""

    instruments: InstrumentMatrix
    weighting: WeightingMatrix
    step_count: int
    criterion_value: float
    transform: GMMTransform
    x_policy: XPolicy
    sargan: Optional[TestResult] = None
    ar_tests: dict[int, TestResult] = field(default_factory=dict)
    design: Design = field(repr=False)
    differenced_residuals: np.ndarray = field(repr=False)
    differenced_regressors: np.ndarray = field(repr=False)
    projection: np.ndarray = field(repr=False)
    """``(G'AG)^-1 G'A``: maps the mean moment onto the coefficient error."""

    def criterion_at(self, params: np.ndarray, weighting: WeightingMatrix) -> float:
        """Quadratic moment criterion ``N g(d)' A g(d)`` at arbitrary coefficients."""
        residuals = self.design.y - self.design.x @ np.asarray(params)
        return _criterion(self.instruments, residuals, weighting)


def h_matrix(n_rows: int, transform: GMMTransform = "first_difference") -> np.ndarray:
    """Error covariance pattern of the transformed equations (up to sigma^2)."""
    if transform == "orthogonal_deviations":
        return np.eye(n_rows)
    first = np.zeros(n_rows)
    first[0] = 2.0
    if n_rows > 1:
        first[1] = -1.0
    return scipy.linalg.toeplitz(first)


def _resolve_transform(spec: ModelSpec, transform: Optional[GMMTransform]) -> GMMTransform:
    if transform is not None:
        return transform
    if spec.transform in ("first_difference", "orthogonal_deviations"):
        return spec.transform
    return "first_difference"


def build_instrument_matrix(
    dataset: PanelDataset,
    spec: ModelSpec,
    x_policy: XPolicy = "differenced_iv",
    transform: Optional[GMMTransform] = None,
    max_lag_depth: Optional[int] = None,
) -> InstrumentMatrix:
    """
    Build the block-diagonal instrument matrix.

    Row ``j`` instruments the equation at period position ``t = p + 1 + j`` in first
    differences (``t = p + j`` under forward orthogonal deviations); in both cases
    it holds the levels ``y_0 .. y_{p-1+j}``, i.e. every level lagged at least two
    periods (one under deviations). Exogenous variables add:

    - ``strict_iv``: all levels ``x_0 .. x_{T-1}`` in every block;
    - ``predetermined_iv``: levels up to ``t - 1`` (``t`` under deviations);
    - ``differenced_iv``: the transformed ``x`` of each row in its own column.

    Args:
        max_lag_depth: Keep only this many of the most recent dependent-variable
            levels per block; ``None`` keeps all.

    Raises:
        TooFewPeriods: If ``T < p + 2``.
        EmptyInstrumentSet: If no instrument column remains.
    """
    transform = _resolve_transform(spec, transform)
    p = spec.ar_order
    if p < 1:
        raise UsageError("Difference GMM requires at least one autoregressive lag")
    dataset.require(spec.variables)
    n_periods = dataset.n_periods
    if n_periods < p + 2:
        raise TooFewPeriods(f"Difference GMM needs T >= {p + 2}, got T={n_periods}")
    if max_lag_depth is not None and max_lag_depth < 0:
        raise UsageError("max_lag_depth must be non-negative")

    n_rows = n_periods - p - 1
    shift = 1 if transform == "first_difference" else 0
    row_positions = [p + shift + j for j in range(n_rows)]

    # (row, source matrix, source column or None for transformed x, InstrumentColumn)
    plan: list[tuple[int, str, Optional[int], InstrumentColumn]] = []
    for j, t in enumerate(row_positions):
        sources = list(range(0, p + j))
        if max_lag_depth is not None:
            sources = sources[len(sources) - min(max_lag_depth, len(sources)) :]
        for s in sources:
            plan.append((j, spec.dependent, s, InstrumentColumn(dataset.periods[t], spec.dependent, t - s)))
        for name in spec.exogenous:
            if x_policy == "strict_iv":
                x_sources = range(n_periods)
            elif x_policy == "predetermined_iv":
                x_sources = range(0, t + 1 - shift)
            else:
                continue
            for s in x_sources:
                plan.append((j, name, s, InstrumentColumn(dataset.periods[t], name, t - s)))
    if x_policy == "differenced_iv":
        prefix = "D." if transform == "first_difference" else "FOD."
        for name in spec.exogenous:
            for j, t in enumerate(row_positions):
                plan.append((j, name, None, InstrumentColumn(dataset.periods[t], prefix + name, 0)))

    if not plan:
        raise EmptyInstrumentSet("No instrument columns available for this specification")

    transformed = None
    if x_policy == "differenced_iv" and spec.exogenous:
        design = build_design(dataset, spec, transform=transform)
        transformed = {name: design.x[:, :, p + i] for i, name in enumerate(spec.exogenous)}

    z = np.zeros((dataset.n_entities, n_rows, len(plan)))
    for c, (j, name, s, _) in enumerate(plan):
        if s is None:
            z[:, j, c] = transformed[name][:, j]
        else:
            z[:, j, c] = dataset.matrix(name)[:, s]
    logger.debug(f"instrument matrix: {n_rows} rows, {len(plan)} columns ({x_policy}, {transform})")
    return InstrumentMatrix(
        z=z,
        columns=tuple(entry[3] for entry in plan),
        row_periods=tuple(dataset.periods[t] for t in row_positions),
        transform=transform,
    )


@handle_linalg_errors("weighting matrix")
def _invert_middle(middle: np.ndarray, step: str, on_singular: OnSingular) -> WeightingMatrix:
    middle = 0.5 * (middle + middle.T)
    m = middle.shape[0]
    eigenvalues, vectors = np.linalg.eigh(middle)
    largest = eigenvalues[-1]
    ridge = 0.0
    if largest <= 0.0 or eigenvalues[0] <= RANK_TOLERANCE * largest:
        trace = float(np.trace(middle))
        if on_singular != "ridge" or trace <= 0.0:
            raise SingularWeighting(
                f"{step}-step weighting is singular (smallest eigenvalue {eigenvalues[0]:.3e}, m={m})"
            )
        ridge = RANK_TOLERANCE * trace / m
        logger.warning(f"{step}-step weighting near-singular; adding ridge {ridge:.3e} * I")
        eigenvalues, vectors = np.linalg.eigh(middle + ridge * np.eye(m))
        if eigenvalues[0] <= 0.0:
            raise SingularWeighting(f"{step}-step weighting is not positive definite after ridge")
    a_n = (vectors / eigenvalues) @ vectors.T
    return WeightingMatrix(a_n=0.5 * (a_n + a_n.T), step=step, ridge=ridge)


def first_step_weighting(instruments: InstrumentMatrix, on_singular: OnSingular = "raise") -> WeightingMatrix:
    """
    ``A_N = (N^-1 sum_i Z_i' H Z_i)^-1``.

    ``H`` is the tridiagonal (2, -1) matrix for first differences and the identity
    for forward orthogonal deviations.

    Raises:
        SingularWeighting: If the middle matrix is singular and ``on_singular`` is
            ``"raise"``; with ``"ridge"`` a ridge of ``1e-10 * trace / m`` is added.
    """
    z = instruments.z
    h = h_matrix(instruments.n_rows, instruments.transform)
    middle = np.einsum("irm,rs,isn->mn", z, h, z) / instruments.n_entities
    return _invert_middle(middle, "first", on_singular)


def second_step_weighting(
    instruments: InstrumentMatrix, first_step_residuals: np.ndarray, on_singular: OnSingular = "raise"
) -> WeightingMatrix:
    """``A_N = (N^-1 sum_i Z_i' v_i v_i' Z_i)^-1`` from (N, r) first-step residuals."""
    residuals = np.asarray(first_step_residuals, dtype=np.float64)
    if residuals.shape != instruments.z.shape[:2]:
        raise DataError(
            f"Residuals of shape {residuals.shape} do not match instruments {instruments.z.shape[:2]}"
        )
    moments = np.einsum("irm,ir->im", instruments.z, residuals)
    middle = moments.T @ moments / instruments.n_entities
    return _invert_middle(middle, "second", on_singular)


def _criterion(instruments: InstrumentMatrix, residuals: np.ndarray, weighting: WeightingMatrix) -> float:
    g = np.einsum("irm,ir->m", instruments.z, residuals) / instruments.n_entities
    return float(instruments.n_entities * g @ weighting.a_n @ g)


@handle_linalg_errors("GMM solve")
def _solve(
    jacobian: np.ndarray, moment: np.ndarray, weighting: WeightingMatrix, names: tuple[str, ...]
) -> tuple[np.ndarray, np.ndarray]:
    """Return the minimiser of ``(g - G d)' A (g - G d)`` and ``(G'AG)^-1``."""
    root = np.linalg.cholesky(weighting.a_n)
    u, singular, vt = np.linalg.svd(root.T @ jacobian, full_matrices=False)
    if singular[0] == 0.0 or singular[-1] <= RANK_TOLERANCE * singular[0]:
        raise RankDeficient(collinear_columns(vt, singular, names))
    params = vt.T @ ((u.T @ (root.T @ moment)) / singular)
    bread = (vt.T / singular**2) @ vt
    return params, bread


def gmm_estimate(
    dataset: PanelDataset,
    spec: ModelSpec,
    steps: Steps = "two",
    transform: Optional[GMMTransform] = None,
    x_policy: XPolicy = "differenced_iv",
    max_lag_depth: Optional[int] = None,
) -> GMMResult:
    """
    Arellano-Bond difference GMM.

    Minimises ``N g(d)' A_N g(d)`` with ``g(d) = N^-1 sum_i Z_i'(y*_i - W*_i d)``.
    The one-step covariance is the robust sandwich; the two-step covariance is
    ``(G'A_N G)^-1 / N`` without small-sample correction. Sargan and AR(1)/AR(2)
    tests are attached when computable; otherwise the reason is recorded in
    ``warnings``.

    Raises:
        UnderIdentified: If there are fewer moments than coefficients.
        SingularWeighting: If a weighting matrix cannot be formed even with a ridge.
        RankDeficient: If the weighted cross-moment matrix is singular.
    """
    transform = _resolve_transform(spec, transform)
    if steps not in ("one", "two"):
        raise UsageError(f"steps must be 'one' or 'two', got {steps!r}")
    spec = spec.model_copy(update={"transform": transform})
    instruments = build_instrument_matrix(dataset, spec, x_policy, transform, max_lag_depth)
    design = build_design(dataset, spec, transform=transform)
    n = dataset.n_entities
    k = design.x.shape[2]
    m = instruments.moment_count
    if m < k:
        raise UnderIdentified(f"{m} moment conditions for {k} coefficients")

    notes: list[str] = []
    if n <= m:
        message = f"instrument proliferation: N={n} entities for m={m} moment conditions"
        logger.warning(message)
        notes.append(message)

    z = instruments.z
    jacobian = np.einsum("irm,irk->mk", z, design.x) / n
    moment = np.einsum("irm,ir->m", z, design.y) / n

    weighting = first_step_weighting(instruments, on_singular="ridge")
    params, bread = _solve(jacobian, moment, weighting, design.names)
    residuals = design.y - design.x @ params
    step_count = 1
    if weighting.ridge:
        notes.append(f"ridge {weighting.ridge:.3e} added to first-step weighting")
    if steps == "two":
        weighting = second_step_weighting(instruments, residuals, on_singular="ridge")
        params, bread = _solve(jacobian, moment, weighting, design.names)
        residuals = design.y - design.x @ params
        step_count = 2
        if weighting.ridge:
            notes.append(f"ridge {weighting.ridge:.3e} added to second-step weighting")

    projection = bread @ jacobian.T @ weighting.a_n
    if step_count == 1:
        moments_i = np.einsum("irm,ir->im", z, residuals)
        spread = moments_i.T @ moments_i / n
        covariance = projection @ spread @ projection.T / n
    else:
        covariance = bread / n
    covariance = 0.5 * (covariance + covariance.T)

    fd_design = design
    if transform != "first_difference":
        fd_design = build_design(dataset, spec, transform="first_difference")
    result = GMMResult(
        names=design.names,
        params=params,
        covariance=covariance,
        residuals=residuals,
        residual_positions=design.positions,
        n_obs=n * design.n_rows,
        method="ab1" if step_count == 1 else "ab2",
        spec=spec,
        entities=dataset.entities,
        warnings=notes,
        instruments=instruments,
        weighting=weighting,
        step_count=step_count,
        criterion_value=_criterion(instruments, residuals, weighting),
        transform=transform,
        x_policy=x_policy,
        design=design,
        differenced_residuals=fd_design.y - fd_design.x @ params,
        differenced_regressors=fd_design.x,
        projection=projection,
    )
    _attach_diagnostics(result)
    logger.info(f"GMM {result.method} ({transform}): {result.coefficients}")
    return result


def _attach_diagnostics(result: GMMResult) -> None:
    scale = float(np.abs(result.design.y).max(initial=0.0))
    if float(np.abs(result.residuals).max(initial=0.0)) <= 1e-10 * max(scale, 1e-300):
        result.warnings.append("residuals are numerically zero; Sargan and AR tests skipped")
        return
    try:
        result.sargan = sargan_test(result)
    except NumericalError as e:
        result.warnings.append(f"Sargan test unavailable: {e}")
    for order in (1, 2):
        try:
            result.ar_tests[order] = ar_test(result, order)
        except (DataError, NumericalError) as e:
            result.warnings.append(f"AR({order}) test unavailable: {e}")


def sargan_test(result: GMMResult) -> TestResult:
    """
    Sargan/Hansen overidentification test ``S = N g' A_N g``.

    Uses second-step weighting: the estimation weighting for two-step fits, and the
    weighting built from the final residuals after a one-step fit. Chi-square with
    ``m - k`` degrees of freedom.

    Raises:
        NotApplicable: If the model is just identified.
    """
    df = result.instruments.moment_count - len(result.params)
    if df <= 0:
        raise NotApplicable("Sargan test not applicable: model is just identified")
    if result.step_count == 2:
        statistic = result.criterion_value
        note = "two-step weighting"
    else:
        weighting = second_step_weighting(result.instruments, result.residuals, on_singular="ridge")
        statistic = _criterion(result.instruments, result.residuals, weighting)
        note = "one-step residuals with second-step weighting"
    return TestResult(
        name="Sargan",
        statistic=statistic,
        distribution="chi2",
        df=df,
        p_value=float(stats.chi2.sf(statistic, df)),
        note=note,
    )


def ar_test(result: GMMResult, order: int) -> TestResult:
    """
    Arellano-Bond test for autocorrelation of order ``order`` in differenced residuals.

    The statistic is ``sum_i w_i'e_i / sqrt(sum_i (w_i'e_i - c_i)^2)`` where ``e_i``
    are the differenced residuals, ``w_i`` the same residuals lagged ``order``
    periods and ``c_i = b' P Z_i'v_i / N`` removes the first-order effect of the
    coefficient estimate (``b = sum_i dW_i'w_i``, ``P`` the GMM projection).
    Standard normal under no autocorrelation.

    Raises:
        TooFewPeriods: If the differenced residuals have ``order`` or fewer periods.
    """
    if order < 1:
        raise UsageError("AR test order must be at least 1")
    e = result.differenced_residuals
    n, rows = e.shape
    if rows <= order:
        raise TooFewPeriods(f"AR({order}) test needs more than {order} differenced periods, got {rows}")
    lagged = e[:, :-order]
    current = e[:, order:]
    regressors = result.differenced_regressors[:, order:, :]

    products = np.sum(lagged * current, axis=1)
    b = np.einsum("irk,ir->k", regressors, lagged)
    moments_i = np.einsum("irm,ir->im", result.instruments.z, result.residuals)
    correction = moments_i @ (result.projection.T @ b) / n
    variance = float(np.sum((products - correction) ** 2))
    if variance <= 0.0:
        raise DegenerateVariance(f"AR({order}) statistic has zero variance")
    statistic = float(products.sum() / np.sqrt(variance))
    return TestResult(
        name=f"AR({order})",
        statistic=statistic,
        distribution="normal",
        p_value=float(2.0 * stats.norm.sf(abs(statistic))),
    )
