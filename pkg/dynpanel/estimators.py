"""Classical panel estimators: pooled OLS, within (LSDV) and Anderson-Hsiao IV."""

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from dynpanel.exceptions import TooFewPeriods, UsageError
from dynpanel.kernel import LinearFit, instrumental_variables, least_squares
from dynpanel.panel import (
    ModelSpec,
    PanelDataset,
    Series,
    align,
    build_design,
    first_difference,
    lag,
)

logger = logging.getLogger(__name__)

AHVariant = Literal["difference_instrument", "level_instrument"]


@dataclass(kw_only=True)
class EstimateResult:
    """Result of a panel estimation."""

    names: tuple[str, ...]
    """Coefficient names: AR lags ``L{k}.<dep>``, exogenous names, ``const``."""

    params: np.ndarray
    covariance: np.ndarray

    residuals: np.ndarray
    """(N, r) residuals of the estimated equation."""

    residual_positions: tuple[int, ...]
    """Period positions (0-based) of the residual columns."""

    n_obs: int
    method: str
    spec: ModelSpec
    entities: tuple[str, ...] = ()
    warnings: list[str] = field(default_factory=list)

    @property
    def coefficients(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(self.names, self.params)}

    @property
    def standard_errors(self) -> dict[str, float]:
        diagonal = np.clip(np.diag(self.covariance), 0.0, None)
        return {name: float(v) for name, v in zip(self.names, np.sqrt(diagonal))}

    def coefficient(self, name: str) -> float:
        return self.coefficients[name]

    @property
    def alpha(self) -> float:
        """Coefficient on the first autoregressive lag."""
        return self.coefficients[f"L1.{self.spec.dependent}"]


def _result(fit: LinearFit, design_names, design, dataset, spec, method) -> EstimateResult:
    n, r = design.y.shape
    return EstimateResult(
        names=tuple(design_names),
        params=fit.params,
        covariance=fit.covariance,
        residuals=fit.residuals.reshape(n, r),
        residual_positions=design.positions,
        n_obs=n * r,
        method=method,
        spec=spec,
        entities=dataset.entities,
    )


def pooled_ols(dataset: PanelDataset, spec: ModelSpec) -> EstimateResult:
    """
    Least squares on stacked observations in levels, without entity effects.

    With a lagged dependent variable the estimate is biased upward whenever the
    entity effects have positive variance.
    """
    design = build_design(dataset, spec, transform="levels")
    x, y = design.stacked()
    fit = least_squares(x, y, design.names)
    logger.debug(f"pooled OLS on {y.shape[0]} rows, {x.shape[1]} columns")
    return _result(fit, design.names, design, dataset, spec, "ols")


def within_estimator(dataset: PanelDataset, spec: ModelSpec) -> EstimateResult:
    """
    Least squares on entity-demeaned data (equivalent to entity dummies).

    Raises:
        TooFewPeriods: If fewer than ``p + 2`` periods are available.
    """
    if dataset.n_periods < spec.ar_order + 2:
        raise TooFewPeriods(f"Within estimator needs T >= {spec.ar_order + 2}, got T={dataset.n_periods}")
    design = build_design(dataset, spec, transform="within")
    x, y = design.stacked()
    fit = least_squares(x, y, design.names, absorbed=dataset.n_entities)
    return _result(fit, design.names, design, dataset, spec, "within")


def _ah_instrument(series: Series, k: int, variant: AHVariant) -> Series:
    if variant == "level_instrument":
        return lag(series, k + 1)
    return lag(first_difference(series), k + 1)


def anderson_hsiao(dataset: PanelDataset, spec: ModelSpec, variant: AHVariant) -> EstimateResult:
    """
    Anderson-Hsiao IV on the first-differenced equation.

    The lagged difference ``dy_{t-k}`` is instrumented by the level ``y_{t-k-1}``
    (``level_instrument``) or by the difference ``y_{t-k-1} - y_{t-k-2}``
    (``difference_instrument``). Exogenous regressors instrument themselves in
    differences. Equations are summed from the first period at which the
    instrument exists.

    Raises:
        TooFewPeriods: With the minimum T for the variant.
        WeakInstrument: If an instrument is orthogonal to its regressor.
    """
    if spec.ar_order < 1:
        raise UsageError("Anderson-Hsiao requires at least one autoregressive lag")
    if variant not in ("difference_instrument", "level_instrument"):
        raise UsageError(f"Unknown Anderson-Hsiao variant '{variant}'")
    p = spec.ar_order
    first_row = p + 1 if variant == "level_instrument" else p + 2
    if dataset.n_periods < first_row + 1:
        raise TooFewPeriods(
            f"Anderson-Hsiao ({variant}) needs T >= {first_row + 1}, got T={dataset.n_periods}"
        )

    design = build_design(dataset, spec, transform="first_difference", start=first_row)
    y_levels = dataset.matrix(spec.dependent)
    instruments = np.empty_like(design.x)
    for row, entity in enumerate(dataset.entities):
        base = Series(entity, y_levels[row])
        columns = [_ah_instrument(base, k, variant) for k in range(1, p + 1)]
        columns = [c.window(design.positions[0], design.positions[-1] + 1) for c in align(*columns)]
        instruments[row, :, :p] = np.column_stack([c.values for c in columns])
    instruments[:, :, p:] = design.x[:, :, p:]

    x, y = design.stacked()
    z = instruments.reshape(-1, instruments.shape[2])
    fit = instrumental_variables(x, z, y, design.names)
    method = "ah-diff" if variant == "difference_instrument" else "ah-level"
    return _result(fit, design.names, design, dataset, spec, method)
