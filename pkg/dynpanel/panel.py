"""Balanced panel container, CSV ingestion and row-aligned series transforms."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from dynpanel.exceptions import (
    DataError,
    DuplicateCell,
    LagTooLarge,
    MissingCell,
    NonConsecutiveTime,
    NoRegressors,
    NonNumeric,
    SeriesTooShort,
    UnknownVariable,
)

logger = logging.getLogger(__name__)

Transform = Literal["levels", "first_difference", "within", "orthogonal_deviations"]


class PanelLayout(BaseModel):
    """Long-format file description: one row per (entity, time)."""

    model_config = ConfigDict(frozen=True)

    entity_column: str = "entity"
    time_column: str = "time"
    delimiter: str = ","


class ModelSpec(BaseModel):
    """
    Dynamic panel regression specification.

    ``ar_order = 0`` describes a static regression; dynamic estimators require at
    least one autoregressive lag.
    """

    model_config = ConfigDict(frozen=True)

    dependent: str = Field(min_length=1)
    ar_order: int = Field(default=1, ge=0)
    exogenous: tuple[str, ...] = ()
    transform: Transform = "levels"
    intercept: bool = True

    @field_validator("exogenous", mode="before")
    @classmethod
    def _split_names(cls, value: Union[str, Sequence[str]]) -> tuple[str, ...]:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return tuple(v.strip() for v in value)

    @model_validator(mode="after")
    def _check_names(self) -> "ModelSpec":
        if self.dependent in self.exogenous:
            raise ValueError(f"dependent variable '{self.dependent}' also listed as exogenous")
        if len(set(self.exogenous)) != len(self.exogenous):
            raise ValueError("exogenous variable names must be unique")
        if self.ar_order == 0 and not self.exogenous and not self.intercept:
            raise ValueError("specification has no regressors (no lag, no exogenous variable, no intercept)")
        return self

    @property
    def variables(self) -> tuple[str, ...]:
        return (self.dependent, *self.exogenous)

    def coefficient_names(self, with_intercept: Optional[bool] = None) -> list[str]:
        """Names of the AR lags, exogenous slopes and (optionally) the intercept."""
        names = [f"L{k}.{self.dependent}" for k in range(1, self.ar_order + 1)]
        names.extend(self.exogenous)
        if self.intercept if with_intercept is None else with_intercept:
            names.append("const")
        return names


@dataclass(frozen=True)
class Series:
    """One entity's time-ordered values starting at period position ``offset``."""

    entity: str
    values: np.ndarray
    offset: int = 0

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("Series values must be one-dimensional")
        if self.offset < 0:
            raise ValueError("Series offset must be non-negative")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def stop(self) -> int:
        """Position one past the last value."""
        return self.offset + len(self)

    def window(self, start: int, stop: int) -> "Series":
        """Restrict to the period positions ``[start, stop)``."""
        if start < self.offset or stop > self.stop or start > stop:
            raise SeriesTooShort(
                f"Window [{start}, {stop}) outside series span [{self.offset}, {self.stop}) "
                f"for entity {self.entity}"
            )
        lo = start - self.offset
        return Series(self.entity, self.values[lo : lo + stop - start], start)


@dataclass(frozen=True)
class PanelDataset:
    """
    Balanced N x T panel of named numeric variables.

    Each variable is an (N, T) float64 array ordered as ``entities`` x ``periods``.
    Arrays are made read-only on construction.
    """

    entities: tuple[str, ...]
    periods: tuple[int, ...]
    data: Mapping[str, np.ndarray] = field(repr=False)

    def __post_init__(self) -> None:
        entities = tuple(str(e) for e in self.entities)
        periods = tuple(int(t) for t in self.periods)
        if len(set(entities)) != len(entities):
            raise DuplicateCell("Entity identifiers must be unique")
        if len(periods) > 1 and any(b - a != 1 for a, b in zip(periods, periods[1:])):
            raise NonConsecutiveTime(f"Periods must be consecutive integers, got {list(periods)}")
        data: dict[str, np.ndarray] = {}
        for name, values in self.data.items():
            if not name or not str(name).strip():
                raise DataError("Variable names must be non-empty")
            array = np.array(values, dtype=np.float64)
            if array.shape != (len(entities), len(periods)):
                raise DataError(
                    f"Variable '{name}' has shape {array.shape}, expected {(len(entities), len(periods))}"
                )
            array.setflags(write=False)
            data[str(name)] = array
        object.__setattr__(self, "entities", entities)
        object.__setattr__(self, "periods", periods)
        object.__setattr__(self, "data", data)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(self.data)

    def require(self, names: Iterable[str]) -> None:
        """Raise UnknownVariable if any name is not a variable of this panel."""
        missing = [n for n in names if n not in self.data]
        if missing:
            raise UnknownVariable(
                f"Variable(s) not in dataset: {', '.join(missing)} (available: {', '.join(self.variables)})"
            )

    def matrix(self, variable: str) -> np.ndarray:
        self.require([variable])
        return self.data[variable]

    def series(self, variable: str, entity: str) -> Series:
        row = self.entities.index(entity)
        return Series(entity, self.matrix(variable)[row], 0)

    def iter_series(self, variable: str) -> Iterable[Series]:
        values = self.matrix(variable)
        for row, entity in enumerate(self.entities):
            yield Series(entity, values[row], 0)

    def select(self, variables: Iterable[str]) -> "PanelDataset":
        names = list(variables)
        self.require(names)
        return PanelDataset(self.entities, self.periods, {n: self.data[n] for n in names})

    def to_frame(self) -> pd.DataFrame:
        """Long-format frame with ``entity``, ``time`` and one column per variable."""
        index = pd.MultiIndex.from_product([self.entities, self.periods], names=["entity", "time"])
        frame = pd.DataFrame({name: values.reshape(-1) for name, values in self.data.items()}, index=index)
        return frame.reset_index()


@dataclass(frozen=True)
class BalanceReport:
    """Outcome of a balance check; ``missing`` is empty iff the panel is balanced."""

    n_entities: int
    n_periods: int
    variables: tuple[str, ...]
    missing: tuple[tuple[str, int, str], ...] = ()

    @property
    def balanced(self) -> bool:
        return not self.missing


def lag(series: Series, k: int) -> Series:
    """
    Shift values forward by ``k`` periods.

    The lagged value aligned with position ``offset + k`` is the original value at
    ``offset``, so the result is ``k`` shorter and starts ``k`` positions later.
    """
    if k < 1:
        raise ValueError("lag order must be a positive integer")
    if k >= len(series):
        raise LagTooLarge(f"Lag {k} needs a series longer than {k}, entity {series.entity} has {len(series)}")
    return Series(series.entity, series.values[:-k], series.offset + k)


def first_difference(series: Series) -> Series:
    if len(series) < 2:
        raise SeriesTooShort(f"First difference needs at least 2 values (entity {series.entity})")
    return Series(series.entity, np.diff(series.values), series.offset + 1)


def within_transform(series: Series) -> Series:
    """Subtract the entity's own time mean."""
    if len(series) < 2:
        raise SeriesTooShort(f"Within transform needs at least 2 values (entity {series.entity})")
    return Series(series.entity, series.values - series.values.mean(), series.offset)


def orthogonal_deviations(series: Series) -> Series:
    """
    Forward orthogonal deviations.

    ``x*_t = c_t (x_t - mean(x_{t+1..T}))`` with ``c_t = sqrt((T-t)/(T-t+1))`` for
    ``t = 1..T-1``. The last period is dropped; the offset is unchanged.
    """
    n = len(series)
    if n < 2:
        raise SeriesTooShort(f"Orthogonal deviations need at least 2 values (entity {series.entity})")
    values = series.values
    remaining = np.arange(n - 1, 0, -1, dtype=np.float64)
    future_sums = np.cumsum(values[::-1])[::-1][1:]
    scale = np.sqrt(remaining / (remaining + 1.0))
    return Series(series.entity, scale * (values[:-1] - future_sums / remaining), series.offset)


def align(*series: Series) -> tuple[Series, ...]:
    """Restrict series to their common period window."""
    start = max(s.offset for s in series)
    stop = min(s.stop for s in series)
    if stop <= start:
        raise SeriesTooShort("Series share no common periods")
    return tuple(s.window(start, stop) for s in series)


def validate_balance(dataset: PanelDataset) -> BalanceReport:
    missing: list[tuple[str, int, str]] = []
    for name, values in dataset.data.items():
        for row, col in zip(*np.nonzero(~np.isfinite(values))):
            missing.append((dataset.entities[row], dataset.periods[col], name))
    missing.sort(key=lambda cell: (cell[0], cell[1], cell[2]))
    return BalanceReport(dataset.n_entities, dataset.n_periods, dataset.variables, tuple(missing))


def ensure_balanced(dataset: PanelDataset) -> None:
    report = validate_balance(dataset)
    if not report.balanced:
        raise MissingCell(report.missing)


def load_panel(path: Union[str, Path], layout: Optional[PanelLayout] = None) -> PanelDataset:
    """
    Load a balanced panel from a long-format delimited file.

    Args:
        path: File with a header row naming the entity column, the time column and
            at least one variable column. Rows may appear in any order.
        layout: Column names and delimiter; defaults to ``entity,time,...`` CSV.

    Returns:
        PanelDataset sorted by entity then time.

    Raises:
        MissingCell: Listing every absent (entity, time, variable) triple.
        NonNumeric: With the 1-based file row and column of the first bad cell.
        DuplicateCell: If an (entity, time) pair appears twice.
        NonConsecutiveTime: If the time values have gaps.
    """
    layout = layout or PanelLayout()
    path = Path(path)
    if not path.exists():
        raise DataError(f"Input file does not exist: {path}")

    try:
        frame = pd.read_csv(
            path,
            sep=layout.delimiter,
            dtype=str,
            keep_default_na=False,
            encoding="utf-8",
            skipinitialspace=True,
        )
    except UnicodeDecodeError as e:
        raise DataError(f"{path} is not valid UTF-8 (byte offset {e.start})") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Cannot parse {path}: {e}") from e
    frame.columns = [str(c).strip() for c in frame.columns]
    for column in (layout.entity_column, layout.time_column):
        if column not in frame.columns:
            raise DataError(f"Required column '{column}' not found in header of {path}")
    variables = [c for c in frame.columns if c not in (layout.entity_column, layout.time_column)]
    if not variables:
        raise DataError(f"No variable columns in {path}")
    if len(set(variables)) != len(variables):
        raise DataError("Variable names must be unique")
    if frame.empty:
        raise DataError(f"No data rows in {path}")

    # header is file row 1
    file_rows = frame.index.to_numpy() + 2
    times = pd.to_numeric(frame[layout.time_column], errors="coerce")
    bad = times.isna() | (times != np.floor(times))
    if bad.any():
        row = int(np.argmax(bad.to_numpy()))
        raise NonNumeric(int(file_rows[row]), layout.time_column, frame[layout.time_column].iloc[row])
    frame[layout.time_column] = times.astype(np.int64)

    values: dict[str, pd.Series] = {}
    for name in variables:
        raw = frame[name].str.strip()
        parsed = pd.to_numeric(raw, errors="coerce")
        bad = (raw != "") & ~np.isfinite(parsed.to_numpy(dtype=np.float64))
        if bad.any():
            row = int(np.argmax(bad.to_numpy()))
            raise NonNumeric(int(file_rows[row]), name, raw.iloc[row])
        values[name] = raw.map(lambda v: float(v) if v else np.nan).astype(np.float64)

    keys = frame[[layout.entity_column, layout.time_column]].astype({layout.entity_column: str})
    duplicated = keys.duplicated(keep=False)
    if duplicated.any():
        dupes = sorted({(e, int(t)) for e, t in keys[duplicated].itertuples(index=False)})
        raise DuplicateCell(f"Duplicate (entity, time) rows: {dupes}")

    periods = np.sort(keys[layout.time_column].unique())
    if np.any(np.diff(periods) != 1):
        raise NonConsecutiveTime(f"Time values are not consecutive integers: {periods.tolist()}")
    entities = sorted(keys[layout.entity_column].unique())

    long = pd.DataFrame(values)
    long.index = pd.MultiIndex.from_frame(keys)
    full = long.reindex(pd.MultiIndex.from_product([entities, periods.tolist()]))
    missing = [
        (str(entity), int(time), name)
        for name in variables
        for (entity, time) in full.index[full[name].isna().to_numpy()]
    ]
    if missing:
        raise MissingCell(sorted(missing))

    shape = (len(entities), len(periods))
    dataset = PanelDataset(
        tuple(entities),
        tuple(int(t) for t in periods),
        {name: full[name].to_numpy(dtype=np.float64).reshape(shape) for name in variables},
    )
    logger.info(f"Loaded panel {path.name}: N={dataset.n_entities}, T={dataset.n_periods}, vars={variables}")
    return dataset


def save_panel(dataset: PanelDataset, path: Union[str, Path], layout: Optional[PanelLayout] = None) -> Path:
    """Write the panel in long format with shortest round-trip float formatting."""
    layout = layout or PanelLayout()
    frame = dataset.to_frame().rename(columns={"entity": layout.entity_column, "time": layout.time_column})
    for name in dataset.variables:
        frame[name] = [repr(float(v)) for v in frame[name].to_numpy()]
    path = Path(path)
    frame.to_csv(path, sep=layout.delimiter, index=False, encoding="utf-8", lineterminator="\n")
    return path


@dataclass(frozen=True)
class Design:
    """
    Row-aligned regression arrays for every entity.

    ``y`` is (N, r), ``x`` is (N, r, k); row ``j`` of each entity belongs to the
    period position ``positions[j]``.
    """

    y: np.ndarray
    x: np.ndarray
    names: tuple[str, ...]
    positions: tuple[int, ...]

    @property
    def n_rows(self) -> int:
        return int(self.y.shape[1])

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x.reshape(-1, self.x.shape[2]), self.y.reshape(-1)


_ROW_TRANSFORMS = {"within": within_transform, "orthogonal_deviations": orthogonal_deviations}


def build_design(
    dataset: PanelDataset,
    spec: ModelSpec,
    transform: Optional[Transform] = None,
    start: Optional[int] = None,
) -> Design:
    """
    Assemble the dependent variable, its lags and the exogenous regressors.

    Columns are built with :func:`lag` and :func:`first_difference` and joined
    through :func:`align`, so every row pairs values of one period. The within and
    orthogonal-deviation transforms are applied after alignment, over the rows
    that enter the regression. An intercept column is appended only in levels.

    Args:
        dataset: Balanced panel.
        spec: Model specification.
        transform: Overrides ``spec.transform``.
        start: First period position to keep (before within / deviation transforms).
    """
    transform = transform or spec.transform
    dataset.require(spec.variables)
    ensure_balanced(dataset)
    p = spec.ar_order
    names = spec.coefficient_names(with_intercept=spec.intercept and transform == "levels")
    if not names:
        raise NoRegressors(f"No regressors left for {spec.dependent} under the {transform} transform")

    matrices = {name: dataset.matrix(name) for name in spec.variables}
    ys, xs, positions = [], [], ()
    for row, entity in enumerate(dataset.entities):
        base = Series(entity, matrices[spec.dependent][row])
        columns = [base, *(lag(base, k) for k in range(1, p + 1))]
        columns += [Series(entity, matrices[name][row]) for name in spec.exogenous]
        if transform == "first_difference":
            columns = [first_difference(c) for c in columns]
        columns = list(align(*columns))
        if start is not None and start > columns[0].offset:
            columns = [c.window(start, c.stop) for c in columns]
        if transform in _ROW_TRANSFORMS:
            columns = [_ROW_TRANSFORMS[transform](c) for c in columns]
        block = np.column_stack([c.values for c in columns[1:]]) if len(columns) > 1 else None
        rows = len(columns[0])
        if block is None:
            block = np.empty((rows, 0))
        if "const" in names:
            block = np.column_stack([block, np.ones(rows)])
        ys.append(columns[0].values)
        xs.append(block)
        positions = tuple(range(columns[0].offset, columns[0].stop))

    n_rows = len(positions)
    y = np.array(ys, dtype=np.float64).reshape(len(ys), n_rows)
    x = np.array(xs, dtype=np.float64).reshape(len(xs), n_rows, len(names))
    return Design(y, x, tuple(names), positions)
