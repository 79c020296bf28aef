"""
Unit tests for the panel container, ingestion and row-aligned transforms.
"""

import numpy as np
import pytest

from dynpanel.exceptions import (
    DataError,
    DuplicateCell,
    LagTooLarge,
    MissingCell,
    NoRegressors,
    NonConsecutiveTime,
    NonNumeric,
    SeriesTooShort,
    UnknownVariable,
)
from dynpanel.panel import (
    ModelSpec,
    PanelDataset,
    PanelLayout,
    Series,
    align,
    build_design,
    first_difference,
    lag,
    load_panel,
    orthogonal_deviations,
    save_panel,
    validate_balance,
    within_transform,
)


def write_csv(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def small_csv(tmp_path):
    return write_csv(
        tmp_path / "panel.csv",
        ["entity,time,y", "b,2,5.5", "a,1,1.0", "a,2,2.0", "b,1,4", "a,3,3.0", "b,3,6.25"],
    )


class TestLoadPanel:
    """Tests for long-format ingestion."""

    def test_load_sorts_rows(self, small_csv):
        """Rows in any order produce an entity- then time-sorted panel."""
        dataset = load_panel(small_csv)
        assert dataset.n_entities == 2
        assert dataset.n_periods == 3
        assert dataset.entities == ("a", "b")
        assert dataset.periods == (1, 2, 3)
        np.testing.assert_array_equal(dataset.matrix("y"), [[1.0, 2.0, 3.0], [4.0, 5.5, 6.25]])

    def test_missing_row_is_named(self, tmp_path):
        """Dropping one row reports exactly that cell."""
        path = write_csv(tmp_path / "p.csv", ["entity,time,y", "a,1,1", "a,2,2", "a,3,3", "b,1,4", "b,3,6"])
        with pytest.raises(MissingCell) as exc_info:
            load_panel(path)
        assert exc_info.value.cells == [("b", 2, "y")]
        assert "(b, 2, y)" in str(exc_info.value)

    def test_missing_lists_every_cell(self, tmp_path):
        """Every absent triple is listed, including empty cells."""
        path = write_csv(tmp_path / "p.csv", ["entity,time,y,x", "a,1,1,", "a,2,2,3", "b,1,4,1"])
        with pytest.raises(MissingCell) as exc_info:
            load_panel(path)
        assert exc_info.value.cells == [("a", 1, "x"), ("b", 2, "x"), ("b", 2, "y")]

    def test_non_numeric_location(self, tmp_path):
        """A bad cell is reported with its file row and column."""
        path = write_csv(tmp_path / "p.csv", ["entity,time,y", "a,1,1", "a,2,oops", "b,1,4", "b,2,5"])
        with pytest.raises(NonNumeric) as exc_info:
            load_panel(path)
        assert exc_info.value.row == 3
        assert exc_info.value.column == "y"

    def test_duplicate_cell(self, tmp_path):
        """Repeated (entity, time) pairs are rejected."""
        path = write_csv(tmp_path / "p.csv", ["entity,time,y", "a,1,1", "a,1,2", "a,2,3"])
        with pytest.raises(DuplicateCell):
            load_panel(path)

    def test_non_consecutive_time(self, tmp_path):
        """Gaps in the time index are rejected."""
        path = write_csv(tmp_path / "p.csv", ["entity,time,y", "a,1,1", "a,3,2", "b,1,3", "b,3,4"])
        with pytest.raises(NonConsecutiveTime):
            load_panel(path)

    def test_country_panel_shape(self, tmp_path):
        """23 entities over 1992..2004 with five variables load as a 23 x 13 panel."""
        rng = np.random.default_rng(0)
        lines = ["entity,time,R,G,M,VA,IDE"]
        for i in range(23):
            for year in range(1992, 2005):
                lines.append(f"c{i:02d},{year}," + ",".join(str(v) for v in rng.normal(size=5)))
        dataset = load_panel(write_csv(tmp_path / "p.csv", lines))
        assert (dataset.n_entities, dataset.n_periods) == (23, 13)
        assert dataset.variables == ("R", "G", "M", "VA", "IDE")

    def test_custom_layout(self, tmp_path):
        """Column names and delimiter follow the layout."""
        path = write_csv(tmp_path / "p.csv", ["country;year;y", "x;2000;1", "x;2001;2"])
        dataset = load_panel(path, PanelLayout(entity_column="country", time_column="year", delimiter=";"))
        assert dataset.periods == (2000, 2001)

    def test_save_load_round_trip(self, tmp_path):
        """load -> save -> load keeps bit-identical values."""
        rng = np.random.default_rng(3)
        dataset = PanelDataset(("a", "b"), (0, 1, 2), {"y": rng.normal(size=(2, 3)), "x": rng.normal(size=(2, 3))})
        first = load_panel(save_panel(dataset, tmp_path / "one.csv"))
        second = load_panel(save_panel(first, tmp_path / "two.csv"))
        for name in ("y", "x"):
            np.testing.assert_array_equal(first.matrix(name), dataset.matrix(name))
            np.testing.assert_array_equal(second.matrix(name), dataset.matrix(name))
        assert (tmp_path / "one.csv").read_bytes() == (tmp_path / "two.csv").read_bytes()

    def test_dataset_is_read_only(self, small_csv):
        """Variable arrays cannot be mutated."""
        dataset = load_panel(small_csv)
        with pytest.raises(ValueError):
            dataset.matrix("y")[0, 0] = 10.0

    def test_unknown_variable(self, small_csv):
        """Asking for an absent variable names it."""
        with pytest.raises(UnknownVariable, match="R"):
            load_panel(small_csv).matrix("R")

    def test_invalid_utf8(self, tmp_path):
        """Undecodable bytes are a data error, not a decoder traceback."""
        path = tmp_path / "latin.csv"
        path.write_bytes(b"entity,time,y\n\xff\xfe,1,1.0\n\xff\xfe,2,2.0\n")
        with pytest.raises(DataError, match="UTF-8"):
            load_panel(path)

    def test_ragged_row(self, tmp_path):
        """A row with too many fields is a data error."""
        path = write_csv(tmp_path / "ragged.csv", ["entity,time,y", "a,1,1.0", "a,2,2.0,9,9"])
        with pytest.raises(DataError, match="Cannot parse"):
            load_panel(path)

    def test_empty_file(self, tmp_path):
        """A file without a header is a data error."""
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DataError):
            load_panel(path)

    def test_series_and_select(self, tmp_path):
        """One entity's series and a variable subset share the panel's values."""
        path = write_csv(tmp_path / "two.csv", ["entity,time,y,x", "a,1,1,10", "a,2,2,20", "b,1,3,30", "b,2,4,40"])
        dataset = load_panel(path)
        series = dataset.series("x", "b")
        assert (series.entity, series.offset) == ("b", 0)
        np.testing.assert_array_equal(series.values, [30.0, 40.0])
        subset = dataset.select(["x"])
        assert subset.variables == ("x",)
        assert (subset.entities, subset.periods) == (dataset.entities, dataset.periods)
        np.testing.assert_array_equal(subset.matrix("x"), dataset.matrix("x"))
        with pytest.raises(UnknownVariable, match="z"):
            dataset.select(["x", "z"])


class TestValidateBalance:
    """Tests for the balance report."""

    def test_balanced(self):
        """A complete 23 x 13 panel reports no missing cells."""
        dataset = PanelDataset(tuple(f"c{i:02d}" for i in range(23)), range(1992, 2005), {"y": np.ones((23, 13))})
        report = validate_balance(dataset)
        assert report.balanced
        assert (report.n_entities, report.n_periods) == (23, 13)

    def test_removed_cell_listed(self):
        """A NaN cell is listed as missing."""
        values = np.ones((2, 3))
        values[1, 2] = np.nan
        report = validate_balance(PanelDataset(("a", "b"), (1, 2, 3), {"y": values}))
        assert report.missing == (("b", 3, "y"),)

    def test_empty_dataset(self):
        """An empty dataset gives an N = 0 report."""
        report = validate_balance(PanelDataset((), (), {}))
        assert report.n_entities == 0
        assert report.balanced


class TestTransforms:
    """Tests for lag, differences and deviations."""

    def test_lag(self):
        """Lag by one keeps [5, 7] aligned to the last two periods."""
        lagged = lag(Series("a", [5.0, 7.0, 9.0]), 1)
        np.testing.assert_array_equal(lagged.values, [5.0, 7.0])
        assert lagged.offset == 1

    def test_lag_too_large(self):
        """Lag equal to the length is rejected."""
        with pytest.raises(LagTooLarge):
            lag(Series("a", [5.0, 7.0, 9.0]), 3)

    def test_lag_composition(self):
        """lag(lag(s, 1), 1) == lag(s, 2)."""
        s = Series("a", [1.0, 2.0, 3.0, 4.0])
        twice, direct = lag(lag(s, 1), 1), lag(s, 2)
        np.testing.assert_array_equal(twice.values, direct.values)
        assert twice.offset == direct.offset == 2

    def test_first_difference(self):
        """[1, 3, 6] differences to [2, 3]."""
        diff = first_difference(Series("a", [1.0, 3.0, 6.0]))
        np.testing.assert_array_equal(diff.values, [2.0, 3.0])
        assert diff.offset == 1

    def test_first_difference_removes_constant(self):
        """Adding a constant does not change the differences."""
        values = np.array([0.3, -1.2, 4.0, 2.5])
        np.testing.assert_allclose(
            first_difference(Series("a", values + 17.0)).values, first_difference(Series("a", values)).values
        )
        np.testing.assert_array_equal(first_difference(Series("a", [2.0] * 4)).values, [0.0, 0.0, 0.0])

    def test_first_difference_too_short(self):
        """A single value cannot be differenced."""
        with pytest.raises(SeriesTooShort):
            first_difference(Series("a", [1.0]))

    def test_within(self):
        """[1, 2, 3] demeans to [-1, 0, 1] and any output sums to zero."""
        np.testing.assert_allclose(within_transform(Series("a", [1.0, 2.0, 3.0])).values, [-1.0, 0.0, 1.0])
        values = np.random.default_rng(1).normal(loc=50.0, size=9)
        assert abs(within_transform(Series("a", values)).values.sum()) <= 1e-12 * np.abs(values).sum()

    def test_orthogonal_deviations(self):
        """[1, 2, 3] maps to [-1.2247, -0.7071]."""
        result = orthogonal_deviations(Series("a", [1.0, 2.0, 3.0]))
        np.testing.assert_allclose(result.values, [-1.2247, -0.7071], atol=1e-4)
        assert len(result) == 2
        assert result.offset == 0

    def test_orthogonal_deviations_constant(self):
        """A constant series maps to zeros."""
        np.testing.assert_allclose(orthogonal_deviations(Series("a", [4.0] * 5)).values, 0.0, atol=1e-12)

    def test_orthogonal_deviations_keep_white_noise_uncorrelated(self):
        """Lag-1 autocorrelation of transformed white noise stays near zero."""
        values = np.random.default_rng(11).standard_normal(2000)
        out = orthogonal_deviations(Series("a", values)).values
        out = out - out.mean()
        rho = float(out[1:] @ out[:-1] / (out @ out))
        assert -0.08 < rho < 0.08

    def test_align(self):
        """Aligned series share the common window."""
        s = Series("a", np.arange(6.0))
        a, b = align(lag(s, 2), first_difference(s))
        assert (a.offset, a.stop) == (b.offset, b.stop) == (2, 6)


class TestBuildDesign:
    """Tests for the row-aligned design."""

    def test_sentinel_alignment(self):
        """Columns of one row always come from consistent periods."""
        periods = np.arange(10.0)
        sentinel = np.vstack([periods * 100 + i for i in range(3)])
        dataset = PanelDataset(("a", "b", "c"), range(10), {"y": sentinel, "x": sentinel + 0.5})
        spec = ModelSpec(dependent="y", ar_order=2, exogenous=["x"])
        for transform in ("levels", "first_difference"):
            design = build_design(dataset, spec, transform=transform)
            for row in range(3):
                y, x = design.y[row], design.x[row]
                if transform == "levels":
                    np.testing.assert_allclose(x[:, 0], y - 100)
                    np.testing.assert_allclose(x[:, 1], y - 200)
                    np.testing.assert_allclose(x[:, 2], y + 0.5)
                    np.testing.assert_allclose(y, np.asarray(design.positions) * 100 + row)
                else:
                    np.testing.assert_allclose(y, 100.0)
        assert build_design(dataset, spec, transform="first_difference").positions == tuple(range(3, 10))

    def test_intercept_only_in_levels(self):
        """The constant column appears for levels and not after demeaning."""
        dataset = PanelDataset(("a", "b"), range(4), {"y": np.arange(8.0).reshape(2, 4)})
        spec = ModelSpec(dependent="y")
        assert build_design(dataset, spec).names == ("L1.y", "const")
        assert build_design(dataset, spec, transform="within").names == ("L1.y",)


class TestModelSpec:
    """Tests for specification validation."""

    def test_comma_separated_exogenous(self):
        """Exogenous names may be given as one comma-separated string."""
        spec = ModelSpec(dependent="R", exogenous="G, M,VA")
        assert spec.exogenous == ("G", "M", "VA")
        assert spec.coefficient_names() == ["L1.R", "G", "M", "VA", "const"]

    def test_dependent_not_exogenous(self):
        """The dependent variable may not also be a regressor."""
        with pytest.raises(ValueError):
            ModelSpec(dependent="R", exogenous=["R"])

    def test_no_regressors(self):
        """A static specification without regressors or intercept is rejected."""
        with pytest.raises(ValueError, match="no regressors"):
            ModelSpec(dependent="y", ar_order=0, intercept=False)

    def test_intercept_absorbed_by_demeaning(self):
        """A static intercept-only model has nothing left to estimate after demeaning."""
        dataset = PanelDataset(("a", "b"), range(4), {"y": np.arange(8.0).reshape(2, 4)})
        spec = ModelSpec(dependent="y", ar_order=0)
        assert build_design(dataset, spec).names == ("const",)
        with pytest.raises(NoRegressors, match="within"):
            build_design(dataset, spec, transform="within")
