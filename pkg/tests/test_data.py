import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg, stats

from gptrain.covmodel import HyperPoint, k1, k2, kernel_matrix
from gptrain.data import (atomic_write, format_series, load_series, parse_series, sample_gp,
                          subset, write_series)
from gptrain.errors import InsufficientDataError, ParseError, SelectionError

from conftest import REF_K2


class TestSampling:
    def test_deterministic_given_seed(self):
        ts = np.arange(1.0, 51.0)
        model = k2().for_times(ts)
        a = sample_gp(model, REF_K2, ts, 7)
        np.testing.assert_array_equal(a, sample_gp(model, REF_K2, ts, 7))
        assert not np.array_equal(a, sample_gp(model, REF_K2, ts, 8))

    def test_single_point(self):
        y = sample_gp(k1(), HyperPoint((1.0, 1.0), (0.0,)), [3.0], 0)
        assert y.shape == (1,)

    def test_duplicate_times_rejected(self):
        with pytest.raises(SelectionError):
            sample_gp(k1(), HyperPoint((1.0, 1.0), (0.0,)), [1.0, 1.0], 0)

    def test_sample_covariance_matches_kernel(self):
        ts = np.arange(1.0, 9.0)
        model = k1(0.1).for_times(ts)
        point = HyperPoint((2.0, 1.0), (-0.1,), math.log(1.5))
        draws = np.array([sample_gp(model, point, ts, s) for s in range(6000)])
        K = kernel_matrix(model, point, ts)
        emp = np.cov(draws, rowvar=False)
        # standard error of a sample covariance entry is about sqrt((K_ii K_jj + K_ij^2) / m)
        se = np.sqrt((np.outer(np.diag(K), np.diag(K)) + K ** 2) / draws.shape[0])
        assert np.all(np.abs(emp - K) < 5 * se)

    def test_whitened_draw_is_white_noise(self):
        ts = np.arange(1.0, 301.0)
        model = k2().for_times(ts)
        y = sample_gp(model, REF_K2, ts, 11)
        L = np.linalg.cholesky(kernel_matrix(model, REF_K2, ts))
        z = linalg.solve_triangular(L, y, lower=True)
        assert stats.kstest(z, "norm").pvalue > 1e-3
        # low-lag autocorrelations within ~4 standard errors of zero
        zc = z - z.mean()
        acf = [zc[:-k] @ zc[k:] / (zc @ zc) for k in range(1, 6)]
        assert max(abs(r) for r in acf) < 4 / math.sqrt(z.size)


class TestParsing:
    def test_basic(self):
        s = parse_series("t,y\n1,2.5\n2,3.5\n# comment\n\n3,-1\n")
        np.testing.assert_array_equal(s.times, [1, 2, 3])
        np.testing.assert_array_equal(s.values, [2.5, 3.5, -1])
        assert s.meta["columns"] == ["t", "y"]
        assert s.min_separation == 1.0 and s.span == 2.0

    def test_named_columns(self):
        s = parse_series("station,height,time\nA,1.0,10\nA,2.0,11\n",
                         time_column="time", value_column="height")
        np.testing.assert_array_equal(s.times, [10, 11])
        np.testing.assert_array_equal(s.values, [1.0, 2.0])

    def test_duplicates_collapse_to_mean(self):
        s = parse_series("t,y\n0,1\n1,2\n1,4\n2,5\n")
        np.testing.assert_array_equal(s.times, [0, 1, 2])
        np.testing.assert_array_equal(s.values, [1, 3, 5])
        assert s.meta["n_raw"] == 4

    def test_timestamps_in_hours(self):
        text = "when,level\n2020-01-01 00:00,1\n2020-01-01 06:00,2\n2020-01-02 00:00,3\n"
        s = parse_series(text, time_format="%Y-%m-%d %H:%M")
        np.testing.assert_allclose(s.times, [0, 6, 24])
        s = parse_series(text, time_format="%Y-%m-%d %H:%M", time_unit_hours=False)
        np.testing.assert_allclose(s.times, [0, 6 * 3600, 86400])

    @pytest.mark.parametrize("text,line", [
        ("t,y\n1,2\nx,3\n", 3),
        ("t,y\n1,2\n2\n", 3),
        ("t,y\n1,2\n2,nan\n", 3),
    ])
    def test_parse_errors_report_line(self, text, line):
        with pytest.raises(ParseError) as exc:
            parse_series(text)
        assert exc.value.line == line

    def test_unsorted_times(self):
        with pytest.raises(ParseError):
            parse_series("t,y\n2,1\n1,2\n")

    def test_too_few_rows(self):
        with pytest.raises(InsufficientDataError):
            parse_series("t,y\n1,2\n")
        with pytest.raises(ParseError):
            parse_series("")

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=2,
                    max_size=30, unique_by=lambda r: r[0]))
    def test_format_parse_round_trip(self, rows):
        rows.sort()
        ts, ys = zip(*rows)
        s = parse_series(format_series(ts, ys))
        np.testing.assert_array_equal(s.times, ts)
        np.testing.assert_array_equal(s.values, ys)


class TestFiles:
    def test_write_and_load(self, tmp_path):
        p = tmp_path / "s.csv"
        write_series(p, [0.0, 0.5, 1.0], [1.0, 2.0, 3.0])
        s = load_series(p)
        assert s.path == os.fspath(p)
        np.testing.assert_array_equal(s.values, [1, 2, 3])
        assert s.training_set().n == 3

    def test_atomic_write_leaves_no_temporaries(self, tmp_path):
        p = tmp_path / "out.txt"
        atomic_write(p, "first\n")
        atomic_write(p, "second\n")
        assert p.read_text() == "second\n"
        assert sorted(os.listdir(tmp_path)) == ["out.txt"]

    def test_atomic_write_failure_keeps_original(self, tmp_path):
        p = tmp_path / "out.txt"
        atomic_write(p, "keep\n")
        with pytest.raises(TypeError):
            atomic_write(p, None)
        assert p.read_text() == "keep\n"
        assert sorted(os.listdir(tmp_path)) == ["out.txt"]


class TestSubset:
    @pytest.fixture
    def series(self):
        return parse_series(format_series(np.arange(0.0, 48.0), np.arange(48.0)))

    def test_index_range_and_stride(self, series):
        s = subset(series, 10, 20, 3)
        np.testing.assert_array_equal(s.times, [10, 13, 16, 19])

    def test_time_window(self, series):
        s = subset(series, window=(24, 30))
        np.testing.assert_array_equal(s.times, np.arange(24.0, 30.0))
        assert s.meta["subset"]["window"] == [24, 30]

    def test_empty_selection(self, series):
        with pytest.raises(SelectionError):
            subset(series, window=(100, 200))
