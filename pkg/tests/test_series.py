import numpy as np
import pytest
from hypothesis import given, strategies as st

from spinamp.series import TimeSeries, format_float, write_csv


def test_csv_round_trip(tmp_path):
    ts = TimeSeries(np.sin(np.arange(100) * 0.1) * 1e-9, 1000.0, 0.25)
    p = tmp_path / "s.csv"
    ts.to_csv(p)
    back = TimeSeries.from_csv(p)
    assert np.array_equal(back.samples, ts.samples)
    assert back.rate == pytest.approx(1000.0, rel=1e-12)
    assert back.t0 == 0.25
    assert p.read_bytes().startswith(b"t_s,value_T\n")
    assert b"\r" not in p.read_bytes()


def test_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("time,value\n0,1\n1,2\n")
    with pytest.raises(ValueError):
        TimeSeries.from_csv(p)


def test_csv_rejects_irregular_spacing(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("t_s,value_T\n0,1\n1,2\n3,3\n")
    with pytest.raises(ValueError):
        TimeSeries.from_csv(p)


def test_samples_read_only():
    ts = TimeSeries([1.0, 2.0], 1.0)
    with pytest.raises(ValueError):
        ts.samples[0] = 3.0


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_format_float_round_trips(x):
    assert float(format_float(x)) == x


def test_write_csv_length_mismatch(tmp_path):
    with pytest.raises(ValueError):
        write_csv(tmp_path / "x.csv", ("a", "b"), ([1.0], [1.0, 2.0]))


def test_add_and_decimate():
    a = TimeSeries(np.ones(10), 10.0)
    b = TimeSeries(np.arange(10.0), 10.0)
    assert np.array_equal((a + b).samples, np.arange(10.0) + 1)
    d = b.decimated(2)
    assert d.rate == 5.0 and np.array_equal(d.samples, np.arange(0.0, 10.0, 2))
    with pytest.raises(ValueError):
        a + TimeSeries(np.ones(9), 10.0)
