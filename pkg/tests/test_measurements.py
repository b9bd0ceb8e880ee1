import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhnagm import (MeasurementSet, add_gaussian_noise, add_salt_pepper, compute_metrics, read_csv,
                    split, write_csv)
from dhnagm.errors import InsufficientData, MapeUndefined, MissingChannel, ParseError, R2Undefined
from dhnagm.measurements import rmse, target_channels


def make_set(T=50, seed=0):
    rng = np.random.default_rng(seed)
    ch = {("S1", "supply"): rng.uniform(70, 90, T), ("S1", "return"): rng.uniform(30, 50, T),
          ("L1", "supply"): rng.uniform(60, 80, T), ("L1", "return"): rng.uniform(30, 50, T)}
    return MeasurementSet(3600.0, 5.0, ch, ("S1",), ("L1",))


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        MeasurementSet(1.0, 0.0, {("a", "supply"): [1, 2], ("b", "supply"): [1]})


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        MeasurementSet(1.0, 0.0, {("a", "supply"): [1.0, math.nan]})


def test_missing_channel():
    with pytest.raises(MissingChannel):
        make_set().series("nope", "supply")


def test_target_channels():
    assert target_channels(make_set()) == [("L1", "supply"), ("S1", "return")]


def test_zero_noise_identity():
    d = make_set()
    out = add_gaussian_noise(d, 0.0, seed=1)
    for k in d.channels:
        np.testing.assert_array_equal(out.channels[k], d.channels[k])


def test_noise_determinism_and_seed_independence():
    d = make_set()
    a = add_gaussian_noise(d, 0.01, seed=7)
    b = add_gaussian_noise(d, 0.01, seed=7)
    c = add_gaussian_noise(d, 0.01, seed=8)
    for k in d.channels:
        np.testing.assert_array_equal(a.channels[k], b.channels[k])
        assert not np.array_equal(a.channels[k], c.channels[k])


def test_relative_noise_std():
    T = 100_000
    d = MeasurementSet(1.0, 0.0, {("x", "supply"): np.full(T, 50.0)})
    eps = add_gaussian_noise(d, 0.01, seed=3).series("x", "supply") / 50.0 - 1.0
    assert abs(eps.std() - 0.01) <= 0.0005


def test_absolute_noise():
    T = 100_000
    d = MeasurementSet(1.0, 0.0, {("x", "supply"): np.full(T, 50.0)})
    e = add_gaussian_noise(d, 0.5, seed=3, absolute=True).series("x", "supply") - 50.0
    assert abs(e.std() - 0.5) <= 0.025


def test_noise_channel_restriction():
    d = make_set()
    out = add_gaussian_noise(d, 0.05, seed=1, channels=target_channels(d))
    np.testing.assert_array_equal(out.series("S1", "supply"), d.series("S1", "supply"))
    assert not np.array_equal(out.series("L1", "supply"), d.series("L1", "supply"))


def test_salt_pepper_zero_identity():
    d = make_set()
    out = add_salt_pepper(d, 0.0, seed=1)
    for k in d.channels:
        np.testing.assert_array_equal(out.channels[k], d.channels[k])


def test_salt_pepper_ratios_and_frequency():
    T = 100_000
    x = np.random.default_rng(0).uniform(10, 90, T)
    d = MeasurementSet(1.0, 0.0, {("x", "supply"): x})
    y = add_salt_pepper(d, 0.2, a=3.0, b=0.3, seed=11).series("x", "supply")
    hi, lo, same = y == 3.0 * x, y == 0.3 * x, y == x
    assert np.all(hi | lo | same)
    assert abs((hi | lo).mean() - 0.2) <= 0.01
    assert abs(hi.mean() - lo.mean()) <= 0.01


def test_salt_pepper_bounds():
    with pytest.raises(ValueError):
        add_salt_pepper(make_set(), 1.0, seed=0)


def test_metrics_identity():
    a = np.array([1.0, 2.0, 4.0])
    m = compute_metrics(a, a)
    assert (m.rmse, m.mape, m.r2) == (0.0, 0.0, 1.0)


def test_mean_prediction_r2_zero():
    a = np.array([1.0, 2.0, 6.0])
    assert compute_metrics(np.full(3, a.mean()), a).r2 == pytest.approx(0.0, abs=1e-15)


def test_metric_hand_values():
    with pytest.raises(R2Undefined):
        compute_metrics([1.0, 2.0], [2.0, 2.0])
    assert rmse([1.0, 2.0], [2.0, 2.0]) == pytest.approx(math.sqrt(0.5), rel=1e-15)
    from dhnagm.measurements import mape
    assert mape([1.0, 2.0], [2.0, 2.0]) == pytest.approx(0.25, rel=1e-15)


def test_mape_zero_actual():
    with pytest.raises(MapeUndefined):
        compute_metrics([1.0, 2.0], [0.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(c=st.floats(-100, 100).filter(lambda c: abs(c) > 1e-6), seed=st.integers(0, 1000))
def test_rmse_scale_equivariance(c, seed):
    rng = np.random.default_rng(seed)
    p, a = rng.normal(size=20), rng.normal(size=20)
    assert rmse(c * p, c * a) == pytest.approx(abs(c) * rmse(p, a), rel=1e-12)


def test_split_shapes():
    d = make_set(T=500)
    train, test = split(d, 400, 100)
    assert (train.length, test.length) == (400, 100)
    np.testing.assert_array_equal(test.series("S1", "supply"), d.series("S1", "supply")[400:])
    _, empty = split(d, 500, 0)
    assert empty.length == 0
    with pytest.raises(InsufficientData):
        split(d, 500, 1)


def test_split_with_history():
    d = make_set(T=100)
    _, test = split(d, 80, 20, history=5)
    assert test.length == 25
    np.testing.assert_array_equal(test.series("L1", "supply"), d.series("L1", "supply")[75:])


def test_csv_round_trip(tmp_path):
    d = make_set()
    path = tmp_path / "m.csv"
    write_csv(d, path)
    back = read_csv(path)
    assert (back.dt, back.tau_amb, back.sources, back.loads) == (d.dt, d.tau_amb, d.sources, d.loads)
    for k in d.channels:
        np.testing.assert_array_equal(back.channels[k], d.channels[k])


def test_csv_missing_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("0,S1,supply,80.0\n")
    with pytest.raises(ParseError) as exc:
        read_csv(path, dt=1.0, tau_amb=0.0)
    assert exc.value.line == 1


def test_csv_extra_column_rejected(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("t,node_id,side,temp_c,flow\n0,S1,supply,80.0,1\n")
    with pytest.raises(ParseError) as exc:
        read_csv(path, dt=1.0, tau_amb=0.0)
    assert exc.value.line == 1


def test_csv_bad_temperature_line(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("t,node_id,side,temp_c\n0,S1,supply,80.0\n1,S1,supply,hot\n")
    with pytest.raises(ParseError) as exc:
        read_csv(path, dt=1.0, tau_amb=0.0)
    assert exc.value.line == 3


def test_csv_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_csv(tmp_path / "absent.csv")
