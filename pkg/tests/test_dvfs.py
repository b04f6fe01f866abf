import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from allinone import dvfs
from allinone.dvfs import (SwitchPolicy, analyze_table, calibrate, format_rate, latency_tables, policy_comparison,
                           reduction_rate, sample_variance, simulate)
from allinone.errors import ArityError, CalibrationError, ConfigError, RangeError, StateError

PRINTED_N2 = [15.68, 8.41, 5.45, 0.045, 7.61, 5.45, 0.02]
PRINTED_N3 = [29.71, 29.64, 29.89, 21.63, 0.76, 27.60, 31.04, 21.62, 0.97]


def _dense_obs():
    t = latency_tables()["n2"]
    row = t["rows"][0]
    return [(row["mmacs"][0], c, ms) for c, ms in zip(t["clocks_mhz"], row["latency_ms"])]


def test_sample_variance_oracle():
    assert sample_variance([1, 2, 3, 4]) == pytest.approx(5 / 3)
    assert sample_variance([2.0, 2.0]) == 0.0
    with pytest.raises(ArityError):
        sample_variance([1.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=20))
def test_sample_variance_matches_numpy(xs):
    assert sample_variance(xs) == pytest.approx(float(np.var(xs, ddof=1)), rel=1e-9, abs=1e-6)


@pytest.mark.parametrize("key,printed", [("n2", PRINTED_N2), ("n3", PRINTED_N3)])
def test_recomputed_variances_match_printed(key, printed):
    rows = analyze_table(latency_tables()[key])
    assert [r["variance"] for r in rows] == printed
    for r in rows:
        assert abs(r["computed_variance"] - r["variance"]) <= 0.005 + 1e-9, r


def _rounds_to(rate, printed):
    """Printed rate matches either rounding direction at an exact half."""
    step = 1 if printed >= 100 else 0.1
    return abs(rate - printed) <= step / 2 + 1e-9


@pytest.mark.parametrize("key", ["n2", "n3"])
def test_reduction_rates_round_to_printed(key):
    for r in analyze_table(latency_tables()[key]):
        if r["method"] == "single":
            assert _rounds_to(r["computed_rate"], r["rate"]), r


def test_format_rate():
    assert format_rate(186.9) == "187x"
    assert format_rate(39.33) == "39.3x"
    assert format_rate(99.96) == "100.0x"
    assert format_rate(math.inf) == "inf"
    assert reduction_rate(1.0, 0.0) == math.inf


def test_two_point_calibration_is_exact():
    obs = _dense_obs()
    prof = calibrate(obs)
    assert max(abs(r) for r in dvfs.residuals(prof, obs)) < 1e-9
    for m, c, ms in obs:
        assert abs(prof.latency(m, c) - ms) <= 0.01
    assert prof.t0 == pytest.approx(10.18, abs=0.01)
    assert prof.kappa == pytest.approx(5.1692, abs=1e-3)


def test_calibration_errors():
    with pytest.raises(CalibrationError):
        calibrate([(1820, 400, 33.7)])
    with pytest.raises(CalibrationError):
        calibrate([(1820, 400, 33.7), (1820, 400, 34.0)])
    with pytest.raises(StateError):
        dvfs.default_profile().latency(100, 400)


def test_all_in_one_dominates_every_fixed_policy():
    prof = calibrate(_dense_obs())
    tables = policy_comparison(prof, [850, 480, 350], [305, 442, 587], dense_mmacs=1820)
    aio = tables.pop("all-in-one").variance
    assert sorted(tables) == sorted(f"single {m}M" for m in (1820, 850, 480, 350))
    for name, t in tables.items():
        assert aio < t.variance, name


@given(st.floats(10, 3000), st.lists(st.sampled_from([305, 400, 442, 525, 587]), min_size=2, max_size=5, unique=True))
def test_fixed_model_latency_falls_as_clock_rises(mmacs, clocks):
    prof = calibrate(_dense_obs())
    lat = simulate(SwitchPolicy.fixed(mmacs, prof.clocks), prof, dvfs.sweep_trace(sorted(clocks))).latencies
    assert all(a > b for a, b in zip(lat, lat[1:]))


def test_policy_validation_and_lookup():
    with pytest.raises(ConfigError):
        SwitchPolicy("bad", {305: 100, 587: 50})
    with pytest.raises(ConfigError):
        SwitchPolicy.all_in_one([1, 2], [305, 442, 587])
    p = SwitchPolicy.all_in_one([350, 850, 480], [587, 305, 442])
    assert p.mapping == {587: 850, 442: 480, 305: 350}
    with pytest.raises(RangeError):
        p.mmacs(400)


def test_simulate_backends():
    prof = calibrate(_dense_obs())
    p = SwitchPolicy.fixed(480, prof.clocks)
    trace = dvfs.battery_trace([305, 587], events_per_level=2)
    t = simulate(p, prof, trace)
    assert [e[1] for e in t.events] == [587, 587, 305, 305]
    m = simulate(p, prof, trace, backend="measured", measured={480: 20.0}, reference_clock=587)
    assert m.per_clock() == {587: 20.0, 305: pytest.approx(20.0 * 587 / 305)}
    with pytest.raises(ConfigError):
        simulate(p, prof, trace, backend="measured")
    with pytest.raises(ConfigError):
        simulate(p, prof, trace, backend="oracle")
    with pytest.raises(RangeError):
        simulate(p, prof, [(0, 123)])


def test_trace_round_trip(tmp_path):
    trace = dvfs.uniform_trace([305, 442, 587], 25, seed=3)
    dvfs.write_trace(trace, tmp_path / "t.csv")
    assert dvfs.read_trace(tmp_path / "t.csv") == trace
    (tmp_path / "bad.csv").write_text("timestamp_ms,clock_mhz\n0,305,1\n")
    with pytest.raises(ConfigError):
        dvfs.read_trace(tmp_path / "bad.csv")


def test_profile_levels():
    prof = dvfs.default_profile()
    assert prof.clocks == [305, 400, 442, 525, 587]
    assert prof.levels[0].voltage == (0.47, 0.73)
    with pytest.raises(ConfigError):
        dvfs.FrequencyProfile(list(reversed(prof.levels)))


def test_csv_rows_have_latency_columns():
    rows = dvfs.table_csv_rows(latency_tables()["n3"])
    assert set(rows[0]) >= {"latency_305mhz", "latency_442mhz", "latency_587mhz", "variance", "reduction_rate"}
    assert rows[-1]["reduction_rate"] == "1.0x"
