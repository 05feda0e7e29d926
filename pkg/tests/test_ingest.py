import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from covidsem.errors import DataError
from covidsem.ingest import (
    POLICIES,
    Panel,
    PolicyEvent,
    load_cases_deaths,
    load_covariates,
    load_mobility,
    load_policies,
    load_tests,
    merge,
    policy_indicator,
    read_panel,
    sidecar_path,
    write_panel,
)

from conftest import write_csv

CASES_HEAD = "state,date,cumulative_cases,cumulative_deaths"
D = np.datetime64


def test_cases_passthrough(tmp_path):
    p = write_csv(tmp_path / "c.csv", [CASES_HEAD, "WA,2020-03-07,100,2", "WA,2020-03-08,110,2"])
    panel = load_cases_deaths(p)
    assert panel.states == ("WA",)
    assert panel.value("cum_cases", "WA", "2020-03-08") == 110
    assert panel.value("cum_deaths", "WA", "2020-03-07") == 2
    assert panel.warnings == ()


def test_duplicate_pair_names_the_pair(tmp_path):
    p = write_csv(tmp_path / "c.csv", [CASES_HEAD, "WA,2020-03-07,100,2", "WA,2020-03-07,101,2"])
    with pytest.raises(DataError, match=r"\(WA, 2020-03-07\)"):
        load_cases_deaths(p)


def test_dip_kept_with_one_warning(tmp_path):
    p = write_csv(tmp_path / "c.csv", [CASES_HEAD, "WA,2020-03-07,100,2",
                                       "WA,2020-03-08,110,2", "WA,2020-03-09,105,2"])
    panel = load_cases_deaths(p)
    assert len(panel.warnings) == 1
    assert panel.value("cum_cases", "WA", "2020-03-09") == 105


@pytest.mark.parametrize("row, pattern", [
    ("XX,2020-03-07,1,0", "unknown state"),
    ("WA,2020-3-7,1,0", "bad ISO date"),
    ("WA,2020-03-07,abc,0", ":2: cannot parse"),
    ("WA,2020-03-07,-1,0", "negative"),
    ("WA,2020-03-07,1", "expected 4 fields"),
])
def test_malformed_rows_report_line(tmp_path, row, pattern):
    p = write_csv(tmp_path / "c.csv", [CASES_HEAD, row])
    with pytest.raises(DataError, match=pattern):
        load_cases_deaths(p)


def test_header_mismatch(tmp_path):
    p = write_csv(tmp_path / "c.csv", ["state,day,cases,deaths", "WA,2020-03-07,1,0"])
    with pytest.raises(DataError, match="header"):
        load_cases_deaths(p)


def test_missing_dates_are_nan(tmp_path):
    p = write_csv(tmp_path / "c.csv", [CASES_HEAD, "WA,2020-03-07,1,0", "WA,2020-03-09,3,0"])
    panel = load_cases_deaths(p)
    assert panel.n_dates == 3
    assert np.isnan(panel.value("cum_cases", "WA", "2020-03-08"))


def test_tests_optional_blank(tmp_path):
    p = write_csv(tmp_path / "t.csv", ["state,date,cumulative_tests", "WA,2020-03-07,", "WA,2020-03-08,50"])
    panel = load_tests(p)
    assert np.isnan(panel.value("cum_tests", "WA", "2020-03-07"))
    assert panel.value("cum_tests", "WA", "2020-03-08") == 50


def test_mobility_stored_as_fraction(tmp_path):
    p = write_csv(tmp_path / "m.csv", ["state,date,grocery,transit,retail,workplaces",
                                       "WA,2020-03-07,-25,10,,-50"])
    panel = load_mobility(p)
    assert panel.value("grocery", "WA", "2020-03-07") == -0.25
    assert panel.value("workplaces", "WA", "2020-03-07") == -0.5
    assert np.isnan(panel.value("retail", "WA", "2020-03-07"))


POLICY_HEAD = "state,policy,start_date,end_date"


def test_policy_open_end(tmp_path):
    p = write_csv(tmp_path / "p.csv", [POLICY_HEAD, "WA,stay_at_home,2020-03-23,"])
    (ev,) = load_policies(p)
    assert ev == PolicyEvent("WA", "stay_at_home", D("2020-03-23"), None)


def test_policy_errors(tmp_path):
    p = write_csv(tmp_path / "p.csv", [POLICY_HEAD, "XX,stay_at_home,2020-03-23,"])
    with pytest.raises(DataError, match="unknown state"):
        load_policies(p)
    p = write_csv(tmp_path / "p.csv", [POLICY_HEAD, "WA,stay_at_home,2020-03-23,2020-03-01"])
    with pytest.raises(DataError, match="after end_date"):
        load_policies(p)


def test_unknown_policy_goes_to_extension(tmp_path):
    p = write_csv(tmp_path / "p.csv", [POLICY_HEAD, "WA,curfew,2020-03-23,"])
    (ev,) = load_policies(p)
    assert ev.policy == "ext.curfew" and ev.is_extension


def test_indicator_modes():
    dates = np.arange(D("2020-03-20"), D("2020-05-10"), dtype="datetime64[D]")
    ev = [PolicyEvent("WA", "stay_at_home", D("2020-03-23"), D("2020-05-04"))]
    so = policy_indicator(ev, dates, "start_only", ["WA"])["stay_at_home"][0]
    se = policy_indicator(ev, dates, "start_end", ["WA"])["stay_at_home"][0]
    k = {str(d): i for i, d in enumerate(dates)}
    assert so[k["2020-03-22"]] == 0 and so[k["2020-03-23"]] == 1
    assert so[k["2020-05-05"]] == 1
    assert se[k["2020-05-04"]] == 1 and se[k["2020-05-05"]] == 0


def test_indicator_six_policies_hand_table():
    dates = np.arange(D("2020-03-10"), D("2020-03-20"), dtype="datetime64[D]")
    starts = {"mask_employees": "2020-03-19", "closed_k12": "2020-03-10", "stay_at_home": "2020-03-15",
              "closed_movies": "2020-03-12", "closed_restaurants": "2020-03-13", "closed_nonessential": "2020-03-21"}
    ev = [PolicyEvent("WA", p, D(s)) for p, s in starts.items()]
    got = policy_indicator(ev, dates, "start_only", ["WA"])
    # rows: 03-10 .. 03-19
    table = {
        "mask_employees":      [0, 0, 0, 0, 0, 0, 0, 0, 0, 1],
        "closed_k12":          [1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
        "stay_at_home":        [0, 0, 0, 0, 0, 1, 1, 1, 1, 1],
        "closed_movies":       [0, 0, 1, 1, 1, 1, 1, 1, 1, 1],
        "closed_restaurants":  [0, 0, 0, 1, 1, 1, 1, 1, 1, 1],
        "closed_nonessential": [0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    }
    for p in POLICIES:
        assert got[p][0].tolist() == table[p], p


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 60), st.one_of(st.none(), st.integers(0, 60)))
def test_indicator_start_only_monotone(start, end_off):
    dates = np.arange(D("2020-03-01"), D("2020-05-01"), dtype="datetime64[D]")
    s = D("2020-03-01") + start
    e = None if end_off is None else s + end_off
    x = policy_indicator([PolicyEvent("WA", "closed_k12", s, e)], dates, "start_only", ["WA"])["closed_k12"][0]
    assert np.all(np.diff(x) >= 0)


def _tiny(states, dates, name, fill):
    dates = np.arange(D(dates[0]), D(dates[1]) + 1, dtype="datetime64[D]")
    return Panel(tuple(states), dates, {name: np.full((len(states), dates.size), fill)})


def test_merge_intersection_and_counts():
    a = _tiny(["NY", "WA"], ("2020-03-01", "2020-03-05"), "cum_cases", 1.0)
    b = _tiny(["CA", "WA"], ("2020-03-03", "2020-03-05"), "grocery", 2.0)
    m = merge(a, b)
    assert m.states == ("WA",)
    assert set(m.series) == {"cum_cases", "grocery"}
    for arr in m.series.values():
        assert arr.size == len(m.states) * m.n_dates == 5
    assert np.isnan(m.value("grocery", "WA", "2020-03-01"))
    with pytest.raises(DataError, match="collision"):
        merge(a, a)


def test_merge_order_insensitive():
    a = _tiny(["NY", "WA"], ("2020-03-01", "2020-03-05"), "cum_cases", 1.0)
    b = _tiny(["CA", "WA"], ("2020-03-03", "2020-03-07"), "grocery", 2.0)
    c = _tiny(["WA", "NY"], ("2020-02-28", "2020-03-02"), "transit", 3.0)
    assert merge(a, b, c).equals(merge(c, a, b))
    assert merge(merge(a, b), c).equals(merge(a, merge(b, c)))


def test_covariates_extra_columns(tmp_path):
    p = write_csv(tmp_path / "v.csv", [
        "state,population,area,unemployment_rate,poverty_rate,pct_at_risk,governor_party,mask_wearing_share",
        "WA,7600000,71362,3.8,10.3,37.5,D,0.61",
        "AL,4900000,50645,2.7,16.8,42.0,R,0.45",
    ])
    cov = load_covariates(p)
    assert list(cov.index) == ["AL", "WA"]
    assert cov.loc["WA", "mask_wearing_share"] == 0.61
    assert cov.loc["AL", "governor_party"] == "R"


def test_panel_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    dates = np.arange(D("2020-03-01"), D("2020-03-11"), dtype="datetime64[D]")
    a = rng.standard_normal((2, 10)) * 1e3
    a[0, 3] = np.nan
    static = pd.DataFrame({"population": [1.0 / 3.0, 2e7], "governor_party": ["D", "R"]},
                          index=pd.Index(["NY", "WA"], name="state"))
    panel = Panel(("NY", "WA"), dates, {"cum_cases": a, "retail": rng.uniform(size=(2, 10)) / 7}, static)
    path = tmp_path / "panel.csv"
    write_panel(panel, path)
    assert sidecar_path(path).exists()
    assert read_panel(path).equals(panel)


def test_synth_round_trip(tmp_path, synth_loaded):
    path = tmp_path / "panel.csv"
    write_panel(synth_loaded, path)
    assert read_panel(path).equals(synth_loaded)
