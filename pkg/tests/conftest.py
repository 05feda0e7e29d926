from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from covidsem.ingest import load_panel_sources
from covidsem.sird import SynthConfig, synth_panel, write_synth
from covidsem.transform import Design, LagConfig, ModelSpec, TermSpec


def write_csv(path: Path, lines: list[str]) -> Path:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def make_design(y, X, names, states, periods=None, spec_name="fixture") -> Design:
    """Design from raw arrays; ``states`` and ``periods`` are per-row integer ids."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(y.size, -1)
    states = np.asarray(states, dtype=np.int64)
    periods = np.arange(y.size) if periods is None else np.asarray(periods, dtype=np.int64)
    n_states = int(states.max()) + 1
    n_dates = int(periods.max()) + 1
    spec = ModelSpec(spec_name, TermSpec("y", "y", block="outcome"),
                     tuple(TermSpec(n, n) for n in names if n != "const"), dummies="none",
                     intercept="const" in names)
    dates = np.arange(np.datetime64("2020-01-01"), np.datetime64("2020-01-01") + n_dates, dtype="datetime64[D]")
    return Design(y=y, X=X, names=tuple(names), blocks=("confounder",) * len(names), term_of=tuple(names),
                  states=tuple(f"S{i}" for i in range(n_states)), dates=dates, row_state=states,
                  row_date=periods, spec=spec, lags=LagConfig(), ell=0)


@pytest.fixture(scope="session")
def synth():
    return synth_panel(SynthConfig(), seed=0)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory, synth):
    out = tmp_path_factory.mktemp("synth")
    write_synth(synth, out)
    return out


@pytest.fixture(scope="session")
def synth_loaded(synth_dir):
    """Synthetic panel after the CSV round trip through the ingest loaders."""
    d = synth_dir
    return load_panel_sources(d / "cases_deaths.csv", d / "policies.csv", d / "mobility.csv",
                              d / "covariates.csv", d / "tests.csv")


# --- acceptance summary -----------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and not rep.skipped and not rep.failed):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "results": []})
    entry["results"].append("skip" if rep.skipped else "fail" if rep.failed else "pass")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        res = entry["results"]
        if "fail" in res:
            verdict = "FAIL"
        elif all(r == "skip" for r in res):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        detail = f"{res.count('pass')} passed, {res.count('fail')} failed, {res.count('skip')} skipped"
        terminalreporter.write_line(f"criterion {number} {verdict}: {entry['title']} ({detail})")
