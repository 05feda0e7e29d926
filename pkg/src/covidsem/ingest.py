"""Readers for the raw input files and the aligned ``Panel`` container."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DataError

logger = logging.getLogger(__name__)

STATE_CODES: tuple[str, ...] = (
    "AK", "AL", "AR", "AZ", "CA", "CO", "CT", "DC", "DE", "FL", "GA", "HI", "IA", "ID", "IL",
    "IN", "KS", "KY", "LA", "MA", "MD", "ME", "MI", "MN", "MO", "MS", "MT", "NC", "ND", "NE",
    "NH", "NJ", "NM", "NV", "NY", "OH", "OK", "OR", "PA", "RI", "SC", "SD", "TN", "TX", "UT",
    "VA", "VT", "WA", "WI", "WV", "WY",
)
_STATE_SET = frozenset(STATE_CODES)

POLICIES: tuple[str, ...] = (
    "mask_employees",
    "closed_k12",
    "stay_at_home",
    "closed_movies",
    "closed_restaurants",
    "closed_nonessential",
)
EXTENSION_PREFIX = "ext."

MOBILITY_COLUMNS: tuple[str, ...] = ("grocery", "transit", "retail", "workplaces")
COVARIATE_COLUMNS: tuple[str, ...] = (
    "population", "area", "unemployment_rate", "poverty_rate", "pct_at_risk", "governor_party",
)

CASES_HEADER = ("state", "date", "cumulative_cases", "cumulative_deaths")
TESTS_HEADER = ("state", "date", "cumulative_tests")
POLICY_HEADER = ("state", "policy", "start_date", "end_date")
MOBILITY_HEADER = ("state", "date") + MOBILITY_COLUMNS
PANEL_HEADER = ("state", "date", "series", "value")


@dataclass(frozen=True)
class PolicyEvent:
    state: str
    policy: str
    start_date: np.datetime64
    end_date: np.datetime64 | None = None

    @property
    def is_extension(self) -> bool:
        return self.policy.startswith(EXTENSION_PREFIX)


@dataclass(frozen=True)
class Panel:
    """State by date store of named daily series plus static covariates.

    ``series[name]`` is a float array of shape ``(len(states), len(dates))``
    with NaN marking a missing slot. ``dates`` is a contiguous daily
    ``datetime64[D]`` array. Instances are treated as immutable: arrays are
    flagged read-only on construction.
    """

    states: tuple[str, ...]
    dates: np.ndarray
    series: Mapping[str, np.ndarray] = field(default_factory=dict)
    static: pd.DataFrame | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        if dates.ndim != 1:
            raise DataError("dates must be one-dimensional")
        if len(dates) > 1 and np.any(np.diff(dates).astype(int) != 1):
            raise DataError("panel dates must be contiguous at daily frequency")
        dates = dates.copy()
        dates.setflags(write=False)
        object.__setattr__(self, "dates", dates)
        shape = (len(self.states), len(dates))
        frozen = {}
        for name, arr in self.series.items():
            a = np.array(arr, dtype=np.float64)
            if a.shape != shape:
                raise DataError(f"series {name!r} has shape {a.shape}, expected {shape}")
            a.setflags(write=False)
            frozen[name] = a
        object.__setattr__(self, "series", frozen)
        object.__setattr__(self, "states", tuple(self.states))

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.series[name]
        except KeyError:
            raise DataError(f"series {name!r} not in panel (have: {', '.join(sorted(self.series))})") from None

    def __contains__(self, name: str) -> bool:
        return name in self.series

    def state_index(self, state: str) -> int:
        try:
            return self.states.index(state)
        except ValueError:
            raise DataError(f"state {state!r} not in panel") from None

    def date_index(self, date) -> int:
        d = np.datetime64(date, "D")
        k = int((d - self.dates[0]).astype(int))
        if k < 0 or k >= self.n_dates:
            raise DataError(f"date {d} outside panel range {self.dates[0]}..{self.dates[-1]}")
        return k

    def value(self, name: str, state: str, date) -> float:
        return float(self[name][self.state_index(state), self.date_index(date)])

    def with_series(self, extra: Mapping[str, np.ndarray], replace: bool = False) -> "Panel":
        clash = set(extra) & set(self.series)
        if clash and not replace:
            raise DataError(f"series name collision: {', '.join(sorted(clash))}")
        merged = dict(self.series)
        merged.update(extra)
        return Panel(self.states, self.dates, merged, self.static, self.warnings)

    def subset(self, states: Sequence[str] | None = None, start=None, end=None) -> "Panel":
        states = tuple(states) if states is not None else self.states
        rows = [self.state_index(s) for s in states]
        lo = 0 if start is None else max(0, int((np.datetime64(start, "D") - self.dates[0]).astype(int)))
        hi = self.n_dates if end is None else min(self.n_dates, int((np.datetime64(end, "D") - self.dates[0]).astype(int)) + 1)
        if hi <= lo:
            raise DataError("empty date window")
        series = {k: v[np.ix_(rows, range(lo, hi))] for k, v in self.series.items()}
        static = None if self.static is None else self.static.loc[list(states)]
        return Panel(states, self.dates[lo:hi], series, static, self.warnings)

    def equals(self, other: "Panel") -> bool:
        if self.states != other.states or not np.array_equal(self.dates, other.dates):
            return False
        if list(self.series) != list(other.series):
            return False
        for k in self.series:
            a, b = self.series[k], other.series[k]
            if not np.array_equal(a.view(np.uint64), b.view(np.uint64)):
                return False
        if (self.static is None) != (other.static is None):
            return False
        if self.static is not None and not self.static.equals(other.static):
            return False
        return True

    def to_long(self) -> pd.DataFrame:
        rows = []
        for name in sorted(self.series):
            arr = self.series[name]
            for i, s in enumerate(self.states):
                for t, d in enumerate(self.dates):
                    rows.append((s, str(d), name, arr[i, t]))
        return pd.DataFrame(rows, columns=list(PANEL_HEADER))


# --- parsing helpers -------------------------------------------------------

def _open_rows(path: str | Path, header: Sequence[str], allow_extra: bool = False):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            got = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        want = list(header)
        if (got[: len(want)] if allow_extra else got) != want:
            raise DataError(f"{path}: header {got} does not match expected {want}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(got):
                raise DataError(f"{path}:{lineno}: expected {len(got)} fields, got {len(row)}")
            yield lineno, got, [c.strip() for c in row]


def _state(code: str, where: str) -> str:
    if code not in _STATE_SET:
        raise DataError(f"{where}: unknown state code {code!r}")
    return code


def _date(text: str, where: str) -> np.datetime64:
    try:
        d = np.datetime64(text, "D")
    except ValueError:
        raise DataError(f"{where}: bad ISO date {text!r}") from None
    if len(text) != 10:
        raise DataError(f"{where}: bad ISO date {text!r}")
    return d


def _number(text: str, where: str, *, nonneg: bool = False, optional: bool = False) -> float:
    if text == "" and optional:
        return math.nan
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{where}: cannot parse number {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{where}: non-finite value {text!r}")
    if nonneg and v < 0:
        raise DataError(f"{where}: negative count {text!r}")
    return v


def _assemble(path, records: dict, names: Sequence[str]) -> tuple[tuple[str, ...], np.ndarray, dict]:
    if not records:
        raise DataError(f"{path}: no data rows")
    states = tuple(sorted({k[0] for k in records}))
    all_dates = [k[1] for k in records]
    d0, d1 = min(all_dates), max(all_dates)
    dates = np.arange(d0, d1 + np.timedelta64(1, "D"), dtype="datetime64[D]")
    sidx = {s: i for i, s in enumerate(states)}
    series = {n: np.full((len(states), len(dates)), np.nan) for n in names}
    for (s, d), vals in records.items():
        i, t = sidx[s], int((d - d0).astype(int))
        for n, v in zip(names, vals):
            series[n][i, t] = v
    return states, dates, series


def _monotone_warnings(path, states, dates, series: dict) -> list[str]:
    out = []
    for name, arr in series.items():
        for i, s in enumerate(states):
            row = arr[i]
            last = math.nan
            for t in range(row.size):
                v = row[t]
                if math.isnan(v):
                    continue
                if not math.isnan(last) and v < last:
                    msg = f"{Path(path).name}: {name} decreases for {s} on {dates[t]} ({last:g} -> {v:g})"
                    logger.warning(msg)
                    out.append(msg)
                last = v
    return out


def _read_daily(path, header, value_names, *, nonneg: bool, optional: Sequence[bool]):
    records: dict = {}
    for lineno, _, row in _open_rows(path, header):
        where = f"{path}:{lineno}"
        s = _state(row[0], where)
        d = _date(row[1], where)
        if (s, d) in records:
            raise DataError(f"{where}: duplicate (state, date) pair ({s}, {d})")
        records[(s, d)] = [
            _number(c, where, nonneg=nonneg, optional=opt) for c, opt in zip(row[2:], optional)
        ]
    return _assemble(path, records, value_names)


# --- public loaders ---------------------------------------------------------

def load_cases_deaths(path: str | Path) -> Panel:
    states, dates, series = _read_daily(
        path, CASES_HEADER, ("cum_cases", "cum_deaths"), nonneg=True, optional=(False, False)
    )
    warns = _monotone_warnings(path, states, dates, series)
    return Panel(states, dates, series, None, tuple(warns))


def load_tests(path: str | Path) -> Panel:
    states, dates, series = _read_daily(path, TESTS_HEADER, ("cum_tests",), nonneg=True, optional=(True,))
    warns = _monotone_warnings(path, states, dates, series)
    return Panel(states, dates, series, None, tuple(warns))


def load_mobility(path: str | Path) -> Panel:
    """Mobility percent changes, stored as fractions (``-25`` becomes ``-0.25``)."""
    states, dates, series = _read_daily(
        path, MOBILITY_HEADER, MOBILITY_COLUMNS, nonneg=False, optional=(True,) * 4
    )
    series = {k: v / 100.0 for k, v in series.items()}
    return Panel(states, dates, series)


def load_policies(path: str | Path) -> list[PolicyEvent]:
    events: list[PolicyEvent] = []
    seen: dict[tuple[str, str], int] = {}
    for lineno, _, row in _open_rows(path, POLICY_HEADER):
        where = f"{path}:{lineno}"
        s = _state(row[0], where)
        name = row[1]
        if not name:
            raise DataError(f"{where}: empty policy name")
        if name not in POLICIES and not name.startswith(EXTENSION_PREFIX):
            name = EXTENSION_PREFIX + name
        start = _date(row[2], where)
        end = _date(row[3], where) if row[3] else None
        if end is not None and end < start:
            raise DataError(f"{where}: start_date {start} after end_date {end} for {s}/{name}")
        if (s, name) in seen:
            raise DataError(f"{where}: second event for ({s}, {name}); first on line {seen[(s, name)]}")
        seen[(s, name)] = lineno
        events.append(PolicyEvent(s, name, start, end))
    return events


def load_covariates(path: str | Path) -> pd.DataFrame:
    """One row per state, indexed by state code and sorted."""
    rows = {}
    extra: list[str] = []
    for lineno, header, row in _open_rows(path, ("state",) + COVARIATE_COLUMNS, allow_extra=True):
        where = f"{path}:{lineno}"
        extra = header[1 + len(COVARIATE_COLUMNS):]
        s = _state(row[0], where)
        if s in rows:
            raise DataError(f"{where}: duplicate covariate row for {s}")
        rec: dict = {}
        for name, cell in zip(header[1:], row[1:]):
            if name == "governor_party":
                rec[name] = cell
            elif name in COVARIATE_COLUMNS:
                rec[name] = _number(cell, where)
            else:
                try:
                    rec[name] = float(cell) if cell != "" else math.nan
                except ValueError:
                    rec[name] = cell
        if rec["population"] <= 0 or rec["area"] <= 0:
            raise DataError(f"{where}: population and area must be positive for {s}")
        rows[s] = rec
    if not rows:
        raise DataError(f"{path}: no data rows")
    df = pd.DataFrame.from_dict(rows, orient="index")
    df = df[list(COVARIATE_COLUMNS) + list(extra)].sort_index()
    df.index.name = "state"
    return df


def policy_indicator(
    events: Iterable[PolicyEvent],
    dates: np.ndarray,
    mode: str = "start_only",
    states: Sequence[str] | None = None,
    policies: Sequence[str] | None = None,
) -> dict[str, np.ndarray]:
    """Daily 0/1 indicators, one ``(states x dates)`` array per policy.

    States without an event for a policy get zeros. An open end date runs to
    the end of ``dates``.
    """
    if mode not in ("start_only", "start_end"):
        raise DataError(f"unknown policy indicator mode {mode!r}")
    events = list(events)
    dates = np.asarray(dates, dtype="datetime64[D]")
    if states is None:
        states = sorted({e.state for e in events})
    if policies is None:
        names = list(POLICIES) + sorted({e.policy for e in events if e.policy not in POLICIES})
    else:
        names = list(policies)
    sidx = {s: i for i, s in enumerate(states)}
    out = {p: np.zeros((len(states), len(dates))) for p in names}
    for e in events:
        if e.policy not in out or e.state not in sidx:
            continue
        on = dates >= e.start_date
        if mode == "start_end" and e.end_date is not None:
            on &= dates <= e.end_date
        out[e.policy][sidx[e.state]] = on.astype(np.float64)
    return out


def policy_panel(events, states: Sequence[str], dates, mode: str = "start_only") -> Panel:
    return Panel(tuple(states), dates, policy_indicator(events, dates, mode, states))


def merge(*panels: Panel) -> Panel:
    """Union of dates, intersection of states; series names must be disjoint."""
    if not panels:
        raise DataError("merge needs at least one panel")
    seen: set[str] = set()
    for p in panels:
        clash = seen & set(p.series)
        if clash:
            raise DataError(f"series name collision in merge: {', '.join(sorted(clash))}")
        seen |= set(p.series)
    states = sorted(set.intersection(*(set(p.states) for p in panels)))
    if not states:
        raise DataError("merged panels share no states")
    d0 = min(p.dates[0] for p in panels if p.n_dates)
    d1 = max(p.dates[-1] for p in panels if p.n_dates)
    dates = np.arange(d0, d1 + np.timedelta64(1, "D"), dtype="datetime64[D]")
    series: dict[str, np.ndarray] = {}
    for p in panels:
        rows = [p.state_index(s) for s in states]
        off = int((p.dates[0] - d0).astype(int))
        for name, arr in p.series.items():
            full = np.full((len(states), len(dates)), np.nan)
            full[:, off: off + p.n_dates] = arr[rows]
            series[name] = full
    statics = [p.static for p in panels if p.static is not None]
    static = None
    if statics:
        static = pd.concat(statics, axis=1).loc[states]
        static = static.loc[:, ~static.columns.duplicated()]
    warnings = tuple(w for p in panels for w in p.warnings)
    return Panel(tuple(states), dates, dict(sorted(series.items())), static, warnings)


def attach_covariates(panel: Panel, covariates: pd.DataFrame) -> Panel:
    missing = [s for s in panel.states if s not in covariates.index]
    if missing:
        raise DataError(f"covariates missing for states: {', '.join(missing)}")
    return Panel(panel.states, panel.dates, panel.series, covariates.loc[list(panel.states)], panel.warnings)


def load_panel_sources(
    cases_deaths: str | Path,
    policies: str | Path,
    mobility: str | Path,
    covariates: str | Path,
    tests: str | Path | None = None,
    policy_mode: str = "start_only",
) -> Panel:
    """Read all raw files and return the merged panel."""
    parts = [load_cases_deaths(cases_deaths), load_mobility(mobility)]
    if tests is not None:
        parts.append(load_tests(tests))
    base = merge(*parts)
    events = load_policies(policies)
    pol = policy_panel(events, base.states, base.dates, policy_mode)
    full = merge(base, pol)
    return attach_covariates(full, load_covariates(covariates))


# --- canonical panel file ----------------------------------------------------

def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_panel(panel: Panel, path: str | Path) -> tuple[Path, Path | None]:
    """Write the long-format panel CSV and, if present, a covariates sidecar.

    Floats are written with ``repr`` so a reload is bit-exact.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PANEL_HEADER)
        date_str = [str(d) for d in panel.dates]
        for name in sorted(panel.series):
            arr = panel.series[name]
            for i, s in enumerate(panel.states):
                for t, d in enumerate(date_str):
                    w.writerow((s, d, name, _fmt(arr[i, t])))
    side = None
    if panel.static is not None:
        side = sidecar_path(path)
        df = panel.static.copy()
        with side.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["state"] + list(df.columns))
            for s, row in df.iterrows():
                w.writerow([s] + [_fmt(v) if isinstance(v, float) else v for v in row.tolist()])
    return path, side


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".covariates.csv")


def read_panel(path: str | Path) -> Panel:
    path = Path(path)
    names: list[str] = []
    states: set[str] = set()
    dates: set[np.datetime64] = set()
    raw: list[tuple[str, np.datetime64, str, float]] = []
    for lineno, _, row in _open_rows(path, PANEL_HEADER):
        where = f"{path}:{lineno}"
        s = _state(row[0], where)
        d = _date(row[1], where)
        v = _number(row[3], where, optional=True) if row[3] not in ("nan", "NaN") else math.nan
        raw.append((s, d, row[2], v))
        states.add(s)
        dates.add(d)
        if row[2] not in names:
            names.append(row[2])
    if not raw:
        raise DataError(f"{path}: no data rows")
    st = tuple(sorted(states))
    d0, d1 = min(dates), max(dates)
    grid = np.arange(d0, d1 + np.timedelta64(1, "D"), dtype="datetime64[D]")
    sidx = {s: i for i, s in enumerate(st)}
    series = {n: np.full((len(st), len(grid)), np.nan) for n in sorted(names)}
    for s, d, n, v in raw:
        series[n][sidx[s], int((d - d0).astype(int))] = v
    static = None
    side = sidecar_path(path)
    if side.exists():
        df = pd.read_csv(side, dtype={"state": str, "governor_party": str}, keep_default_na=False, na_values=[""],
                         float_precision="round_trip")
        static = df.set_index("state").loc[list(st)]
    return Panel(st, grid, series, static)
