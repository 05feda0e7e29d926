"""Derived variables and regression design matrices.

Series arrays are ``(n_states, n_dates)`` float arrays on a contiguous
daily grid; every transform works along axis 1 and leaves NaN where the
inputs do not determine a value.

Term sources understood by ``build_design``:

``<series>``
    a raw panel series (``cum_cases``, ``workplaces``, ``stay_at_home`` ...)
``business_closure``
    mean of the three closure indicators
``national:<series>``
    cross-state sum of weekly counts of a cumulative series, same for every state
``static:<column>``
    a state covariate, standardized across states (categoricals are dummy coded)
``calendar:log_days``
    log of days since ``LOG_DAYS_ORIGIN``
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, RankDeficientError
from .ingest import Panel

logger = logging.getLogger(__name__)

WEEK = 7
LOG_DAYS_ORIGIN = np.datetime64("2020-01-15", "D")
DEFAULT_WINDOW = ("2020-03-07", "2020-06-03")
BUSINESS_POLICIES = ("closed_movies", "closed_restaurants", "closed_nonessential")
CUMULATIVE_SERIES = ("cum_cases", "cum_deaths", "cum_tests")
BLOCKS = ("policy", "behavior", "information", "confounder")
TRANSFORMS = ("identity", "movavg7", "weekly_growth", "log_weekly", "weekly_log_diff", "log")
RANK_TOL = 1e-10


# --- elementary transforms -----------------------------------------------------

def lag(x: np.ndarray, ell: int) -> np.ndarray:
    """Value at t is ``x`` at ``t - ell``; the first ``ell`` days are NaN."""
    x = np.asarray(x, dtype=np.float64)
    if ell < 0:
        raise ConfigError(f"negative lag {ell}")
    out = np.full_like(x, np.nan)
    if ell == 0:
        out[...] = x
    elif ell < x.shape[-1]:
        out[..., ell:] = x[..., :-ell]
    return out


def weekly_diff(cum: np.ndarray) -> np.ndarray:
    """New counts over the past 7 days from a cumulative series."""
    cum = np.asarray(cum, dtype=np.float64)
    return cum - lag(cum, WEEK)


def rolling_sum7(flow: np.ndarray) -> np.ndarray:
    """Sum over ``[t-6, t]``; NaN if any day in the window is missing."""
    flow = np.asarray(flow, dtype=np.float64)
    out = flow.copy()
    for k in range(1, WEEK):
        out = out + lag(flow, k)
    return out


def movavg7(x: np.ndarray) -> np.ndarray:
    """Trailing mean over the 7 days ``[t-6, t]``."""
    return rolling_sum7(x) / WEEK


def safe_log(x: np.ndarray, log_zero_floor: bool = False) -> np.ndarray:
    """Natural log with nonpositive entries set to NaN.

    With ``log_zero_floor`` exact zeros map to -1 instead.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.full_like(x, np.nan)
    pos = x > 0
    out[pos] = np.log(x[pos])
    if log_zero_floor:
        out[x == 0] = -1.0
    return out


def weekly_log_diff(weekly: np.ndarray, log_zero_floor: bool = False) -> np.ndarray:
    """``log x_t - log x_{t-7}`` for a weekly count series."""
    lx = safe_log(weekly, log_zero_floor)
    return lx - lag(lx, WEEK)


def national_weekly(weekly: np.ndarray) -> np.ndarray:
    """Cross-state sum of weekly counts, broadcast back to every state.

    Missing states are skipped; a date where every state is missing stays NaN.
    """
    weekly = np.asarray(weekly, dtype=np.float64)
    total = np.nansum(weekly, axis=0)
    total[np.all(np.isnan(weekly), axis=0)] = np.nan
    return np.broadcast_to(total, weekly.shape).copy()


def national_info(panel: Panel, outcome: str = "cases", log_zero_floor: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """National weekly growth and log level for ``cases`` or ``deaths``."""
    src = {"cases": "cum_cases", "deaths": "cum_deaths"}.get(outcome, outcome)
    nat = national_weekly(weekly_diff(panel[src]))
    return weekly_log_diff(nat, log_zero_floor), safe_log(nat, log_zero_floor)


def business_composite(panel: Panel) -> np.ndarray:
    missing = [p for p in BUSINESS_POLICIES if p not in panel]
    if missing:
        raise DataError(f"business composite needs series: {', '.join(missing)}")
    a, b, c = (panel[p] for p in BUSINESS_POLICIES)
    return (a + b + c) / 3.0


def calendar_keys(dates: np.ndarray, kind: str) -> np.ndarray:
    d = pd.DatetimeIndex(np.asarray(dates, dtype="datetime64[D]"))
    if kind == "month":
        return np.array([f"{y:04d}-{m:02d}" for y, m in zip(d.year, d.month)])
    if kind == "week":
        iso = d.isocalendar()
        return np.array([f"{y:04d}-W{w:02d}" for y, w in zip(iso.year, iso.week)])
    raise ConfigError(f"unknown calendar kind {kind!r}")


def calendar_dummies(dates: np.ndarray, kind: str) -> tuple[list[str], np.ndarray]:
    """0/1 columns for each month or ISO week present, first one dropped."""
    if kind == "none":
        return [], np.zeros((len(dates), 0))
    keys = calendar_keys(dates, kind)
    levels = sorted(set(keys.tolist()))
    names = [f"{kind}[{lv}]" for lv in levels[1:]]
    mat = np.column_stack([(keys == lv).astype(np.float64) for lv in levels[1:]]) if len(levels) > 1 else np.zeros((len(dates), 0))
    return names, mat


def interactions(
    left_names: Sequence[str], left: np.ndarray, right_names: Sequence[str], right: np.ndarray
) -> tuple[list[str], np.ndarray]:
    """All pairwise products ``left[:, a] * right[:, b]``, named ``a:b``."""
    names, cols = [], []
    for a, la in enumerate(left_names):
        for b, rb in enumerate(right_names):
            names.append(f"{la}:{rb}")
            cols.append(left[:, a] * right[:, b])
    mat = np.column_stack(cols) if cols else np.zeros((left.shape[0], 0))
    return names, mat


def log_days(dates: np.ndarray) -> np.ndarray:
    days = (np.asarray(dates, dtype="datetime64[D]") - LOG_DAYS_ORIGIN).astype(np.int64)
    if np.any(days <= 0):
        raise DataError(f"log_days needs dates after {LOG_DAYS_ORIGIN}")
    return np.log(days.astype(np.float64))


def standardized_static(static: pd.DataFrame, column: str) -> tuple[list[str], np.ndarray, dict]:
    """Static covariate as standardized columns over states.

    Numeric columns give one column; string columns are dummy coded with the
    first sorted level dropped, then standardized.
    """
    if static is None:
        raise DataError("panel has no static covariates")
    if column not in static.columns:
        raise DataError(f"static covariate {column!r} not found (have: {', '.join(static.columns)})")
    raw = static[column]
    if pd.api.types.is_numeric_dtype(raw):
        names = [column]
        mat = raw.to_numpy(dtype=np.float64)[:, None]
    else:
        vals = raw.astype(str).to_numpy()
        levels = sorted(set(vals.tolist()))
        names = [f"{column}[{lv}]" for lv in levels[1:]]
        mat = np.column_stack([(vals == lv).astype(np.float64) for lv in levels[1:]]) if len(levels) > 1 else np.zeros((len(vals), 0))
    mean = mat.mean(axis=0)
    sd = mat.std(axis=0)
    scale = np.where(sd > 0, sd, 1.0)
    z = (mat - mean) / scale
    meta = {n: {"mean": float(m), "sd": float(s)} for n, m, s in zip(names, mean, sd)}
    return names, z, meta


# --- specifications ------------------------------------------------------------

@dataclass(frozen=True)
class LagConfig:
    case_lag: int = 14
    death_lag: int = 21
    week: int = WEEK

    def __post_init__(self):
        if self.week != WEEK:
            raise ConfigError("week length is fixed at 7 days")
        for name in ("case_lag", "death_lag"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")

    @classmethod
    def alternative(cls) -> "LagConfig":
        return cls(case_lag=7, death_lag=24)

    def resolve(self, lag: int | str, lag_key: str) -> int:
        if isinstance(lag, (int, np.integer)):
            if lag < 0:
                raise ConfigError(f"negative lag {lag}")
            return int(lag)
        if lag == "ell":
            lag = lag_key
        if lag in ("case_lag", "death_lag"):
            return int(getattr(self, lag))
        raise ConfigError(f"unknown lag {lag!r}")


@dataclass(frozen=True)
class TermSpec:
    name: str
    source: str
    transform: str = "identity"
    lag: int | str = 0
    block: str = "confounder"
    interactions: tuple[str, ...] = ()

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"term {self.name!r}: unknown transform {self.transform!r}")
        if self.block not in BLOCKS + ("outcome",):
            raise ConfigError(f"term {self.name!r}: unknown block {self.block!r}")
        object.__setattr__(self, "interactions", tuple(self.interactions))


@dataclass(frozen=True)
class ModelSpec:
    """One regression equation.

    ``lag_key`` names the equation lag (``case_lag`` or ``death_lag``); terms
    with ``lag="ell"`` use it. Rows are the outcome dates from
    ``window_start + offset`` through ``window_end`` where ``offset`` is
    ``window_offset`` resolved the same way.
    """

    name: str
    outcome: TermSpec
    terms: tuple[TermSpec, ...]
    cluster: str = "state"
    dummies: str = "month"
    dummy_interactions: tuple[str, ...] = ()
    zero_restrictions: tuple[str, ...] = ()
    lag_key: str = "case_lag"
    window_offset: int | str = "ell"
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "dummy_interactions", tuple(self.dummy_interactions))
        object.__setattr__(self, "zero_restrictions", tuple(self.zero_restrictions))
        names = [t.name for t in self.terms]
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise ConfigError(f"spec {self.name!r}: duplicate term names {dup}")
        unknown = [z for z in self.zero_restrictions if z not in names]
        if unknown:
            raise ConfigError(f"spec {self.name!r}: zero restriction on unknown terms {unknown}")
        if self.dummies not in ("month", "week", "none"):
            raise ConfigError(f"spec {self.name!r}: dummies must be month, week or none")
        if self.cluster != "state":
            raise ConfigError(f"spec {self.name!r}: only state clustering is supported")
        if self.lag_key not in ("case_lag", "death_lag"):
            raise ConfigError(f"spec {self.name!r}: lag_key must be case_lag or death_lag")

    def term(self, name: str) -> TermSpec:
        for t in self.terms:
            if t.name == name:
                return t
        raise ConfigError(f"spec {self.name!r} has no term {name!r}")

    def active_terms(self) -> tuple[TermSpec, ...]:
        return tuple(t for t in self.terms if t.name not in self.zero_restrictions)

    def block_names(self, block: str) -> list[str]:
        return [t.name for t in self.active_terms() if t.block == block]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["terms"] = [asdict(t) for t in self.terms]
        for t in [d["outcome"]] + d["terms"]:
            t["interactions"] = list(t["interactions"])
        for k in ("dummy_interactions", "zero_restrictions"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelSpec":
        try:
            d = dict(d)
            d["outcome"] = TermSpec(**{"block": "outcome", **d["outcome"]})
            d["terms"] = tuple(TermSpec(**t) for t in d["terms"])
            return cls(**d)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed model spec: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model spec is not valid JSON: {exc}") from None

    def without(self, names: Sequence[str]) -> "ModelSpec":
        missing = [n for n in names if n not in [t.name for t in self.terms]]
        if missing:
            raise ConfigError(f"spec {self.name!r} has no terms {missing}")
        return replace(self, terms=tuple(t for t in self.terms if t.name not in names),
                       zero_restrictions=tuple(z for z in self.zero_restrictions if z not in names))

    def restricted(self, names: Sequence[str]) -> "ModelSpec":
        names = tuple(n for n in names if n not in self.zero_restrictions)
        return replace(self, zero_restrictions=self.zero_restrictions + names)


def load_spec(path: str | Path) -> ModelSpec:
    return ModelSpec.from_json(Path(path).read_text(encoding="utf-8"))


# --- evaluation of terms -----------------------------------------------------------

@dataclass(frozen=True)
class TransformOptions:
    log_zero_floor: bool = False
    window: tuple[str, str] = DEFAULT_WINDOW


def source_array(panel: Panel, source: str, log_zero_floor: bool = False) -> tuple[np.ndarray, str]:
    """Resolve a term source to a daily array and its kind.

    Kinds: ``cumulative`` (weekly differencing applies before log transforms),
    ``weekly`` (already a 7-day count) or ``level``.
    """
    if source == "business_closure":
        return business_composite(panel), "level"
    if source.startswith("national:"):
        inner = source.split(":", 1)[1]
        base = panel[inner]
        weekly = weekly_diff(base) if inner in CUMULATIVE_SERIES else base
        return national_weekly(weekly), "weekly"
    if source == "calendar:log_days":
        return np.broadcast_to(log_days(panel.dates), (panel.n_states, panel.n_dates)).copy(), "level"
    if source.startswith("static:"):
        names, z, _ = standardized_static(panel.static, source.split(":", 1)[1])
        if len(names) != 1:
            raise ConfigError(f"source {source!r} expands to {len(names)} columns; use it as a confounder term")
        return np.repeat(z[:, :1], panel.n_dates, axis=1), "level"
    arr = panel[source]
    return arr, ("cumulative" if source in CUMULATIVE_SERIES else "level")


def apply_transform(arr: np.ndarray, kind: str, transform: str, log_zero_floor: bool = False) -> np.ndarray:
    if transform == "identity":
        return np.array(arr, dtype=np.float64)
    if transform == "movavg7":
        return movavg7(arr)
    if transform == "log":
        return safe_log(arr, log_zero_floor)
    weekly = weekly_diff(arr) if kind == "cumulative" else np.asarray(arr, dtype=np.float64)
    if transform == "log_weekly":
        return safe_log(weekly, log_zero_floor)
    if transform in ("weekly_log_diff", "weekly_growth"):
        return weekly_log_diff(weekly, log_zero_floor)
    raise ConfigError(f"unknown transform {transform!r}")


def term_array(panel: Panel, term: TermSpec, lags: LagConfig, lag_key: str, log_zero_floor: bool = False) -> np.ndarray:
    """Transformed and lagged ``(n_states, n_dates)`` array for one term."""
    arr, kind = source_array(panel, term.source, log_zero_floor)
    out = apply_transform(arr, kind, term.transform, log_zero_floor)
    return lag(out, lags.resolve(term.lag, lag_key))


def _term_columns(panel: Panel, term: TermSpec, lags: LagConfig, lag_key: str, floor: bool, meta: dict):
    """Columns contributed by one term, each ``(n_states, n_dates)``."""
    if term.source.startswith("static:") and term.transform == "identity" and lags.resolve(term.lag, lag_key) == 0:
        names, z, m = standardized_static(panel.static, term.source.split(":", 1)[1])
        meta.update(m)
        cols = [np.repeat(z[:, j:j + 1], panel.n_dates, axis=1) for j in range(z.shape[1])]
        if len(names) == 1:
            names = [term.name]
        else:
            names = [f"{term.name}{n[n.index('['):]}" for n in names]
        return names, cols
    return [term.name], [term_array(panel, term, lags, lag_key, floor)]


@dataclass(frozen=True)
class Design:
    """Regression arrays for one spec plus the identity of every row."""

    y: np.ndarray
    X: np.ndarray
    names: tuple[str, ...]
    blocks: tuple[str, ...]
    term_of: tuple[str, ...]
    states: tuple[str, ...]
    dates: np.ndarray
    row_state: np.ndarray
    row_date: np.ndarray
    spec: ModelSpec
    lags: LagConfig
    ell: int
    meta: Mapping[str, Any] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def cluster_ids(self) -> np.ndarray:
        return self.row_state

    def column(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"design {self.spec.name!r} has no column {name!r}") from None

    def row_dates(self) -> np.ndarray:
        return self.dates[self.row_date]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.spec.to_json().encode())
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        h.update(np.ascontiguousarray(self.row_state).tobytes())
        h.update(np.ascontiguousarray(self.row_date).tobytes())
        return h.hexdigest()[:16]

    def take_rows(self, idx: np.ndarray, cluster: np.ndarray | None = None) -> "Design":
        """Row subset; ``cluster`` relabels clusters (used by resampling)."""
        idx = np.asarray(idx)
        return replace(
            self,
            y=self.y[idx],
            X=self.X[idx],
            row_state=self.row_state[idx] if cluster is None else np.asarray(cluster),
            row_date=self.row_date[idx],
        )


def row_window(panel: Panel, spec: ModelSpec, lags: LagConfig, window: tuple[str, str]) -> np.ndarray:
    """Indices into ``panel.dates`` of the dates a spec uses as outcome rows."""
    offset = lags.resolve(spec.window_offset, spec.lag_key)
    start = np.datetime64(window[0], "D") + np.timedelta64(offset, "D")
    end = np.datetime64(window[1], "D")
    keep = (panel.dates >= start) & (panel.dates <= end)
    return np.flatnonzero(keep)


def build_design(
    panel: Panel,
    spec: ModelSpec,
    lags: LagConfig | None = None,
    options: TransformOptions | None = None,
    check_rank: bool = True,
) -> Design:
    lags = lags or LagConfig()
    options = options or TransformOptions()
    floor = options.log_zero_floor
    ell = lags.resolve("ell", spec.lag_key)
    meta: dict = {"static_scaling": {}}

    date_idx = row_window(panel, spec, lags, options.window)
    if date_idx.size == 0:
        raise DataError(f"spec {spec.name!r}: no dates inside the sample window")
    n_s, n_d = panel.n_states, date_idx.size
    row_state = np.repeat(np.arange(n_s), n_d)
    row_date = np.tile(date_idx, n_s)

    def flat(a: np.ndarray) -> np.ndarray:
        return a[:, date_idx].reshape(-1)

    y = flat(term_array(panel, spec.outcome, lags, spec.lag_key, floor))
    names: list[str] = []
    blocks: list[str] = []
    term_of: list[str] = []
    cols: list[np.ndarray] = []
    n = y.size
    if spec.intercept:
        names.append("const"); blocks.append("confounder"); term_of.append("const"); cols.append(np.ones(n))

    for term in spec.active_terms():
        tnames, tcols = _term_columns(panel, term, lags, spec.lag_key, floor, meta["static_scaling"])
        flat_cols = [flat(c) for c in tcols]
        names += tnames; blocks += [term.block] * len(tnames); term_of += [term.name] * len(tnames)
        cols += flat_cols
        for cov in term.interactions:
            cnames, z, m = standardized_static(panel.static, cov)
            meta["static_scaling"].update(m)
            zrows = z[row_state]
            for j, cn in enumerate(cnames):
                for tn, tc in zip(tnames, flat_cols):
                    names.append(f"{tn}:{cn}"); blocks.append(term.block); term_of.append(term.name)
                    cols.append(tc * zrows[:, j])

    dates_rows = panel.dates[row_date]
    dnames, dmat = calendar_dummies(dates_rows, spec.dummies)
    names += dnames; blocks += ["confounder"] * len(dnames); term_of += [spec.dummies] * len(dnames)
    cols += [dmat[:, j] for j in range(dmat.shape[1])]
    for cov in spec.dummy_interactions:
        cnames, z, m = standardized_static(panel.static, cov)
        meta["static_scaling"].update(m)
        inames, imat = interactions(dnames, dmat, cnames, z[row_state])
        names += inames; blocks += ["confounder"] * len(inames); term_of += [spec.dummies] * len(inames)
        cols += [imat[:, j] for j in range(imat.shape[1])]

    X = np.column_stack(cols) if cols else np.zeros((n, 0))
    ok = np.isfinite(y) & np.all(np.isfinite(X), axis=1)
    meta["rows_total"] = int(n)
    meta["rows_dropped"] = int(n - ok.sum())
    meta["outcome_missing"] = int((~np.isfinite(y)).sum())
    if not ok.any():
        raise DataError(f"spec {spec.name!r}: design is empty after dropping rows with missing values")
    design = Design(
        y=y[ok], X=X[ok], names=tuple(names), blocks=tuple(blocks), term_of=tuple(term_of),
        states=panel.states, dates=panel.dates, row_state=row_state[ok], row_date=row_date[ok],
        spec=spec, lags=lags, ell=ell, meta=meta,
    )
    if check_rank:
        check_full_rank(design.X, design.names)
    return design


def dependent_columns(X: np.ndarray, names: Sequence[str], tol: float = RANK_TOL) -> list[str]:
    """Columns that are (numerically) linear combinations of earlier ones."""
    if X.shape[1] == 0:
        return []
    scale = np.sqrt((X * X).sum(axis=0))
    bad = [names[j] for j in np.flatnonzero(scale == 0)]
    keep = np.flatnonzero(scale > 0)
    Xs = X[:, keep] / scale[keep]
    dep: list[str] = []
    basis: list[int] = []
    for j in range(Xs.shape[1]):
        cand = basis + [j]
        s = np.linalg.svd(Xs[:, cand], compute_uv=False)
        if s[-1] <= tol * s[0]:
            dep.append(names[keep[j]])
        else:
            basis.append(j)
    return bad + dep


def check_full_rank(X: np.ndarray, names: Sequence[str], tol: float = RANK_TOL) -> None:
    if X.shape[0] < X.shape[1]:
        raise RankDeficientError(names[X.shape[0]:], f"design has {X.shape[0]} rows but {X.shape[1]} columns")
    if X.shape[1] == 0:
        return
    s = np.linalg.svd(X / np.maximum(np.sqrt((X * X).sum(axis=0)), 1e-300), compute_uv=False)
    if s[-1] <= tol * s[0]:
        raise RankDeficientError(dependent_columns(X, names, tol))


def info_roles(spec: ModelSpec) -> dict[str, str]:
    """Classify information terms relative to the outcome series.

    Roles: ``own_growth``, ``own_level``, ``national_growth``,
    ``national_level`` or ``other``.
    """
    out = {}
    src = spec.outcome.source
    for t in spec.active_terms():
        if t.block != "information":
            continue
        growth = t.transform in ("weekly_log_diff", "weekly_growth")
        level = t.transform == "log_weekly"
        same_lag = t.lag in ("ell", spec.lag_key)
        if t.source == src and same_lag and (growth or level):
            out[t.name] = "own_growth" if growth else "own_level"
        elif t.source == f"national:{src}" and same_lag and (growth or level):
            out[t.name] = "national_growth" if growth else "national_level"
        else:
            out[t.name] = "other"
    return out
