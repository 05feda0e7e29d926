"""Counterfactual policy paths propagated through the fitted growth recursion.

The recursion runs on the daily grid. With ``L`` the log of the 7-day count,
each outcome row ``s`` of the reduced-form design satisfies

    L_s = L_{s-7} + a'P_{s-l} + b_g (L_{s-l} - L_{s-l-7}) + b_l L_{s-l} + r_s

where ``r_s`` collects confounders and the residual and is held at its
factual value. Factual and counterfactual paths are produced by the same
routine from the same ``r``, so an unchanged schedule gives identical paths.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError
from .ingest import EXTENSION_PREFIX, POLICIES, Panel
from .transform import (
    BUSINESS_POLICIES,
    Design,
    LagConfig,
    ModelSpec,
    TransformOptions,
    info_roles,
    safe_log,
    term_array,
    weekly_diff,
)

logger = logging.getLogger(__name__)

CONTRASTS = ("growth_change", "weekly_ratio", "cumulative_relative")
RULES = ("set_on", "set_off_always", "set_on_always", "series")
QUANTILES = (5.0, 95.0)


@dataclass(frozen=True)
class Override:
    policy: str
    rule: str
    state: str = "*"
    date: str | None = None
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"unknown override rule {self.rule!r}")
        if self.policy not in POLICIES and not self.policy.startswith(EXTENSION_PREFIX):
            raise ConfigError(f"overrides may only touch policy series, got {self.policy!r}")
        if self.rule in ("set_on", "series") and self.date is None:
            raise ConfigError(f"rule {self.rule!r} needs a date")
        if self.rule == "series" and not self.values:
            raise ConfigError("rule 'series' needs values")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))


@dataclass(frozen=True)
class Scenario:
    """A set of policy overrides.

    ``set_on`` switches the indicator on from ``date`` onward and keeps the
    factual value before it; ``series`` writes ``values`` starting at ``date``.
    """

    name: str
    overrides: tuple[Override, ...] = ()
    info_feedback: bool = False
    coefficients: str = "average"

    def __post_init__(self):
        object.__setattr__(self, "overrides", tuple(self.overrides))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "overrides": [
                {k: (list(v) if isinstance(v, tuple) else v) for k, v in o.__dict__.items() if v not in (None, ())}
                for o in self.overrides
            ],
            "info_feedback": self.info_feedback,
            "coefficients": self.coefficients,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        try:
            ovs = tuple(Override(**o) for o in d.get("overrides", []))
            return cls(d["name"], ovs, bool(d.get("info_feedback", False)), d.get("coefficients", "average"))
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed scenario: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"scenario is not valid JSON: {exc}") from None


def builtin_scenarios() -> list[Scenario]:
    return [
        Scenario("mask_march14", (Override("mask_employees", "set_on", "*", "2020-03-14"),)),
        Scenario("no_business", tuple(Override(p, "set_off_always") for p in BUSINESS_POLICIES)),
        Scenario("no_shelter", (Override("stay_at_home", "set_off_always"),)),
    ]


def identity_scenario() -> Scenario:
    return Scenario("identity")


def get_scenario(name: str) -> Scenario:
    for s in builtin_scenarios() + [identity_scenario()]:
        if s.name == name:
            return s
    raise ConfigError(f"unknown scenario {name!r}")


def apply_scenario(panel: Panel, scenario: Scenario) -> Panel:
    """Panel with the scenario's policy series replaced."""
    new: dict[str, np.ndarray] = {}
    for o in scenario.overrides:
        if o.policy not in panel:
            raise DataError(f"scenario {scenario.name!r}: policy {o.policy!r} not in panel")
        arr = new.get(o.policy, np.array(panel[o.policy]))
        rows = range(panel.n_states) if o.state == "*" else [panel.state_index(o.state)]
        rows = list(rows)
        if o.rule == "set_off_always":
            arr[rows] = 0.0
        elif o.rule == "set_on_always":
            arr[rows] = 1.0
        else:
            d = np.datetime64(o.date, "D")
            if d > panel.dates[-1]:
                raise ConfigError(f"scenario {scenario.name!r}: date {o.date} is after the sample")
            if o.rule == "set_on":
                on = panel.dates >= d
                arr[np.ix_(rows, np.flatnonzero(on))] = 1.0
            else:
                k0 = int((d - panel.dates[0]).astype(int))
                vals = np.asarray(o.values)
                lo, hi = max(k0, 0), min(k0 + vals.size, panel.n_dates)
                if hi > lo:
                    arr[np.ix_(rows, range(lo, hi))] = vals[lo - k0: hi - k0]
        new[o.policy] = arr
    return panel.with_series(new, replace=True) if new else panel


# --- recursion -----------------------------------------------------------------------

@dataclass(frozen=True)
class RecursionModel:
    """Everything the recursion needs from one fitted reduced-form equation."""

    design: Design
    policy_terms: tuple[str, ...]
    growth_term: str | None
    level_term: str | None
    national_growth_term: str | None
    national_level_term: str | None
    L_obs: np.ndarray
    D_obs: np.ndarray
    C_obs: np.ndarray
    log_zero_floor: bool = False

    @property
    def spec(self) -> ModelSpec:
        return self.design.spec


def recursion_model(panel: Panel, design: Design, options: TransformOptions | None = None) -> RecursionModel:
    options = options or TransformOptions()
    spec = design.spec
    if spec.outcome.transform not in ("weekly_log_diff", "weekly_growth"):
        raise ConfigError("counterfactual recursion needs a weekly growth outcome")
    roles = info_roles(spec)
    by_role = {r: n for n, r in roles.items() if r != "other"}
    policies = tuple(t.name for t in spec.active_terms() if t.block == "policy")
    for t in spec.active_terms():
        if t.block in ("policy", "information") and t.interactions:
            raise ConfigError(f"term {t.name!r}: interactions on policy or information terms are not supported here")
    C = np.array(panel[spec.outcome.source])
    D = weekly_diff(C)
    L = safe_log(D, options.log_zero_floor)
    return RecursionModel(
        design, policies, by_role.get("own_growth"), by_role.get("own_level"),
        by_role.get("national_growth"), by_role.get("national_level"), L, D, C, options.log_zero_floor,
    )


def _coef(theta: np.ndarray, names: Sequence[str], name: str | None) -> float:
    if name is None or name not in names:
        return 0.0
    return float(theta[names.index(name)])


def residual_rest(model: RecursionModel, theta: np.ndarray, feedback: bool) -> np.ndarray:
    """Factual ``r`` per design row: outcome minus the simulated channels."""
    d = model.design
    rest = d.y.copy()
    for name in model.policy_terms:
        rest = rest - theta[d.column(name)] * d.X[:, d.column(name)]
    channels = [model.growth_term, model.level_term]
    if feedback:
        channels += [model.national_growth_term, model.national_level_term]
    for name in channels:
        if name is not None:
            rest = rest - theta[d.column(name)] * d.X[:, d.column(name)]
    return rest


@dataclass(frozen=True)
class SimPath:
    L: np.ndarray
    D: np.ndarray
    C: np.ndarray
    start: np.ndarray


def simulate_growth(
    model: RecursionModel,
    theta: np.ndarray,
    policy_arrays: Mapping[str, np.ndarray],
    rest: np.ndarray | None = None,
    feedback: bool = False,
) -> SimPath:
    """Log weekly counts, weekly counts and cumulative counts under a schedule.

    ``policy_arrays[name]`` is the lagged policy regressor on the daily grid
    (as ``transform.term_array`` returns it).
    """
    d = model.design
    names = d.names
    ell = d.ell
    n_s, n_t = model.L_obs.shape
    if rest is None:
        rest = residual_rest(model, theta, feedback)
    R = np.full((n_s, n_t), np.nan)
    has_row = np.zeros((n_s, n_t), dtype=bool)
    R[d.row_state, d.row_date] = rest
    has_row[d.row_state, d.row_date] = True
    start = np.where(has_row.any(axis=1), has_row.argmax(axis=1), n_t)
    end = int(d.row_date.max())

    push = np.zeros((n_s, n_t))
    for name in model.policy_terms:
        push = push + _coef(theta, names, name) * policy_arrays[name]
    b_g = _coef(theta, names, model.growth_term)
    b_l = _coef(theta, names, model.level_term)
    c_g = _coef(theta, names, model.national_growth_term) if feedback else 0.0
    c_l = _coef(theta, names, model.national_level_term) if feedback else 0.0

    L = model.L_obs.copy()
    Dw = model.D_obs.copy()
    C = model.C_obs.copy()
    NL = safe_log(_nat_sum(Dw), model.log_zero_floor) if feedback else None
    for s in range(int(start.min()), end + 1):
        active = start <= s
        if not active.any():
            continue
        rows = active & has_row[:, s]
        if rows.any():
            val = L[rows, s - 7] + push[rows, s] + b_g * (L[rows, s - ell] - L[rows, s - ell - 7]) + b_l * L[rows, s - ell]
            if feedback:
                val = val + c_g * (NL[s - ell] - NL[s - ell - 7]) + c_l * NL[s - ell]
            L[rows, s] = val + R[rows, s]
            Dw[rows, s] = np.exp(L[rows, s])
        carry = active & ~has_row[:, s]
        if carry.any():
            shift = L[carry, s - 7] - model.L_obs[carry, s - 7]
            ok = np.isfinite(shift) & np.isfinite(model.L_obs[carry, s])
            idx = np.flatnonzero(carry)
            L[idx[ok], s] = model.L_obs[idx[ok], s] + shift[ok]
            Dw[idx[ok], s] = model.D_obs[idx[ok], s] * np.exp(shift[ok])
        prev = C[active, s - 7]
        C[active, s] = prev + Dw[active, s]
        if feedback:
            NL[s] = safe_log(np.atleast_1d(_nat_sum(Dw[:, s:s + 1])), model.log_zero_floor)[0]
    return SimPath(L, Dw, C, start)


def _nat_sum(a: np.ndarray) -> np.ndarray:
    out = np.nansum(a, axis=0)
    out[np.all(np.isnan(a), axis=0)] = np.nan
    return out


def counterfactual_policies(model: RecursionModel, panel: Panel, scenario: Scenario) -> dict[str, np.ndarray]:
    cf_panel = apply_scenario(panel, scenario)
    spec = model.spec
    return {
        name: term_array(cf_panel, spec.term(name), model.design.lags, spec.lag_key, model.log_zero_floor)
        for name in model.policy_terms
    }


def contrasts(factual: SimPath, counter: SimPath, cols: np.ndarray) -> dict[str, np.ndarray]:
    """State-level contrasts on the date columns ``cols``."""
    gf = factual.L[:, cols] - factual.L[:, cols - 7]
    gc = counter.L[:, cols] - counter.L[:, cols - 7]
    return {
        "growth_change": gc - gf,
        "weekly_ratio": counter.D[:, cols] / factual.D[:, cols],
        "cumulative_relative": (counter.C[:, cols] - factual.C[:, cols]) / factual.C[:, cols],
    }


def national_rollup(factual: SimPath, counter: SimPath, cols: np.ndarray) -> dict[str, np.ndarray]:
    """National contrasts from summed counts over states observed in both paths."""
    def summed(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ok = np.isfinite(a) & np.isfinite(b)
        return np.where(ok, a, 0.0).sum(axis=0), np.where(ok, b, 0.0).sum(axis=0)

    Df, Dc = summed(factual.D, counter.D)
    Cf, Cc = summed(factual.C, counter.C)
    with np.errstate(divide="ignore", invalid="ignore"):
        lf, lc = np.log(Df), np.log(Dc)
        return {
            "growth_change": (lc[cols] - lc[cols - 7]) - (lf[cols] - lf[cols - 7]),
            "weekly_ratio": Dc[cols] / Df[cols],
            "cumulative_relative": (Cc[cols] - Cf[cols]) / Cf[cols],
        }


@dataclass
class TrajectoryBands:
    """Long table ``scope, state, date, contrast, mean, lo, hi``."""

    scenario: str
    outcome: str
    frame: pd.DataFrame
    n_draws: int
    per_draw: dict[str, np.ndarray] = field(default_factory=dict)

    def endpoint(self) -> pd.DataFrame:
        last = self.frame["date"].max()
        out = self.frame[self.frame["date"] == last].copy()
        out.insert(0, "outcome", self.outcome)
        out.insert(0, "scenario", self.scenario)
        return out.reset_index(drop=True)

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _bands(stack: np.ndarray, quantiles: tuple[float, float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with np.errstate(invalid="ignore"):
        mean = stack.mean(axis=0)
        lo, hi = np.percentile(stack, quantiles, axis=0)
    # averaging identical draws can land one ulp outside the percentiles
    tiny = 1e-12 * np.maximum(1.0, np.abs(mean))
    mean = np.where((mean < lo) & (lo - mean <= tiny), lo, mean)
    mean = np.where((mean > hi) & (mean - hi <= tiny), hi, mean)
    return mean, lo, hi


def band_inference(
    panel: Panel,
    design: Design,
    theta: np.ndarray,
    scenario: Scenario,
    theta_draws: np.ndarray | None = None,
    options: TransformOptions | None = None,
    quantiles: tuple[float, float] = QUANTILES,
    outcome: str = "cases",
) -> TrajectoryBands:
    """Contrasts for the point coefficients or, with ``theta_draws``, the
    mean and percentile band across draws.

    Each draw recomputes its own residuals on the factual design before
    rerunning the recursion.
    """
    model = recursion_model(panel, design, options)
    cf_pol = counterfactual_policies(model, panel, scenario)
    fact_pol = counterfactual_policies(model, panel, identity_scenario())
    feedback = scenario.info_feedback and (model.national_growth_term or model.national_level_term) is not None
    lo_d = int(design.row_date.min())
    cols = np.arange(lo_d, int(design.row_date.max()) + 1)

    thetas = np.atleast_2d(theta) if theta_draws is None else np.asarray(theta_draws)
    per_state = {c: [] for c in CONTRASTS}
    per_nat = {c: [] for c in CONTRASTS}
    for th in thetas:
        rest = residual_rest(model, th, feedback)
        f = simulate_growth(model, th, fact_pol, rest, feedback)
        c = simulate_growth(model, th, cf_pol, rest, feedback)
        sc, nc = contrasts(f, c, cols), national_rollup(f, c, cols)
        for k in CONTRASTS:
            per_state[k].append(sc[k])
            per_nat[k].append(nc[k])

    dates = [str(d) for d in design.dates[cols]]
    recs = []
    per_draw = {}
    for k in CONTRASTS:
        nat = np.stack(per_nat[k])
        st = np.stack(per_state[k])
        per_draw[f"national:{k}"] = nat
        m, lo, hi = _bands(nat, quantiles)
        for t, d in enumerate(dates):
            recs.append(("national", "US", d, k, m[t], lo[t], hi[t]))
        m, lo, hi = _bands(st, quantiles)
        for i, s in enumerate(design.states):
            for t, d in enumerate(dates):
                recs.append(("state", s, d, k, m[i, t], lo[i, t], hi[i, t]))
    frame = pd.DataFrame(recs, columns=["scope", "state", "date", "contrast", "mean", "lo", "hi"])
    return TrajectoryBands(scenario.name, outcome, frame, thetas.shape[0], per_draw)


def load_scenario(path: str | Path) -> Scenario:
    return Scenario.from_json(Path(path).read_text(encoding="utf-8"))
