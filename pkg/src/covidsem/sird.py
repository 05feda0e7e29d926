"""SIRD model with a detection process, and a synthetic panel generator.

Compartments evolve as

    S' = -beta S I / N            I' = beta S I / N - gamma I
    R' = (1 - kappa) gamma I      D' = kappa gamma I
    C' = tau(t) I

integrated with fixed-step classical RK4, vectorized across states.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, NumericalError
from .ingest import (
    CASES_HEADER,
    COVARIATE_COLUMNS,
    MOBILITY_COLUMNS,
    MOBILITY_HEADER,
    POLICY_HEADER,
    STATE_CODES,
    TESTS_HEADER,
    Panel,
    PolicyEvent,
    policy_indicator,
)
from .transform import BUSINESS_POLICIES, safe_log, weekly_diff, weekly_log_diff

BetaFn = Callable[[float, np.ndarray], np.ndarray]
TauFn = Callable[[float], np.ndarray]


@dataclass
class SirdParams:
    N: np.ndarray
    gamma: float
    kappa: float
    beta_fn: BetaFn
    tau_fn: TauFn
    S0: np.ndarray
    I0: np.ndarray
    R0: np.ndarray | float = 0.0
    D0: np.ndarray | float = 0.0
    C0: np.ndarray | float = 0.0

    def __post_init__(self):
        self.N = np.atleast_1d(np.asarray(self.N, dtype=np.float64))
        n = self.N.size
        for name in ("S0", "I0", "R0", "D0", "C0"):
            setattr(self, name, np.broadcast_to(np.asarray(getattr(self, name), dtype=np.float64), (n,)).copy())
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError(f"kappa must lie in [0, 1], got {self.kappa}")
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        total = self.S0 + self.I0 + self.R0 + self.D0
        if not np.allclose(total, self.N, rtol=1e-12, atol=0.0):
            raise ConfigError("initial S + I + R + D must equal N")


@dataclass(frozen=True)
class SirdPath:
    """Compartments sampled at ``t``; arrays are ``(n_states, len(t))``."""

    t: np.ndarray
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray
    D: np.ndarray
    C: np.ndarray
    dt: float

    def weekly_cases(self) -> np.ndarray:
        return weekly_diff(self.C)

    def weekly_growth(self) -> np.ndarray:
        return weekly_log_diff(self.weekly_cases())


def _rhs(t: float, y: np.ndarray, p: SirdParams) -> np.ndarray:
    S, I = y[0], y[1]
    beta = np.asarray(p.beta_fn(t, S / p.N), dtype=np.float64)
    if np.any(beta < 0):
        raise NumericalError(f"negative infection rate at t={t:g}")
    tau = np.asarray(p.tau_fn(t), dtype=np.float64)
    inf = beta * S * I / p.N
    rec = p.gamma * I
    return np.stack([-inf, inf - rec, (1.0 - p.kappa) * rec, p.kappa * rec, tau * I])


def integrate(params: SirdParams, days: float, dt: float = 0.1, record: str = "daily") -> SirdPath:
    """Classical RK4 with a fixed step.

    ``record="daily"`` samples at integer days, ``"step"`` at every step.
    """
    if not 0 < dt <= 0.25:
        raise ConfigError(f"dt must lie in (0, 0.25], got {dt}")
    per_day = round(1.0 / dt)
    if record == "daily" and abs(per_day * dt - 1.0) > 1e-9:
        raise ConfigError("daily recording needs 1/dt to be an integer")
    n_steps = int(round(days / dt))
    y = np.stack([params.S0, params.I0, params.R0, params.D0, params.C0]).astype(np.float64)
    keep = [y.copy()]
    times = [0.0]
    for k in range(n_steps):
        t = k * dt
        k1 = _rhs(t, y, params)
        k2 = _rhs(t + dt / 2, y + dt / 2 * k1, params)
        k3 = _rhs(t + dt / 2, y + dt / 2 * k2, params)
        k4 = _rhs(t + dt, y + dt * k3, params)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if np.any(y[:4] < 0):
            raise NumericalError(f"negative compartment at t={(k + 1) * dt:g}; retry with a smaller dt")
        if record == "step" or (k + 1) % per_day == 0:
            keep.append(y.copy())
            times.append((k + 1) * dt)
    arr = np.stack(keep, axis=-1)
    return SirdPath(np.array(times), arr[0], arr[1], arr[2], arr[3], arr[4], dt)


def growth_identity_check(
    path: SirdPath,
    params: SirdParams,
    include_tau_term: bool = True,
    at: Sequence[float] | None = None,
    tau_dot: Callable[[float], np.ndarray] | None = None,
) -> float:
    """Max over evaluation times of ``|C''/C' - (S/N beta - gamma + tau'/tau)|``.

    ``path`` must be recorded at every step. Derivatives of ``C`` are central
    differences on that grid; ``tau'`` is analytic when ``tau_dot`` is given,
    else a central difference with the same step. By default the check runs
    at every interior integer day.
    """
    h = path.dt
    t = path.t
    if at is None:
        at = np.arange(1, int(math.floor(t[-1] - h)) + 1, dtype=float)
    dev = 0.0
    for ti in at:
        k = int(round(ti / h))
        if k < 1 or k >= t.size - 1:
            raise ConfigError(f"evaluation time {ti} is not interior to the path")
        C = path.C[:, k - 1: k + 2]
        c1 = (C[:, 2] - C[:, 0]) / (2 * h)
        c2 = (C[:, 2] - 2 * C[:, 1] + C[:, 0]) / (h * h)
        s_frac = path.S[:, k] / params.N
        rhs = s_frac * np.asarray(params.beta_fn(t[k], s_frac)) - params.gamma
        if include_tau_term:
            tau = np.asarray(params.tau_fn(t[k]))
            if tau_dot is not None:
                td = np.asarray(tau_dot(t[k]))
            else:
                td = (np.asarray(params.tau_fn(t[k] + h)) - np.asarray(params.tau_fn(t[k] - h))) / (2 * h)
            rhs = rhs + td / tau
        dev = max(dev, float(np.max(np.abs(c2 / c1 - rhs))))
    return dev


# --- synthetic panel ----------------------------------------------------------------------

SYNTH_POLICIES = ("mask_employees", "closed_k12", "stay_at_home", "business_closure")

# daily-rate effects on infection growth
DEFAULT_THETA = {"mask_employees": -0.015, "closed_k12": -0.02, "stay_at_home": -0.025, "business_closure": -0.03}

# (first, last) start offset in days from the sample start, and number of adopting states
DEFAULT_ADOPTION = {
    "mask_employees": (25, 65, 44),
    "closed_k12": (5, 35, 51),
    "stay_at_home": (10, 35, 42),
    "closed_movies": (6, 30, 51),
    "closed_restaurants": (6, 25, 51),
    "closed_nonessential": (12, 45, 40),
}

# behavior response to each policy (fractions of baseline mobility)
DEFAULT_BEHAVIOR_RESPONSE = {
    "workplaces": {"closed_k12": -0.10, "stay_at_home": -0.08, "business_closure": -0.12, "mask_employees": 0.0},
    "retail": {"closed_k12": -0.12, "stay_at_home": -0.06, "business_closure": -0.20, "mask_employees": 0.0},
    "grocery": {"closed_k12": -0.05, "stay_at_home": -0.07, "business_closure": -0.05, "mask_employees": 0.0},
    "transit": {"closed_k12": -0.10, "stay_at_home": -0.08, "business_closure": -0.10, "mask_employees": 0.0},
}


@dataclass
class SynthConfig:
    """Settings for ``synth_panel``.

    ``infection_lag`` is the delay (days) between a daily regressor value and
    the infection growth it moves. The default ``lag - 3.5`` puts the peak of
    the triangular kernel through which weekly case growth responds to daily
    infection growth on the center of the lagged 7-day regressor average.
    """

    n_states: int = 51
    days: int = 90
    burn_in: int = 35
    start: str = "2020-03-07"
    theta: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_THETA))
    alpha: Mapping[str, float] = field(default_factory=lambda: {b: 0.0 for b in MOBILITY_COLUMNS})
    base_growth: float = 0.07
    covariate_growth: float = 0.01
    gamma: float = 0.2
    kappa: float = 0.02
    noise: float = 0.0
    noise_ar: float = 0.0
    behavior_noise: float = 0.02
    lag: int = 14
    infection_lag: float | None = None
    tau0: float = 0.2
    tau_ramp: float = 1.0
    tau_ramp_day: float | None = None
    tau_ramp_width: float = 4.0
    initial_infected: float = 1e-6
    dt: float = 0.1
    adoption: Mapping[str, tuple[int, int, int]] = field(default_factory=lambda: dict(DEFAULT_ADOPTION))
    behavior_response: Mapping[str, Mapping[str, float]] = field(default_factory=lambda: dict(DEFAULT_BEHAVIOR_RESPONSE))
    max_retries: int = 20

    @property
    def delay(self) -> float:
        return self.lag - 3.5 if self.infection_lag is None else float(self.infection_lag)

    @property
    def first_date(self) -> np.datetime64:
        return np.datetime64(self.start, "D") - np.timedelta64(self.burn_in, "D")

    @property
    def window(self) -> tuple[str, str]:
        end = np.datetime64(self.start, "D") + np.timedelta64(self.days - 1, "D")
        return (self.start, str(end))


@dataclass
class SynthResult:
    panel: Panel
    events: list[PolicyEvent]
    covariates: pd.DataFrame
    truth: dict
    path: SirdPath
    growth_rate: np.ndarray


def _covariates(rng: np.random.Generator, states: Sequence[str]) -> pd.DataFrame:
    n = len(states)
    df = pd.DataFrame(
        {
            "population": np.round(np.exp(rng.uniform(np.log(6e5), np.log(4e7), n))),
            "area": np.round(np.exp(rng.uniform(np.log(1.5e2), np.log(6e5), n)), 1),
            "unemployment_rate": np.round(rng.uniform(2.5, 6.5, n), 2),
            "poverty_rate": np.round(rng.uniform(7.0, 20.0, n), 2),
            "pct_at_risk": np.round(rng.uniform(30.0, 45.0, n), 2),
            "governor_party": np.where(rng.uniform(size=n) < 0.5, "R", "D"),
        },
        index=pd.Index(list(states), name="state"),
    )
    return df[list(COVARIATE_COLUMNS)]


def _events(rng: np.random.Generator, states: Sequence[str], start: np.datetime64, adoption) -> list[PolicyEvent]:
    out = []
    for policy, (lo, hi, count) in adoption.items():
        adopters = set(rng.choice(len(states), size=min(count, len(states)), replace=False).tolist())
        offsets = rng.integers(lo, hi + 1, len(states))
        for i, s in enumerate(states):
            if i in adopters:
                out.append(PolicyEvent(s, policy, start + np.timedelta64(int(offsets[i]), "D")))
    out.sort(key=lambda e: (e.state, e.policy))
    return out


def synth_panel(config: SynthConfig | None = None, seed: int = 0) -> SynthResult:
    """Simulate a state panel whose infection growth is linear in policies.

    For state ``i`` the growth of infections ``beta S/N - gamma`` at time
    ``u`` equals ``g_i + theta'P_i + alpha'B_i`` evaluated at ``u - delay``
    plus a daily shock, where ``g_i`` depends on standardized unemployment.
    Weekly regression coefficients should therefore come out near
    ``7 * theta``. Detection ``tau`` ramps logistically by the factor
    ``1 + tau_ramp`` and daily tests are proportional to it, which gives
    the test-growth confounder a unit coefficient.
    """
    cfg = config or SynthConfig()
    if cfg.n_states > len(STATE_CODES):
        raise ConfigError(f"at most {len(STATE_CODES)} synthetic states")
    for attempt in range(cfg.max_retries + 1):
        rng = np.random.default_rng([int(seed), attempt])
        try:
            return _synth_once(cfg, rng, seed, attempt)
        except NumericalError:
            continue
    raise NumericalError(f"synthetic panel failed after {cfg.max_retries} retries")


def _synth_once(cfg: SynthConfig, rng: np.random.Generator, seed: int, attempt: int) -> SynthResult:
    states = tuple(sorted(STATE_CODES[: cfg.n_states]))
    n = len(states)
    n_days = cfg.burn_in + cfg.days
    d0 = cfg.first_date
    dates = np.arange(d0, d0 + np.timedelta64(n_days, "D"), dtype="datetime64[D]")
    start = np.datetime64(cfg.start, "D")

    cov = _covariates(rng, states)
    events = _events(rng, states, start, cfg.adoption)
    ind = policy_indicator(events, dates, "start_only", states)
    ind["business_closure"] = (ind["closed_movies"] + ind["closed_restaurants"] + ind["closed_nonessential"]) / 3.0

    behavior = {}
    for b in MOBILITY_COLUMNS:
        resp = cfg.behavior_response.get(b, {})
        val = np.zeros((n, n_days))
        for p, c in resp.items():
            val = val + c * ind[p]
        behavior[b] = val + cfg.behavior_noise * rng.standard_normal((n, n_days))

    z = cov["unemployment_rate"].to_numpy()
    z = (z - z.mean()) / z.std()
    base = cfg.base_growth + cfg.covariate_growth * z
    drive = np.zeros((n, n_days)) + base[:, None]
    for p, th in cfg.theta.items():
        drive = drive + th * ind[p]
    for b, a in cfg.alpha.items():
        if a:
            drive = drive + a * behavior[b]
    eps = rng.standard_normal((n, n_days))
    shocks = np.zeros((n, n_days))
    for t in range(n_days):
        prev = shocks[:, t - 1] if t else 0.0
        shocks[:, t] = cfg.noise_ar * prev + cfg.noise * eps[:, t]
    growth = drive + shocks

    delay = cfg.delay
    gamma = cfg.gamma

    def rate_at(u: float) -> np.ndarray:
        k = int(math.floor(u - delay + 1e-9))
        return growth[:, min(max(k, 0), n_days - 1)]

    def beta_fn(u: float, s_frac: np.ndarray) -> np.ndarray:
        b = (rate_at(u) + gamma) / s_frac
        if np.any(b < 0):
            raise NumericalError("synthetic growth below -gamma")
        return b

    tau_states = cfg.tau0 * np.exp(0.2 * rng.standard_normal(n))

    if cfg.tau_ramp_day is None:
        ramp_day = cfg.burn_in + rng.uniform(0.0, cfg.days, n)
    else:
        ramp_day = np.full(n, float(cfg.tau_ramp_day))

    def ramp(u):
        u = np.asarray(u, dtype=np.float64)
        return 1.0 + cfg.tau_ramp / (1.0 + np.exp(-(u[..., None] - ramp_day) / cfg.tau_ramp_width))

    def tau_fn(u: float) -> np.ndarray:
        return tau_states * ramp(u)

    N = cov["population"].to_numpy(dtype=np.float64)
    I0 = cfg.initial_infected * N
    params = SirdParams(N, gamma, cfg.kappa, beta_fn, tau_fn, N - I0, I0)
    path = integrate(params, n_days, cfg.dt, "daily")
    C = path.C[:, 1:]
    Dd = path.D[:, 1:]
    attack = 1.0 - path.S[:, -1] / N
    if np.any(attack > 0.05):
        raise NumericalError(f"attack rate {attack.max():.3f} above 5%")
    if np.any(weekly_diff(C)[:, 7:] <= 0):
        raise NumericalError("nonpositive weekly cases")

    tests_daily = N[:, None] * 1e-3 * ramp(np.arange(n_days) + 0.5).T
    tests = np.cumsum(tests_daily, axis=1)

    series = {"cum_cases": C, "cum_deaths": Dd, "cum_tests": tests}
    series.update({b: behavior[b] for b in MOBILITY_COLUMNS})
    series.update({p: ind[p] for p in DEFAULT_ADOPTION})
    panel = Panel(states, dates, dict(sorted(series.items())), cov)
    truth = {
        "theta_true": {k: float(v) for k, v in cfg.theta.items()},
        "theta_weekly": {k: 7.0 * float(v) for k, v in cfg.theta.items()},
        "alpha_true": {k: float(v) for k, v in cfg.alpha.items()},
        "behavior_response": {b: dict(r) for b, r in cfg.behavior_response.items()},
        "gamma": gamma,
        "kappa": cfg.kappa,
        "seed": int(seed),
        "attempt": attempt,
        "noise": cfg.noise,
        "lag": cfg.lag,
        "infection_lag": delay,
        "window": list(cfg.window),
        "max_attack_rate": float(attack.max()),
    }
    return SynthResult(panel, events, cov, truth, path, growth)


def _num(v: float) -> str:
    return repr(float(v))


def write_synth(result: SynthResult, out_dir: str | Path) -> dict[str, Path]:
    """Write the five raw CSV files and ``truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = result.panel
    dates = [str(d) for d in p.dates]
    paths = {k: out / f"{k}.csv" for k in ("cases_deaths", "tests", "policies", "mobility", "covariates")}

    def rows(path: Path, header, gen):
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in gen:
                w.writerow(r)

    rng_s = range(p.n_states)
    rng_t = range(p.n_dates)
    rows(paths["cases_deaths"], CASES_HEADER,
         ((p.states[i], dates[t], _num(p["cum_cases"][i, t]), _num(p["cum_deaths"][i, t])) for i in rng_s for t in rng_t))
    rows(paths["tests"], TESTS_HEADER,
         ((p.states[i], dates[t], _num(p["cum_tests"][i, t])) for i in rng_s for t in rng_t))
    rows(paths["mobility"], MOBILITY_HEADER,
         ((p.states[i], dates[t], *(_num(100.0 * p[b][i, t]) for b in MOBILITY_COLUMNS)) for i in rng_s for t in rng_t))
    rows(paths["policies"], POLICY_HEADER,
         ((e.state, e.policy, str(e.start_date), "" if e.end_date is None else str(e.end_date)) for e in result.events))
    cov = result.covariates
    rows(paths["covariates"], ("state",) + COVARIATE_COLUMNS,
         ((s, *(v if isinstance(v, str) else _num(v) for v in cov.loc[s].tolist())) for s in cov.index))
    paths["truth"] = out / "truth.json"
    paths["truth"].write_text(json.dumps(result.truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
