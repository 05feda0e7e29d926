"""Direct, indirect and total policy effects from the fitted equation system."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError
from .estimator import (
    DEFAULT_DRAWS,
    BootstrapDraws,
    FitResult,
    draw_coefficients,
    fit_design,
    multiplier_cluster_draws,
    pairs_cluster_draws,
)
from .ingest import Panel
from .transform import Design, LagConfig, ModelSpec, TransformOptions, build_design, movavg7

COLUMNS = ("direct", "indirect", "total", "reduced", "average", "difference")
WEIGHT_WINDOW = ("2020-04-01", "2020-04-10")
POLICY_SUM = "policy_sum"


@dataclass(frozen=True)
class Equation:
    spec: ModelSpec
    design: Design
    fit: FitResult

    def coefficient(self, name: str) -> float:
        """Coefficient, with 0 for a zero-restricted term."""
        if name in self.fit.names:
            return float(self.fit.coefficients[self.fit.names.index(name)])
        if name in self.spec.zero_restrictions:
            return 0.0
        raise ConfigError(f"equation {self.spec.name!r} has no term {name!r}")

    def draw_column(self, draws: BootstrapDraws, name: str) -> np.ndarray:
        if name in draws.names:
            return draws.draws[:, draws.names.index(name)]
        if name in self.spec.zero_restrictions:
            return np.zeros(draws.B)
        raise ConfigError(f"draws for {self.spec.name!r} have no term {name!r}")


@dataclass(frozen=True)
class BehaviorWeights:
    weights: Mapping[str, float]
    window: tuple[str, str]
    scope: str = "national"


def behavior_weights(
    panel: Panel,
    behaviors: Sequence[str],
    window: tuple[str, str] = WEIGHT_WINDOW,
    smooth: bool = True,
) -> BehaviorWeights:
    """Average of each behavior variable over all states and the window dates.

    With ``smooth`` the 7-day moving average (the regressor form) is averaged.
    """
    lo, hi = np.datetime64(window[0], "D"), np.datetime64(window[1], "D")
    cols = np.flatnonzero((panel.dates >= lo) & (panel.dates <= hi))
    if cols.size == 0:
        raise DataError(f"behavior weight window {window[0]}..{window[1]} has no panel dates")
    out = {}
    for b in behaviors:
        arr = movavg7(panel[b]) if smooth else panel[b]
        vals = arr[:, cols]
        if not np.isfinite(vals).any():
            raise DataError(f"behavior {b!r} is missing over the weight window")
        out[b] = float(np.nanmean(vals))
    return BehaviorWeights(out, (str(window[0]), str(window[1])))


@dataclass
class EffectTable:
    """Point estimates, bootstrap SEs and per-draw values.

    ``values`` and ``se`` are frames indexed by row name with ``COLUMNS``;
    ``draws[column]`` is a ``(B, n_rows)`` array in the same row order.
    """

    values: pd.DataFrame
    se: pd.DataFrame
    draws: dict[str, np.ndarray] = field(default_factory=dict)
    behavior_sum: tuple[float, float] = (float("nan"), float("nan"))
    weights: BehaviorWeights | None = None
    policies: tuple[str, ...] = ()
    info: tuple[str, ...] = ()

    def row(self, name: str) -> pd.Series:
        return self.values.loc[name]

    def to_frame(self) -> pd.DataFrame:
        out = self.values.copy()
        for c in COLUMNS:
            out[f"{c}_se"] = self.se[c]
        out.index.name = "term"
        return out

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, float_format="%.17g", lineterminator="\n")

    def to_dict(self) -> dict:
        rows = {}
        for name in self.values.index:
            rows[name] = {c: float(self.values.at[name, c]) for c in COLUMNS}
            rows[name].update({f"{c}_se": float(self.se.at[name, c]) for c in COLUMNS})
        return {
            "rows": rows,
            "behavior_sum": {"estimate": self.behavior_sum[0], "se": self.behavior_sum[1]},
            "weights": dict(self.weights.weights) if self.weights else None,
            "n_draws": int(next(iter(self.draws.values())).shape[0]) if self.draws else 0,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _components(outcome: Equation, behaviors: Mapping[str, Equation], reduced: Equation,
                rows: Sequence[str], get) -> dict[str, np.ndarray]:
    """Column arrays for ``rows``; ``get(eq, name)`` returns a scalar or draw vector.

    Behaviors are summed in sorted order so the result does not depend on
    the order of the mapping.
    """
    direct = np.stack([np.asarray(get(outcome, r), dtype=np.float64) for r in rows], axis=-1)
    indirect = np.zeros_like(direct)
    for b in sorted(behaviors):
        alpha = np.asarray(get(outcome, b), dtype=np.float64)
        beta = np.stack([np.asarray(get(behaviors[b], r), dtype=np.float64) for r in rows], axis=-1)
        indirect = indirect + (alpha[..., None] if np.ndim(alpha) else alpha) * beta
    reduced_v = np.stack([np.asarray(get(reduced, r), dtype=np.float64) for r in rows], axis=-1)
    return {"direct": direct, "indirect": indirect, "reduced": reduced_v}


def _finish(direct: np.ndarray, indirect: np.ndarray, reduced: np.ndarray) -> dict[str, np.ndarray]:
    total = direct + indirect
    return {
        "direct": direct,
        "indirect": indirect,
        "total": total,
        "reduced": reduced,
        "average": (total + reduced) / 2.0,
        "difference": reduced - total,
    }


def _with_sum(parts: dict[str, np.ndarray], n_policy: int) -> dict[str, np.ndarray]:
    """Append the policy-sum row, built from summed direct/indirect/reduced."""
    d = parts["direct"][..., :n_policy].sum(axis=-1, keepdims=True)
    i = parts["indirect"][..., :n_policy].sum(axis=-1, keepdims=True)
    r = parts["reduced"][..., :n_policy].sum(axis=-1, keepdims=True)
    s = _finish(d, i, r)
    return {c: np.concatenate([parts[c], s[c]], axis=-1) for c in COLUMNS}


def check_alignment(outcome: Equation, behaviors: Mapping[str, Equation], reduced: Equation) -> tuple[list[str], list[str]]:
    policies = [t.name for t in reduced.spec.terms if t.block == "policy"]
    info = [t.name for t in reduced.spec.terms if t.block == "information"]
    if not policies:
        raise ConfigError("reduced-form equation has no policy terms")
    for eq in [outcome, *behaviors.values()]:
        got = [t.name for t in eq.spec.terms if t.block == "policy"]
        if sorted(got) != sorted(policies):
            raise ConfigError(f"policy terms of {eq.spec.name!r} {got} do not match reduced form {policies}")
        got_i = [t.name for t in eq.spec.terms if t.block == "information"]
        if sorted(got_i) != sorted(info):
            raise ConfigError(f"information terms of {eq.spec.name!r} {got_i} do not match reduced form {info}")
    beh = [t.name for t in outcome.spec.terms if t.block == "behavior"]
    if sorted(beh) != sorted(behaviors):
        raise ConfigError(f"behavior terms {beh} do not match behavior equations {sorted(behaviors)}")
    for name, eq in behaviors.items():
        if eq.spec.outcome.name != name:
            raise ConfigError(f"behavior equation keyed {name!r} has outcome {eq.spec.outcome.name!r}")
    return policies, info


def decompose(
    outcome: Equation,
    behaviors: Mapping[str, Equation],
    reduced: Equation,
    weights: BehaviorWeights | None = None,
    draws: Mapping[str, BootstrapDraws] | None = None,
) -> EffectTable:
    """Effect table for every policy and information term plus the policy sum.

    ``draws`` maps ``"outcome"``, ``"reduced"`` and each behavior name to
    coefficient draws taken on common resamples.
    """
    policies, info = check_alignment(outcome, behaviors, reduced)
    rows = policies + info
    point = _components(outcome, behaviors, reduced, rows, lambda eq, n: eq.coefficient(n))
    point = _with_sum(_finish(point["direct"], point["indirect"], point["reduced"]), len(policies))
    index = rows + [POLICY_SUM]
    values = pd.DataFrame({c: point[c] for c in COLUMNS}, index=index)

    draw_cols: dict[str, np.ndarray] = {}
    se = pd.DataFrame(np.nan, index=index, columns=list(COLUMNS))
    bsum_se = float("nan")
    if draws:
        need = ["outcome", "reduced", *behaviors]
        miss = [k for k in need if k not in draws]
        if miss:
            raise ConfigError(f"draws missing for equations {miss}")
        B = {draws[k].B for k in need}
        if len(B) != 1:
            raise ConfigError(f"draw counts differ across equations: {sorted(B)}")
        key_of = {id(outcome): "outcome", id(reduced): "reduced", **{id(e): k for k, e in behaviors.items()}}

        def get(eq: Equation, name: str) -> np.ndarray:
            return eq.draw_column(draws[key_of[id(eq)]], name)

        parts = _components(outcome, behaviors, reduced, rows, get)
        draw_cols = _with_sum(_finish(parts["direct"], parts["indirect"], parts["reduced"]), len(policies))
        for c in COLUMNS:
            se[c] = draw_cols[c].std(axis=0, ddof=1) if draw_cols[c].shape[0] > 1 else 0.0

    bsum = float("nan")
    if weights is not None:
        bs = sorted(behaviors)
        w = np.array([weights.weights[b] for b in bs])
        bsum = float(sum(w[k] * outcome.coefficient(b) for k, b in enumerate(bs)))
        if draws:
            v = sum(w[k] * outcome.draw_column(draws["outcome"], b) for k, b in enumerate(bs))
            bsum_se = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return EffectTable(values, se, draw_cols, (bsum, bsum_se), weights, tuple(policies), tuple(info))


def policy_sum(table: EffectTable, column: str = "direct") -> tuple[float, float]:
    return float(table.values.at[POLICY_SUM, column]), float(table.se.at[POLICY_SUM, column])


def linear_combination(fit: FitResult, weights: Mapping[str, float]) -> tuple[float, float]:
    """Estimate and SE of ``sum_j w_j * coef_j`` from the fitted covariance."""
    w = np.zeros(fit.k)
    for name, v in weights.items():
        w[fit.index(name)] = v
    est = float(w @ fit.coefficients)
    se = float(np.sqrt(max(w @ fit.vcov @ w, 0.0))) if fit.vcov is not None else float("nan")
    return est, se


# --- estimation wrappers ------------------------------------------------------------

def fit_equations(
    panel: Panel,
    specs: Mapping[str, ModelSpec],
    lags: LagConfig | None = None,
    options: TransformOptions | None = None,
) -> dict[str, Equation]:
    """Build and fit every spec; keys as in ``models.equation_set``."""
    out = {}
    for key, spec in specs.items():
        d = build_design(panel, spec, lags, options)
        out[key] = Equation(spec, d, fit_design(d))
    return out


def equation_draws(
    equations: Mapping[str, Equation],
    scheme: str = "pairs_cluster",
    B: int = DEFAULT_DRAWS,
    seed: int = 0,
    threads: int = 1,
) -> dict[str, BootstrapDraws]:
    """Coefficient draws for every equation on shared state resamples."""
    keys = list(equations)
    if scheme == "pairs_cluster":
        res = pairs_cluster_draws([equations[k].design for k in keys], B, seed, threads)
    elif scheme == "multiplier_cluster":
        res = multiplier_cluster_draws([equations[k].fit for k in keys], [equations[k].design for k in keys], B, seed)
    elif scheme == "gaussian_asymptotic":
        res = [draw_coefficients(equations[k].fit, B, seed + j) for j, k in enumerate(keys)]
    else:
        raise ConfigError(f"unknown bootstrap scheme {scheme!r}")
    return dict(zip(keys, res))


def split_equations(equations: Mapping[str, Equation]) -> tuple[Equation, dict[str, Equation], Equation]:
    behaviors = {k.split(":", 1)[1]: v for k, v in equations.items() if k.startswith("behavior:")}
    return equations["outcome"], behaviors, equations["reduced"]


def estimate_effects(
    panel: Panel,
    specs: Mapping[str, ModelSpec],
    lags: LagConfig | None = None,
    options: TransformOptions | None = None,
    B: int = DEFAULT_DRAWS,
    seed: int = 0,
    scheme: str = "pairs_cluster",
    threads: int = 1,
    weight_window: tuple[str, str] = WEIGHT_WINDOW,
) -> tuple[EffectTable, dict[str, Equation], dict[str, BootstrapDraws]]:
    eqs = fit_equations(panel, specs, lags, options)
    outcome, behaviors, reduced = split_equations(eqs)
    w = behavior_weights(panel, sorted(behaviors), weight_window)
    draws = equation_draws(eqs, scheme, B, seed, threads) if B > 0 else {}
    remapped = {("outcome" if k == "outcome" else "reduced" if k == "reduced" else k.split(":", 1)[1]): v
                for k, v in draws.items()}
    return decompose(outcome, behaviors, reduced, w, remapped or None), eqs, draws


def recursion_coefficients(table: EffectTable, reduced: Equation, column: str = "average") -> np.ndarray:
    """Reduced-form coefficient vector with policy and information entries
    replaced by ``column`` of the effect table."""
    theta = reduced.fit.coefficients.copy()
    names = reduced.fit.names
    for r in table.policies + table.info:
        if r in names:
            theta[names.index(r)] = table.values.at[r, column]
    return theta


def recursion_draws(table: EffectTable, reduced: Equation, reduced_draws: BootstrapDraws, column: str = "average") -> np.ndarray:
    """Per-draw version of ``recursion_coefficients``; shape ``(B, k)``."""
    if not table.draws:
        raise ConfigError("effect table has no draws")
    theta = reduced_draws.draws.copy()
    rows = list(table.values.index)
    names = reduced.fit.names
    for r in table.policies + table.info:
        if r in names:
            theta[:, names.index(r)] = table.draws[column][:, rows.index(r)]
    return theta
