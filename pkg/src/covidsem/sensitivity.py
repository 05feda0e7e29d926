"""Robustness grid over reduced-form specifications and estimators."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .dml import DmlSpec, dml_fit
from .errors import CovidSemError
from .estimator import fit_design
from .ingest import Panel
from .models import POLICY_TERMS, reduced_spec
from .transform import LagConfig, ModelSpec, TermSpec, TransformOptions, build_design

logger = logging.getLogger(__name__)

Z90 = 1.6448536269514722
WHISKER_COLUMNS = ("variant", "timing", "outcome", "info", "policy", "estimate", "lo90", "hi90", "status")
TIMINGS = {"baseline": LagConfig(), "alternative": LagConfig.alternative()}
INFOS = ("own", "national")
DEFAULT_EXTRAS = {"mask_survey": "mask_wearing_share", "vote_share": "log_trump_vote_share"}


@dataclass(frozen=True)
class SpecVariant:
    """One row of the robustness list.

    ``extras`` names roles in ``DEFAULT_EXTRAS`` (resolved against the
    covariate columns at run time).
    """

    id: int
    label: str
    drop_states: tuple[str, ...] = ()
    extras: tuple[str, ...] = ()
    past_behavior: bool = False
    dummies: str = "month"
    estimator: str = "ols"
    implemented: bool = True


VARIANTS: dict[int, SpecVariant] = {
    1: SpecVariant(1, "baseline"),
    2: SpecVariant(2, "exclude NY", drop_states=("NY",)),
    3: SpecVariant(3, "add mask-wearing survey share", extras=("mask_survey",)),
    4: SpecVariant(4, "add log vote share", extras=("vote_share",)),
    5: SpecVariant(5, "add past behavior as information", past_behavior=True),
    6: SpecVariant(6, "controls of 3-5, exclude NY", drop_states=("NY",),
                   extras=("mask_survey", "vote_share"), past_behavior=True),
    7: SpecVariant(7, "add weekly dummies", dummies="week"),
    8: SpecVariant(8, "instrument test growth", estimator="iv", implemented=False),
    9: SpecVariant(9, "DML with lasso, controls of 3-5", extras=("mask_survey", "vote_share"),
                   past_behavior=True, estimator="dml_lasso"),
    10: SpecVariant(10, "DML with random forest, controls of 3-5", extras=("mask_survey", "vote_share"),
                    past_behavior=True, estimator="dml_forest", implemented=False),
}


@dataclass
class GridResult:
    rows: pd.DataFrame
    failures: list[dict] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        out = self.rows.loc[:, list(WHISKER_COLUMNS)]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(WHISKER_COLUMNS)
            for rec in out.itertuples(index=False):
                w.writerow([_cell(v) for v in rec])

    def failures_json(self) -> str:
        return json.dumps(self.failures, indent=2, sort_keys=True) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def variant_spec(variant: SpecVariant, outcome: str, info: str, extra_columns: Sequence[str] = ()) -> ModelSpec:
    spec = reduced_spec(outcome, national=info == "national", dummies=variant.dummies,
                        past_behavior=variant.past_behavior)
    if extra_columns:
        extra = tuple(TermSpec(f"static_{c}", f"static:{c}") for c in extra_columns)
        spec = replace(spec, terms=spec.terms + extra)
    return replace(spec, name=f"{spec.name}_v{variant.id}")


def _resolve_extras(variant: SpecVariant, panel: Panel, extra_names: Mapping[str, str]) -> list[str]:
    have = set(panel.static.columns) if panel.static is not None else set()
    cols, missing = [], []
    for role in variant.extras:
        col = extra_names.get(role, DEFAULT_EXTRAS[role])
        (cols if col in have else missing).append(col)
    if missing:
        raise CovidSemError(f"missing extra covariate column(s): {', '.join(missing)}")
    return cols


def _cell_rows(variant: SpecVariant, panel: Panel, timing: str, outcome: str, info: str,
               extra_names: Mapping[str, str], window: tuple[str, str], seed: int, folds: int) -> tuple[list[dict], int]:
    extras = _resolve_extras(variant, panel, extra_names)
    if variant.drop_states:
        panel = panel.subset([s for s in panel.states if s not in variant.drop_states])
    spec = variant_spec(variant, outcome, info, extras)
    design = build_design(panel, spec, TIMINGS[timing], TransformOptions(window=window))
    out = []
    if variant.estimator == "ols":
        fit = fit_design(design)
        for p in POLICY_TERMS:
            j = fit.index(p)
            out.append((p, float(fit.coefficients[j]), float(fit.se[j])))
    elif variant.estimator == "dml_lasso":
        for p in POLICY_TERMS:
            res = dml_fit(design, DmlSpec(p, folds=folds), seed=seed)
            out.append((p, res.theta, res.se))
    else:
        raise CovidSemError(f"estimator {variant.estimator!r} cannot run")
    rows = [
        {"policy": p, "estimate": b, "lo90": b - Z90 * s, "hi90": b + Z90 * s, "se": s, "status": "ok"}
        for p, b, s in out
    ]
    return rows, design.n


def run_grid(
    panel: Panel,
    variants: Sequence[int | SpecVariant] | None = None,
    timings: Sequence[str] = tuple(TIMINGS),
    outcomes: Sequence[str] = ("cases", "deaths"),
    infos: Sequence[str] = INFOS,
    extra_names: Mapping[str, str] | None = None,
    window: tuple[str, str] = TransformOptions().window,
    seed: int = 0,
    dml_folds: int = 5,
    threads: int = 1,
) -> GridResult:
    """Estimate each policy coefficient for every variant x timing x outcome x info cell.

    A cell that cannot run is kept in the table with status ``failed`` or
    ``not_implemented`` and empty estimates; the reason goes to ``failures``.
    """
    chosen = [VARIANTS[v] if isinstance(v, (int, np.integer)) else v for v in (variants or sorted(VARIANTS))]
    extra_names = dict(extra_names or {})
    for t in timings:
        if t not in TIMINGS:
            raise CovidSemError(f"unknown timing {t!r}")
    cells = [(v, t, o, i) for v in chosen for t in timings for o in outcomes for i in infos]

    def run(cell):
        v, t, o, i = cell
        if not v.implemented:
            return "not_implemented", f"variant {v.id} ({v.label}) is not implemented", [], 0
        try:
            rows, n = _cell_rows(v, panel, t, o, i, extra_names, window, seed, dml_folds)
            return "ok", "", rows, n
        except (CovidSemError, ValueError, ArithmeticError) as e:
            logger.info("variant %s %s/%s/%s failed: %s", v.id, t, o, i, e)
            return "failed", str(e), [], 0

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, cells))
    else:
        results = [run(c) for c in cells]

    records, failures = [], []
    for (v, t, o, i), (status, reason, rows, n) in zip(cells, results):
        key = {"variant": v.id, "timing": t, "outcome": o, "info": i}
        if status != "ok":
            failures.append({**key, "status": status, "reason": reason})
            rows = [{"policy": p, "estimate": float("nan"), "lo90": float("nan"), "hi90": float("nan"),
                     "se": float("nan"), "status": status} for p in POLICY_TERMS]
        for r in rows:
            records.append({**key, **r, "n_obs": n})
    frame = pd.DataFrame.from_records(records, columns=list(WHISKER_COLUMNS) + ["se", "n_obs"])
    return GridResult(frame, failures)
