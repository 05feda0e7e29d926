"""Builders for the standard equation set and the bundled JSON fixtures."""

from __future__ import annotations

from dataclasses import replace
from importlib import resources
from typing import Sequence

from .errors import ConfigError
from .transform import ModelSpec, TermSpec

POLICY_TERMS = ("mask_employees", "closed_k12", "stay_at_home", "business_closure")
SPLIT_BUSINESS = ("closed_movies", "closed_restaurants", "closed_nonessential")
BEHAVIORS = ("workplaces", "retail", "grocery", "transit")
STATIC_COVARIATES = ("population", "area", "unemployment_rate", "poverty_rate", "pct_at_risk", "governor_party")
OUTCOMES = {"cases": ("cum_cases", "case_lag"), "deaths": ("cum_deaths", "death_lag")}

# masks act on outcomes only; the business composite acts through behavior only
RESTRICTIONS = {
    "behavior": ("mask_employees",),
    "outcome": ("business_closure",),
}


def confounder_terms(
    outcome: str,
    static: Sequence[str] = STATIC_COVARIATES,
    log_days_interactions: bool = True,
    test_growth: bool | None = None,
) -> list[TermSpec]:
    terms = [TermSpec(f"static_{c}", f"static:{c}") for c in static]
    if log_days_interactions:
        terms.append(TermSpec("log_days", "calendar:log_days", interactions=tuple(static)))
    if test_growth is None:
        test_growth = outcome == "cases"
    if test_growth:
        terms.append(TermSpec("test_growth", "cum_tests", "weekly_log_diff", 0))
    return terms


def policy_terms(lag: int | str, business: str = "composite") -> list[TermSpec]:
    if business == "composite":
        names = POLICY_TERMS
    elif business == "split":
        names = POLICY_TERMS[:3] + SPLIT_BUSINESS
    else:
        raise ConfigError(f"business must be composite or split, got {business!r}")
    sources = {"business_closure": "business_closure"}
    return [TermSpec(n, sources.get(n, n), "movavg7", lag, "policy") for n in names]


def behavior_terms(lag: int | str) -> list[TermSpec]:
    return [TermSpec(b, b, "movavg7", lag, "behavior") for b in BEHAVIORS]


def information_terms(outcome: str, lag: int | str, national: bool, past_behavior: bool = False) -> list[TermSpec]:
    src, _ = OUTCOMES[outcome]
    terms = [
        TermSpec("own_growth", src, "weekly_log_diff", lag, "information"),
        TermSpec("own_level", src, "log_weekly", lag, "information"),
    ]
    if national:
        terms += [
            TermSpec("national_growth", f"national:{src}", "weekly_log_diff", lag, "information"),
            TermSpec("national_level", f"national:{src}", "log_weekly", lag, "information"),
        ]
    if past_behavior:
        terms += [TermSpec(f"past_{b}", b, "movavg7", lag, "information") for b in BEHAVIORS]
    return terms


def _check_outcome(outcome: str) -> tuple[str, str]:
    if outcome not in OUTCOMES:
        raise ConfigError(f"outcome must be cases or deaths, got {outcome!r}")
    return OUTCOMES[outcome]


def _spec(name, outcome_term, terms, lag_key, dummies, dummy_interactions) -> ModelSpec:
    return ModelSpec(
        name=name, outcome=outcome_term, terms=tuple(terms), dummies=dummies,
        dummy_interactions=tuple(dummy_interactions), lag_key=lag_key,
    )


def outcome_spec(
    outcome: str = "cases",
    national: bool = False,
    business: str = "composite",
    dummies: str = "month",
    dummy_interactions: Sequence[str] = (),
    static: Sequence[str] = STATIC_COVARIATES,
    past_behavior: bool = False,
) -> ModelSpec:
    """Growth on lagged behavior, policy and information."""
    src, key = _check_outcome(outcome)
    terms = (
        policy_terms("ell", business) + behavior_terms("ell")
        + information_terms(outcome, "ell", national, past_behavior)
        + confounder_terms(outcome, static)
    )
    y = TermSpec("growth", src, "weekly_log_diff", 0, "outcome")
    return _spec(f"outcome_{outcome}{'_national' if national else ''}", y, terms, key, dummies, dummy_interactions)


def reduced_spec(
    outcome: str = "cases",
    national: bool = False,
    business: str = "composite",
    dummies: str = "month",
    dummy_interactions: Sequence[str] = (),
    static: Sequence[str] = STATIC_COVARIATES,
    past_behavior: bool = False,
) -> ModelSpec:
    """Growth on lagged policy and information (behavior left out)."""
    src, key = _check_outcome(outcome)
    terms = (
        policy_terms("ell", business)
        + information_terms(outcome, "ell", national, past_behavior)
        + confounder_terms(outcome, static)
    )
    y = TermSpec("growth", src, "weekly_log_diff", 0, "outcome")
    return _spec(f"reduced_{outcome}{'_national' if national else ''}", y, terms, key, dummies, dummy_interactions)


def behavior_spec(
    behavior: str,
    outcome: str = "cases",
    national: bool = False,
    business: str = "composite",
    dummies: str = "month",
    dummy_interactions: Sequence[str] = (),
    static: Sequence[str] = STATIC_COVARIATES,
) -> ModelSpec:
    """Contemporaneous behavior on policy and information."""
    _, key = _check_outcome(outcome)
    if behavior not in BEHAVIORS:
        raise ConfigError(f"unknown behavior {behavior!r}")
    terms = (
        policy_terms(0, business) + information_terms(outcome, 0, national)
        + confounder_terms(outcome, static, test_growth=False)
    )
    y = TermSpec(behavior, behavior, "movavg7", 0, "outcome")
    return _spec(f"behavior_{behavior}_{outcome}{'_national' if national else ''}", y, terms, key, dummies, dummy_interactions)


def policy_response_spec(
    policy: str,
    outcome: str = "cases",
    national: bool = False,
    dummies: str = "month",
    static: Sequence[str] = STATIC_COVARIATES,
) -> ModelSpec:
    """Policy indicator on information and confounders."""
    _, key = _check_outcome(outcome)
    src = "business_closure" if policy == "business_closure" else policy
    terms = information_terms(outcome, 0, national) + confounder_terms(outcome, static, test_growth=False)
    y = TermSpec(policy, src, "movavg7", 0, "outcome")
    return _spec(f"policy_{policy}_{outcome}{'_national' if national else ''}", y, terms, key, dummies, ())


def apply_restrictions(specs: dict[str, ModelSpec], restrictions: dict[str, Sequence[str]] | None = None) -> dict[str, ModelSpec]:
    """Zero out terms per equation family.

    ``specs`` maps ``"outcome"``, ``"reduced"`` and ``"behavior:<name>"`` to
    specs; ``restrictions`` maps ``"outcome"`` / ``"behavior"`` to term names.
    """
    restrictions = RESTRICTIONS if restrictions is None else restrictions
    for fam in restrictions:
        if fam not in ("outcome", "behavior", "reduced"):
            raise ConfigError(f"unknown equation family {fam!r} in restrictions")
    out = {}
    for key, spec in specs.items():
        fam = key.split(":", 1)[0]
        names = tuple(restrictions.get(fam, ()))
        have = {t.name for t in spec.terms}
        if "business_closure" in names and "business_closure" not in have and set(SPLIT_BUSINESS) <= have:
            # split specs carry the components in place of the composite
            names = tuple(n for n in names if n != "business_closure") + tuple(SPLIT_BUSINESS)
        unknown = [n for n in names if n not in have]
        if unknown:
            raise ConfigError(f"restriction names {unknown} not found in {spec.name!r}")
        out[key] = spec.restricted(names) if names else spec
    return out


def equation_set(outcome: str = "cases", national: bool = False, **kw) -> dict[str, ModelSpec]:
    """Outcome, reduced form and one behavior equation per behavior."""
    bkw = {k: v for k, v in kw.items() if k != "past_behavior"}
    specs = {"outcome": outcome_spec(outcome, national, **kw), "reduced": reduced_spec(outcome, national, **kw)}
    for b in BEHAVIORS:
        specs[f"behavior:{b}"] = behavior_spec(b, outcome, national, **bkw)
    return specs


def fixture_specs() -> dict[str, ModelSpec]:
    """Every spec shipped under ``covidsem/specs``, keyed by file stem."""
    out: dict[str, ModelSpec] = {}
    for outcome in OUTCOMES:
        for national in (False, True):
            suffix = f"{outcome}{'_national' if national else ''}"
            out[f"outcome_{suffix}"] = outcome_spec(outcome, national)
            out[f"outcome_split_{suffix}"] = replace(outcome_spec(outcome, national, business="split"),
                                                     name=f"outcome_split_{suffix}")
            out[f"reduced_{suffix}"] = reduced_spec(outcome, national)
            for b in BEHAVIORS:
                out[f"behavior_{b}_{suffix}"] = behavior_spec(b, outcome, national)
    return out


def load_fixture(stem: str) -> ModelSpec:
    path = resources.files("covidsem") / "specs" / f"{stem}.json"
    if not path.is_file():
        raise ConfigError(f"no bundled spec named {stem!r}")
    return ModelSpec.from_json(path.read_text(encoding="utf-8"))


def write_fixtures(directory) -> list[str]:
    """Regenerate the bundled spec files; returns the stems written."""
    from pathlib import Path
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    stems = []
    for stem, spec in sorted(fixture_specs().items()):
        (out / f"{stem}.json").write_text(spec.to_json(), encoding="utf-8")
        stems.append(stem)
    return stems
