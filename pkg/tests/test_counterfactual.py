import json

import numpy as np
import pytest

from covidsem.counterfactual import (
    CONTRASTS,
    Override,
    Scenario,
    apply_scenario,
    band_inference,
    builtin_scenarios,
    contrasts,
    counterfactual_policies,
    get_scenario,
    identity_scenario,
    national_rollup,
    recursion_model,
    residual_rest,
    simulate_growth,
)
from covidsem.errors import ConfigError
from covidsem.estimator import draw_coefficients, fit_design
from covidsem.models import reduced_spec
from covidsem.transform import TransformOptions, build_design, business_composite, movavg7


@pytest.fixture(scope="module")
def fitted(synth):
    opts = TransformOptions(window=tuple(synth.truth["window"]))
    design = build_design(synth.panel, reduced_spec("cases", national=True), options=opts)
    return synth.panel, design, fit_design(design), opts


def _only(design, **coefs):
    theta = np.zeros(design.k)
    for k, v in coefs.items():
        theta[design.column(k)] = v
    return theta


def _paths(panel, design, theta, scenario, opts, shift=0.0):
    model = recursion_model(panel, design, opts)
    rest = residual_rest(model, theta, False) + shift
    f = simulate_growth(model, theta, counterfactual_policies(model, panel, identity_scenario()), rest)
    c = simulate_growth(model, theta, counterfactual_policies(model, panel, scenario), rest)
    return model, f, c


def test_builtin_scenarios(fitted):
    panel = fitted[0]
    names = [s.name for s in builtin_scenarios()]
    assert names == ["mask_march14", "no_business", "no_shelter"]
    p = apply_scenario(panel, get_scenario("mask_march14"))
    k = panel.date_index("2020-03-14")
    assert np.all(p["mask_employees"][:, k] == 1)
    assert np.array_equal(p["mask_employees"][:, :k], panel["mask_employees"][:, :k])
    nb = apply_scenario(panel, get_scenario("no_business"))
    assert np.all(business_composite(nb) == 0)
    assert np.all(apply_scenario(panel, get_scenario("no_shelter"))["stay_at_home"] == 0)
    with pytest.raises(ConfigError):
        get_scenario("nope")
    with pytest.raises(ConfigError):
        Override("workplaces", "set_off_always")


def test_identity_exact(fitted):
    panel, design, fit, opts = fitted
    draws = draw_coefficients(fit, B=20, seed=4).draws
    for theta, td in ((fit.coefficients, None), (fit.coefficients, draws)):
        bands = band_inference(panel, design, theta, identity_scenario(), td, opts)
        fr = bands.frame
        for c, want in zip(CONTRASTS, (0.0, 1.0, 0.0)):
            sub = fr[fr["contrast"] == c]
            for col in ("mean", "lo", "hi"):
                assert (sub[col] == want).all(), (c, col)
        for k, arr in bands.per_draw.items():
            want = 1.0 if k.endswith("weekly_ratio") else 0.0
            assert np.all(arr == want)


def test_one_step_hand_computation(fitted):
    panel, design, _, opts = fitted
    theta = _only(design, mask_employees=-0.1)
    sc = get_scenario("mask_march14")
    model, f, c = _paths(panel, design, theta, sc, opts)
    s = int(design.row_date.min())
    ell = design.ell
    dp = movavg7(apply_scenario(panel, sc)["mask_employees"]) - movavg7(panel["mask_employees"])
    assert np.allclose(c.L[:, s] - f.L[:, s], -0.1 * dp[:, s - ell], atol=1e-12)
    # factual path reproduces the observed log weekly counts on the outcome rows
    assert np.allclose(f.L[design.row_state, design.row_date], model.L_obs[design.row_state, design.row_date], atol=1e-12)


def test_contrasts_residual_shift_invariant(fitted):
    panel, design, fit, opts = fitted
    sc = get_scenario("no_shelter")
    cols = np.arange(design.row_date.min(), design.row_date.max() + 1)
    _, f0, c0 = _paths(panel, design, fit.coefficients, sc, opts)
    _, f1, c1 = _paths(panel, design, fit.coefficients, sc, opts, shift=0.3)
    a, b = contrasts(f0, c0, cols), contrasts(f1, c1, cols)
    assert np.allclose(a["growth_change"], b["growth_change"], atol=1e-10)
    assert np.allclose(a["weekly_ratio"], b["weekly_ratio"], rtol=1e-10)


def test_weekly_ratio_accumulates_growth_change(fitted):
    panel, design, fit, opts = fitted
    _, f, c = _paths(panel, design, fit.coefficients, get_scenario("mask_march14"), opts)
    cols = np.arange(design.row_date.min(), design.row_date.max() + 1)
    k = contrasts(f, c, cols)
    lr = np.log(k["weekly_ratio"])
    assert np.allclose(lr[:, 7:], lr[:, :-7] + k["growth_change"][:, 7:], atol=1e-10)


def test_cumulative_relative_brute_force(fitted):
    panel, design, fit, opts = fitted
    _, f, c = _paths(panel, design, fit.coefficients, get_scenario("no_business"), opts)
    cols = np.arange(design.row_date.min(), design.row_date.max() + 1)
    got = contrasts(f, c, cols)["cumulative_relative"]
    i = 3
    Cf = list(panel["cum_cases"][i])
    Cc = list(panel["cum_cases"][i])
    for t in range(int(f.start[i]), int(cols[-1]) + 1):
        Cf[t] = Cf[t - 7] + f.D[i, t]
        Cc[t] = Cc[t - 7] + c.D[i, t]
    want = [(Cc[t] - Cf[t]) / Cf[t] for t in cols]
    assert np.allclose(got[i], want, rtol=1e-10, atol=1e-12)


def test_earlier_policy_lowers_cumulative(fitted):
    panel, design, _, opts = fitted
    theta = _only(design, mask_employees=-0.1)
    _, f, c = _paths(panel, design, theta, get_scenario("mask_march14"), opts)
    cols = np.arange(design.row_date.min(), design.row_date.max() + 1)
    assert np.all(c.C[:, cols] <= f.C[:, cols] * (1 + 1e-12))
    assert np.any(c.C[:, cols] < f.C[:, cols])


def test_rollup(fitted):
    panel, design, fit, opts = fitted
    _, f, c = _paths(panel, design, fit.coefficients, get_scenario("no_shelter"), opts)
    cols = np.arange(design.row_date.min(), design.row_date.max() + 1)

    def pick(p, rows):
        return type(p)(p.L[rows], p.D[rows], p.C[rows], p.start[rows])

    one = [0]
    st, nat = contrasts(pick(f, one), pick(c, one), cols), national_rollup(pick(f, one), pick(c, one), cols)
    for k in CONTRASTS:
        assert np.allclose(nat[k], st[k][0], rtol=1e-12, atol=1e-14)
    twin = [0, 0]
    nat2 = national_rollup(pick(f, twin), pick(c, twin), cols)
    for k in CONTRASTS:
        assert np.allclose(nat2[k], st[k][0], rtol=1e-12, atol=1e-14)
    three = [1, 5, 9]
    nat3 = national_rollup(pick(f, three), pick(c, three), cols)
    Df, Dc = f.D[three].sum(axis=0), c.D[three].sum(axis=0)
    Cf, Cc = f.C[three].sum(axis=0), c.C[three].sum(axis=0)
    assert np.allclose(nat3["weekly_ratio"], Dc[cols] / Df[cols], rtol=1e-12)
    assert np.allclose(nat3["cumulative_relative"], (Cc[cols] - Cf[cols]) / Cf[cols], rtol=1e-12, atol=1e-15)


def test_bands_ordered_and_collapse(fitted):
    panel, design, fit, opts = fitted
    draws = draw_coefficients(fit, B=30, seed=5).draws
    fr = band_inference(panel, design, fit.coefficients, get_scenario("mask_march14"), draws, opts).frame
    assert (fr["lo"] <= fr["mean"]).all() and (fr["mean"] <= fr["hi"]).all()
    same = np.repeat(fit.coefficients[None, :], 4, axis=0)
    fr = band_inference(panel, design, fit.coefficients, get_scenario("mask_march14"), same, opts).frame
    assert np.array_equal(fr["lo"], fr["hi"]) and np.array_equal(fr["lo"], fr["mean"])


def test_scenario_json_round_trip():
    sc = Scenario("custom", (Override("stay_at_home", "series", "WA", "2020-03-20", (1, 0, 1)),), True)
    assert Scenario.from_json(json.dumps(sc.to_dict())) == sc
