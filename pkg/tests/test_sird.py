import json
import math

import numpy as np
import pytest

from covidsem.errors import ConfigError, NumericalError
from covidsem.models import outcome_spec
from covidsem.estimator import fit_design
from covidsem.sird import (
    SirdParams,
    SynthConfig,
    growth_identity_check,
    integrate,
    synth_panel,
    write_synth,
)
from covidsem.transform import TransformOptions, build_design

N = np.array([1e6, 5e6])


def _params(beta=0.3, tau=None, kappa=0.02, gamma=0.1):
    tau = tau or (lambda t: np.full(2, 0.2))
    return SirdParams(N, gamma, kappa, lambda t, s: np.full(2, beta), tau, N - 100, np.full(2, 100.0))


def test_decay_closed_form():
    path = integrate(_params(beta=0.0), 10, 0.1)
    assert np.max(np.abs(path.I[:, -1] / (100 * math.exp(-1.0)) - 1)) < 1e-6


def test_no_deaths_without_kappa():
    path = integrate(_params(kappa=0.0), 90, 0.1)
    assert np.all(path.D == 0)


def test_conservation_and_monotone():
    path = integrate(_params(), 90, 0.1)
    total = path.S + path.I + path.R + path.D
    assert np.max(np.abs(total / N[:, None] - 1)) < 1e-9
    assert np.all(np.diff(path.S) <= 0) and np.all(np.diff(path.C) >= 0) and np.all(np.diff(path.D) >= 0)


def test_dt_bounds_and_negative_compartment():
    with pytest.raises(ConfigError):
        integrate(_params(), 10, 0.5)
    with pytest.raises(NumericalError, match="smaller dt"):
        integrate(_params(beta=0.0, gamma=30.0), 2, 0.1)


def test_growth_identity_and_order():
    devs = []
    for dt in (0.02, 0.01, 0.005):
        p = _params()
        devs.append(growth_identity_check(integrate(p, 30, dt, "step"), p))
    assert devs[1] < 1e-3
    for a, b in zip(devs, devs[1:]):
        assert 3.5 <= a / b <= 4.5


def _ramp(t):
    return 1.0 + 1.0 / (1.0 + np.exp(-(t - 15.0) / 2.0))


def test_tau_term_ablation():
    p = _params(tau=lambda t: 0.2 * np.full(2, _ramp(t)))
    path = integrate(p, 30, 0.01, "step")
    with_term = growth_identity_check(path, p)
    without = growth_identity_check(path, p, include_tau_term=False)
    ts = np.arange(1, 30.0)
    logistic = 1.0 / (1.0 + np.exp(-(ts - 15.0) / 2.0))
    tau_rate = (logistic * (1 - logistic) / 2.0 / _ramp(ts)).max()
    assert with_term < 1e-3
    assert without == pytest.approx(tau_rate, abs=2 * with_term + 1e-6)


def _flat(**kw):
    base = dict(theta={k: 0.0 for k in SynthConfig().theta}, covariate_growth=0.0, tau_ramp=0.0, behavior_noise=0.0)
    base.update(kw)
    return SynthConfig(**base)


@pytest.mark.parametrize("g", [-0.2, 0.05])
def test_early_weekly_growth_is_seven_times_rate(g):
    # g = -gamma switches infection off entirely, so weekly growth is -7 gamma
    r = synth_panel(_flat(base_growth=g), seed=2)
    y = r.path.weekly_growth()[:, 20:60]
    assert np.max(np.abs(y - 7 * g)) < 1e-6


def test_tau_doubling_shifts_log_weekly_cases_by_log2():
    r = synth_panel(_flat(base_growth=0.0, tau_ramp=1.0, tau_ramp_day=60.0), seed=3)
    lw = np.log(r.path.weekly_cases())
    shift = lw[:, 110] - lw[:, 20]
    assert np.allclose(shift, math.log(2), atol=0.01)


def test_test_growth_coefficient_near_one(synth):
    spec = outcome_spec("cases")
    fit = fit_design(build_design(synth.panel, spec, options=TransformOptions(window=tuple(synth.truth["window"]))))
    assert fit.coef("test_growth") == pytest.approx(1.0, abs=0.05)


def test_synth_deterministic(tmp_path):
    a = synth_panel(SynthConfig(noise=0.05), seed=9)
    b = synth_panel(SynthConfig(noise=0.05), seed=9)
    assert a.panel.equals(b.panel)
    pa = write_synth(a, tmp_path / "a")
    pb = write_synth(b, tmp_path / "b")
    for k in pa:
        assert pa[k].read_bytes() == pb[k].read_bytes()


def test_synth_truth_and_invariants(synth):
    t = synth.truth
    assert t["theta_weekly"] == {k: 7 * v for k, v in t["theta_true"].items()}
    assert t["max_attack_rate"] <= 0.05
    assert synth.panel.n_states == 51 and len(synth.panel.dates) == 35 + 90
    json.dumps(t)
    p = synth.path
    total = p.S + p.I + p.R + p.D
    assert np.max(np.abs(total / total[:, :1] - 1)) < 1e-9
