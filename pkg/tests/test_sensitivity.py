import csv

import numpy as np
import pandas as pd
import pytest

from covidsem.estimator import fit_design
from covidsem.models import POLICY_TERMS, fixture_specs, load_fixture, reduced_spec, write_fixtures
from covidsem.sensitivity import VARIANTS, WHISKER_COLUMNS, Z90, run_grid, variant_spec
from covidsem.transform import TransformOptions, build_design


@pytest.fixture(scope="module")
def window(synth):
    return tuple(synth.truth["window"])


def test_baseline_variant_equals_single_spec(synth, window):
    grid = run_grid(synth.panel, [1], timings=["baseline"], outcomes=["cases"], infos=["own"], window=window)
    fit = fit_design(build_design(synth.panel, reduced_spec("cases"), options=TransformOptions(window=window)))
    rows = grid.rows.set_index("policy")
    for p in POLICY_TERMS:
        b, s = fit.coef(p), fit.se[fit.index(p)]
        assert rows.at[p, "estimate"] == b
        assert rows.at[p, "lo90"] == b - Z90 * s and rows.at[p, "hi90"] == b + Z90 * s
        assert rows.at[p, "status"] == "ok"


def test_dropping_ny_removes_one_state_of_rows(synth, window):
    grid = run_grid(synth.panel, [1, 2], timings=["baseline"], outcomes=["cases"], infos=["own"], window=window)
    n = grid.rows.groupby("variant")["n_obs"].first()
    design = build_design(synth.panel, reduced_spec("cases"), options=TransformOptions(window=window))
    ny = design.states.index("NY")
    assert n[1] - n[2] == int((design.row_state == ny).sum())


def test_every_variant_appears_once(synth, window, tmp_path):
    grid = run_grid(synth.panel, window=window)
    cells = grid.rows.groupby(["variant", "timing", "outcome", "info"]).size()
    assert set(cells.index.get_level_values(0)) == set(VARIANTS)
    assert (cells == len(POLICY_TERMS)).all()
    assert len(cells) == len(VARIANTS) * 2 * 2 * 2
    failed = {(f["variant"], f["timing"], f["outcome"], f["info"]) for f in grid.failures}
    bad = grid.rows[grid.rows["status"] != "ok"]
    assert failed == set(map(tuple, bad[["variant", "timing", "outcome", "info"]].drop_duplicates().to_numpy().tolist()))
    status = grid.rows.groupby("variant")["status"].first()
    assert status[8] == "not_implemented" and status[10] == "not_implemented"
    # the synthetic covariates carry no survey or vote-share columns
    for v in (3, 4, 6, 9):
        assert status[v] == "failed"
    for v in (1, 2, 5, 7):
        assert status[v] == "ok"
    out = tmp_path / "whisker.csv"
    grid.to_csv(out)
    with out.open() as fh:
        assert tuple(next(csv.reader(fh))) == WHISKER_COLUMNS


def test_extras_enable_variants(synth, window):
    rng = np.random.default_rng(0)
    static = synth.panel.static.copy()
    static["mask_wearing_share"] = rng.uniform(0.3, 0.8, len(static))
    static["log_trump_vote_share"] = np.log(rng.uniform(0.3, 0.7, len(static)))
    panel = type(synth.panel)(synth.panel.states, synth.panel.dates, synth.panel.series, static)
    grid = run_grid(panel, [3, 4, 6, 9], timings=["baseline"], outcomes=["cases"], infos=["own"], window=window)
    assert (grid.rows["status"] == "ok").all(), grid.failures
    assert "static_mask_wearing_share" in [t.name for t in variant_spec(VARIANTS[6], "cases", "own", ["mask_wearing_share"]).terms]


def test_grid_deterministic(synth, window):
    a = run_grid(synth.panel, [1, 7, 9], window=window, seed=4)
    b = run_grid(synth.panel, [1, 7, 9], window=window, seed=4, threads=2)
    pd.testing.assert_frame_equal(a.rows, b.rows)


def test_bundled_fixtures_match_builders(tmp_path):
    specs = fixture_specs()
    assert len(specs) == 28
    for stem, spec in specs.items():
        assert load_fixture(stem) == spec
    written = write_fixtures(tmp_path)
    assert sorted(written) == sorted(specs)
