import filecmp
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from pfsnap.iv import tsls_fit
from pfsnap.panel_store import load_panel
from pfsnap.regress import ModelSpec, wls_fit
from pfsnap.spi import read_policy_csv, validate_policy_panel
from pfsnap.synth import (
    TIME_VARYING,
    SynthConfig,
    generate_panel,
    monte_carlo,
    sign_test_pvalue,
    write_bundle,
)

FE = ("individual_id", "wave_year")


def test_same_seed_byte_identical(tmp_path):
    cfg = SynthConfig(n_individuals=80, seed=7)
    a = write_bundle(generate_panel(cfg), tmp_path / "a")
    b = write_bundle(generate_panel(cfg), tmp_path / "b")
    c = write_bundle(generate_panel(replace(cfg, seed=8)), tmp_path / "c")
    for key in a:
        assert filecmp.cmp(a[key], b[key], shallow=False), key
    assert not filecmp.cmp(a["panel"], c["panel"], shallow=False)


@settings(max_examples=5)
@given(st.integers(2, 60), st.integers(0, 1000))
def test_units_independent_of_panel_size(n, seed):
    small = generate_panel(SynthConfig(n_individuals=n, seed=seed)).panel.data
    big = generate_panel(SynthConfig(n_individuals=n + 7, seed=seed)).panel.data
    head = big[big.individual_id.isin(small.individual_id)].reset_index(drop=True)
    assert head.equals(small.reset_index(drop=True))


def test_invalid_configs():
    for kwargs in ({"n_individuals": 1}, {"n_waves": 0}, {"selection": 1.5}, {"exp_variance": "x"},
                   {"outcome_sd": 0.0}, {"prevalence": 2.0}):
        with pytest.raises(ValueError):
            SynthConfig(**kwargs)


def test_bundle_passes_load_path(written_bundle, small_bundle):
    ds = load_panel(written_bundle["panel"])
    assert ds.violations == []
    assert (ds.data["weight"] > 0).all()
    assert len(ds) == len(small_bundle.panel.data)
    records = read_policy_csv(written_bundle["policy"])
    problems = validate_policy_panel(records)
    assert not [p for p in problems if p["kind"] != "gap"]
    truth = json.loads(open(written_bundle["truth"]).read())
    assert truth["effect"] == 0.10 and truth["n_individuals"] == 300
    assert truth["lag_coef_per_dollar"] == pytest.approx(0.003)


def test_panel_shape_and_participation(small_bundle):
    df = small_bundle.panel.data
    cfg = SynthConfig(n_individuals=300, seed=11)
    assert len(df) == 300 * cfg.n_waves
    assert sorted(df.wave_year.unique()) == list(cfg.years)
    assert set(df.snap.unique()) <= {0.0, 1.0}
    assert 0.05 < df.snap.mean() < 0.5
    # expenditure is autocorrelated within individual
    lagged = df.sort_values(list(FE)).groupby("individual_id").food_exp_pc.shift()
    assert df.food_exp_pc.corr(lagged) > 0.2


def test_null_relevance_gives_unit_f():
    draws = []
    for seed in range(30):
        df = generate_panel(SynthConfig(n_individuals=300, relevance=0.0, seed=seed)).panel.data
        draws.append(tsls_fit("fs_score", "snap", "spi", ModelSpec("fs_score", TIME_VARYING, fe=FE), df).kp_f)
    draws = np.array(draws)
    assert 0.5 < draws.mean() < 1.7
    assert stats.kstest(draws, stats.chi2(1).cdf).pvalue > 1e-3


def test_exogenous_treatment_ols_and_iv_agree():
    cfg = SynthConfig(n_individuals=2500, selection=0.0, relevance=1.0, seed=3)
    df = generate_panel(cfg).panel.data
    ols = wls_fit(ModelSpec("fs_score", ("snap", *TIME_VARYING), fe=FE), df)
    iv = tsls_fit("fs_score", "snap", "spi", ModelSpec("fs_score", TIME_VARYING, fe=FE), df)
    assert abs(ols.params["snap"] - 0.1) <= 3 * ols.bse["snap"]
    assert abs(iv.params["snap"] - 0.1) <= 3 * iv.bse["snap"]


def test_monte_carlo_single_replication_flags_sd():
    summary, draws = monte_carlo(1, SynthConfig(n_individuals=150, seed=4))
    assert len(draws) == 3 and draws.ok.all()
    assert summary.sd.isna().all() and not summary.sd_defined.any()
    assert np.isnan(summary.set_index("estimator").loc["ols", "median_kp_f"])


def test_monte_carlo_seeds_and_parallel_agree():
    cfg = SynthConfig(n_individuals=150, seed=40)
    s1, d1 = monte_carlo(2, cfg, ("ols", "2sls"))
    s2, d2 = monte_carlo(2, cfg, ("ols", "2sls"), n_jobs=2)
    assert sorted(d1.seed.unique()) == [40, 41]
    assert d1.equals(d2) and s1.equals(s2)
    two = d1[d1.estimator == "2sls"]
    row = s1.set_index("estimator").loc["2sls"]
    assert row.mean_bias == pytest.approx((two.estimate - two.truth).mean(), abs=1e-15)
    assert row.rmse == pytest.approx(np.sqrt(((two.estimate - two.truth) ** 2).mean()), abs=1e-15)


def test_monte_carlo_aborts_on_failures():
    with pytest.raises(RuntimeError, match="failed in 2 of 2"):
        monte_carlo(2, SynthConfig(n_individuals=50), ("bogus",))
    with pytest.raises(ValueError):
        monte_carlo(0, SynthConfig())


def test_sign_test():
    assert sign_test_pvalue(-np.ones(10)) == pytest.approx(0.5**10, rel=1e-12)
    e = np.r_[-np.ones(14), np.ones(6), 0.0]
    assert sign_test_pvalue(e) == pytest.approx(stats.binomtest(14, 20, 0.5, alternative="greater").pvalue, rel=1e-12)
    assert sign_test_pvalue(np.ones(5)) == 1.0
