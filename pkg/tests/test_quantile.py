import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st
from scipy import optimize

from pfsnap.errors import RankDeficiencyError
from pfsnap.iv import tsls_fit
from pfsnap.quantile import (
    QuantileProfile,
    check_loss,
    demean_within,
    pfs_bin_first_stage,
    qreg_fit,
    quantile_effect_profile,
)
from pfsnap.regress import ModelSpec, wls_fit
from pfsnap.synth import TIME_VARYING, SynthConfig, generate_panel

from conftest import toy_panel


def lp_objective(X, y, w, tau):
    """Independent LP optimum of the weighted check loss."""
    n, p = X.shape
    c = np.concatenate([np.zeros(2 * p), tau * w, (1 - tau) * w])
    A = np.hstack([X, -X, np.eye(n), -np.eye(n)])
    res = optimize.linprog(c, A_eq=A, b_eq=y, bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun


def left_quantile(values, weights, k, denom=10):
    """Smallest value whose cumulative weight reaches k/denom of the total (integer weights)."""
    order = np.argsort(values, kind="mergesort")
    v, w = np.asarray(values)[order], np.asarray(weights)[order]
    cum = np.cumsum(w)
    return v[np.argmax(cum * denom >= k * cum[-1])]


def frame(y, **cols):
    return pd.DataFrame({"y": y, **cols})


# demeaning --------------------------------------------------------------------------


def test_demean_examples():
    df = pd.DataFrame({"individual_id": [1, 1, 2, 2], "a": [1.0, 3.0, 5.0, 5.0]})
    out = demean_within(df, ["a"])
    assert out["a"].tolist() == [-1.0, 1.0, 0.0, 0.0]
    with pytest.raises(KeyError):
        demean_within(df, ["nope"])


def test_demeaned_ols_equals_fe_dummies():
    df = toy_panel(n_ind=8, n_waves=5, seed=2)
    dm = demean_within(df, ["y", "x1", "x2"])
    assert dm.groupby("individual_id")[["y", "x1", "x2"]].mean().abs().to_numpy().max() <= 1e-10
    a = wls_fit(ModelSpec("y", ("x1", "x2"), intercept=False), dm).params
    b = wls_fit(ModelSpec("y", ("x1", "x2"), fe=("individual_id",)), df).params
    np.testing.assert_allclose(a.to_numpy(), b.to_numpy(), atol=1e-8)


# qreg -------------------------------------------------------------------------------


def test_median_and_lower_endpoint():
    assert qreg_fit("y", [], 0.5, panel=frame([1.0, 2.0, 9.0])).params["const"] == 2.0
    assert qreg_fit("y", [], 0.25, panel=frame([0.0, 1.0, 2.0, 3.0])).params["const"] == 0.0


def test_binary_regressor_is_quantile_difference():
    rng = np.random.default_rng(3)
    d = np.repeat([0.0, 1.0], [37, 53])
    y = rng.normal(size=90) + 2 * d
    for k in range(1, 10):
        fit = qreg_fit("y", ["d"], k / 10, panel=frame(y, d=d))
        q0 = left_quantile(y[d == 0], np.ones(37), k)
        q1 = left_quantile(y[d == 1], np.ones(53), k)
        assert abs(fit.params["d"] - (q1 - q0)) <= 1e-9
        assert abs(fit.params["const"] - q0) <= 1e-9


@given(st.lists(st.integers(-50, 50), min_size=1, max_size=25), st.integers(1, 9), st.data())
def test_intercept_only_weighted_quantile(values, k, data):
    w = data.draw(st.lists(st.integers(1, 5), min_size=len(values), max_size=len(values)))
    fit = qreg_fit("y", [], k / 10, weights=np.array(w, float), panel=frame(np.array(values, float)))
    assert fit.params["const"] == left_quantile(values, w, k)


@given(st.integers(0, 100_000), st.floats(0.05, 0.95))
def test_objective_matches_lp_and_beats_ols(seed, tau):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 40))
    x1, x2 = rng.normal(size=(2, n))
    y = np.round(1 + x1 - 0.5 * x2 + rng.standard_t(3, size=n), 1)
    w = rng.uniform(0.2, 3.0, size=n)
    df = frame(y, x1=x1, x2=x2)
    fit = qreg_fit("y", ["x1", "x2"], tau, weights=w, panel=df)
    X = np.column_stack([np.ones(n), x1, x2])
    lp = lp_objective(X, y, w, tau)
    obj = check_loss(fit.residuals, tau, w)
    assert obj <= lp + 1e-9 * max(1.0, lp)
    ols = np.linalg.lstsq(X * np.sqrt(w)[:, None], y * np.sqrt(w), rcond=None)[0]
    assert obj <= check_loss(y - X @ ols, tau, w) + 1e-12


@given(st.integers(0, 10_000), st.floats(-1e3, 1e3))
def test_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=30)
    y = x + rng.normal(size=30)
    a = qreg_fit("y", ["x"], 0.3, panel=frame(y, x=x))
    b = qreg_fit("y", ["x"], 0.3, panel=frame(y + c, x=x))
    assert abs(a.params["x"] - b.params["x"]) <= 1e-8
    assert abs(a.params["const"] + c - b.params["const"]) <= 1e-8 * max(1, abs(c))
    assert abs(check_loss(a.residuals, 0.3) - check_loss(b.residuals, 0.3)) <= 1e-8 * max(1, abs(c))


def test_deterministic_and_errors():
    df = toy_panel(n_ind=20, seed=4)
    a = qreg_fit("y", ["x1", "x2"], 0.4, panel=df, cluster="individual_id")
    b = qreg_fit("y", ["x1", "x2"], 0.4, panel=df, cluster="individual_id")
    assert a.coef.tobytes() == b.coef.tobytes() and a.vcov.tobytes() == b.vcov.tobytes()
    assert np.all(np.diag(a.vcov) > 0)
    for tau in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            qreg_fit("y", ["x1"], tau, panel=df)
    with pytest.raises(RankDeficiencyError):
        qreg_fit("y", ["x1", "x1"], 0.5, panel=df)


def test_powell_standard_errors_are_calibrated():
    covered, n_rep = 0, 200
    for seed in range(n_rep):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=400)
        y = 1 + 0.5 * x + rng.normal(size=400)
        fit = qreg_fit("y", ["x"], 0.5, panel=frame(y, x=x))
        covered += abs(fit.params["x"] - 0.5) <= 1.96 * fit.bse["x"]
    assert 0.88 <= covered / n_rep <= 0.99


# profiles ---------------------------------------------------------------------------


def test_profile_validation_and_frame():
    with pytest.raises(ValueError):
        QuantileProfile((0.5, 0.4), np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        QuantileProfile((0.0, 0.4), np.zeros(2), np.ones(2))
    prof = QuantileProfile((0.25, 0.75), np.array([1.0, 2.0]), np.array([0.5, 0.5]))
    tab = prof.to_frame()
    assert list(tab.columns) == ["tau", "estimate", "se", "ci_low", "ci_high"]
    np.testing.assert_allclose(tab.ci_high - tab.ci_low, 2 * 1.959963984540054 * 0.5)


def synthetic_profile(cfg, taus=(0.1, 0.3, 0.5, 0.7, 0.9)):
    df = generate_panel(cfg).panel.data
    spec = ModelSpec("fs_score", TIME_VARYING, fe=("individual_id", "wave_year"))
    first = tsls_fit("fs_score", "snap", "spi", spec, df).first_stages[0]
    df["snap_hat"] = np.nan
    df.loc[first.index, "snap_hat"] = first.fitted
    return quantile_effect_profile("fs_score", "snap_hat", TIME_VARYING, taus, panel=df)


def test_null_effect_profile():
    prof = synthetic_profile(SynthConfig(n_individuals=1500, effect=0.0, relevance=1.0, seed=21))
    assert np.all(np.abs(prof.estimates) <= 3.5 * prof.std_errors)


def test_constant_effect_profile_is_flat():
    prof = synthetic_profile(SynthConfig(n_individuals=1500, effect=0.1, relevance=1.0, seed=22))
    assert np.all(np.abs(prof.estimates - 0.1) <= 3.5 * prof.std_errors)
    spread = prof.estimates.max() - prof.estimates.min()
    assert spread <= 3.5 * np.sqrt(2) * prof.std_errors.max()


# pfs bins ---------------------------------------------------------------------------


def bin_frame(n=4000, seed=0, low_only=True):
    rng = np.random.default_rng(seed)
    pfs = rng.uniform(size=n)
    spi = rng.normal(size=n)
    slope = np.where(pfs < 0.5, 0.3, 0.0) if low_only else 0.3
    snap = slope * spi + 0.2 * rng.normal(size=n)
    return pd.DataFrame({"pfs": pfs, "spi": spi, "snap": snap, "individual_id": np.arange(n) // 4})


def test_bins_follow_instrument_reach():
    tab = pfs_bin_first_stage(bin_frame(), n_bins=4)
    low, high = tab.iloc[:2], tab.iloc[2:]
    assert np.all(low.estimate > 10 * low.std_error)
    assert np.all(np.abs(high.estimate) <= 3.5 * high.std_error)
    assert tab.n.sum() == 4000


def test_homogeneous_bins_equal():
    tab = pfs_bin_first_stage(bin_frame(low_only=False, seed=1), n_bins=5)
    assert np.all(np.abs(tab.estimate - 0.3) <= 3.5 * tab.std_error)


def test_two_bins_equal_split_regressions():
    df = bin_frame(n=300, seed=2)
    tab = pfs_bin_first_stage(df, n_bins=2)
    cut = np.quantile(df.pfs, 0.5)
    for k, part in enumerate((df[df.pfs < cut], df[df.pfs >= cut])):
        sep = wls_fit(ModelSpec("snap", ("spi",)), part).params["spi"]
        assert abs(tab.estimate[k] - sep) <= 1e-6


def test_bin_errors():
    with pytest.raises(ValueError):
        pfs_bin_first_stage(bin_frame(n=100), n_bins=1)
    with pytest.raises(ValueError):
        pfs_bin_first_stage(bin_frame(n=100).assign(pfs=0.5), n_bins=3)
