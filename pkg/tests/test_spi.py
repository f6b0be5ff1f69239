import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from pfsnap.spi import (
    POLICIES,
    SHARE_POLICIES,
    SIGNS,
    PolicyRecord,
    SpiWeights,
    join_spi,
    read_policy_csv,
    spi_table,
    unweighted_spi,
    validate_policy_panel,
    weighted_raw,
    weighted_spi,
)

GENEROUS = [p for p in POLICIES if SIGNS[p] > 0 and p != "vehicle_exempt_all"]
RESTRICTIVE = [p for p in POLICIES if SIGNS[p] < 0]


def rec(**kw):
    return PolicyRecord("S1", 2000, **kw)


ALL_GENEROUS = rec(**{p: 1.0 for p in GENEROUS})
ALL_RESTRICTIVE = rec(**{p: 1.0 for p in RESTRICTIVE})


def test_unweighted_endpoints():
    assert unweighted_spi(ALL_GENEROUS) == 10.0
    assert unweighted_spi(ALL_RESTRICTIVE) == 1.0
    assert unweighted_spi(rec()) == 4.0


def test_weighted_endpoints_and_bounds():
    assert SpiWeights().bounds() == (-9.844, 5.464)
    assert weighted_raw(ALL_GENEROUS) == 5.464
    assert weighted_raw(ALL_RESTRICTIVE) == -9.844
    assert weighted_spi(ALL_GENEROUS) == 10.0
    assert weighted_spi(ALL_RESTRICTIVE) == 1.0
    assert abs(weighted_spi(rec()) - (1 + 9 * 9.844 / 15.308)) <= 1e-12
    assert round(weighted_spi(rec()), 3) == 6.788


def test_invalid_records():
    with pytest.raises(ValueError, match="mutually exclusive"):
        unweighted_spi(rec(vehicle_exempt_some=1, vehicle_exempt_all=1))
    with pytest.raises(ValueError):
        weighted_spi(rec(bbce=0.5))
    with pytest.raises(ValueError):
        weighted_spi(rec(ebt_share=1.5))
    with pytest.raises(ValueError):
        SpiWeights(bbce=0.0)


policy_values = st.fixed_dictionaries(
    {p: (st.floats(0, 1) if p in SHARE_POLICIES else st.sampled_from([0.0, 1.0])) for p in POLICIES}
).filter(lambda d: not (d["vehicle_exempt_some"] == 1 and d["vehicle_exempt_all"] == 1))


@given(policy_values)
def test_scores_in_range(values):
    r = rec(**values)
    assert 1.0 <= unweighted_spi(r) <= 10.0
    assert 1.0 - 1e-12 <= weighted_spi(r) <= 10.0 + 1e-12


@given(policy_values, st.sampled_from(POLICIES))
def test_monotone_in_each_policy(values, policy):
    low = dict(values, **{policy: 0.0})
    high = dict(values, **{policy: 1.0})
    if policy in ("vehicle_exempt_some", "vehicle_exempt_all"):
        other = "vehicle_exempt_all" if policy == "vehicle_exempt_some" else "vehicle_exempt_some"
        low[other] = high[other] = 0.0
    a, b = rec(**low), rec(**high)
    if SIGNS[policy] > 0:
        assert unweighted_spi(b) >= unweighted_spi(a) and weighted_spi(b) >= weighted_spi(a)
    else:
        assert unweighted_spi(b) <= unweighted_spi(a) and weighted_spi(b) <= weighted_spi(a)


@pytest.mark.parametrize("seed", range(5))
def test_indices_correlate_on_generated_policy_panel(seed):
    from pfsnap.synth import SynthConfig, _policy_records

    t = spi_table(_policy_records(SynthConfig(seed=seed, n_states=50)))
    assert np.corrcoef(t["spi_unweighted"], t["spi_weighted"])[0, 1] > 0.8


def test_independent_coin_flip_records_correlate_below_bound():
    # with every policy an independent fair coin the population correlation
    # is fixed by the weights alone and sits just under 0.8
    signs = np.array([SIGNS[p] for p in POLICIES], dtype=float)
    var = np.array([1 / 12 if p in SHARE_POLICIES else 0.25 for p in POLICIES])
    w = SpiWeights().signed()
    rho = np.sum(signs * w * var) / np.sqrt(np.sum(var) * np.sum(w * w * var))
    assert 0.77 < rho < 0.8


def test_validation_report():
    clean = [PolicyRecord("A", y) for y in (2000, 2001, 2002, 2003)]
    assert validate_policy_panel(clean) == []
    bad = clean + [PolicyRecord("B", 2000, vehicle_exempt_some=1, vehicle_exempt_all=1)]
    kinds = [(r["kind"], r["state_id"], r["year"]) for r in validate_policy_panel(bad)]
    assert ("violation", "B", 2000) in kinds
    gap = [PolicyRecord("A", y) for y in (2000, 2001, 2003, 2004)]
    assert [(r["kind"], r["year"]) for r in validate_policy_panel(gap)] == [("gap", 2002)]
    dup = clean + [PolicyRecord("A", 2001)]
    assert [r["kind"] for r in validate_policy_panel(dup)] == ["duplicate"]


def test_table_csv_and_join(tmp_path):
    rows = [{"state_id": "S1", "year": 2001, **{p: 0.0 for p in POLICIES}},
            {"state_id": "S2", "year": 2001, **{p: (1.0 if p in GENEROUS else 0.0) for p in POLICIES}}]
    path = tmp_path / "policy.csv"
    pd.DataFrame(rows).to_csv(path, index=False)
    table = spi_table(read_policy_csv(path))
    assert table.loc[table.state_id == "S2", "spi_unweighted"].item() == 10.0
    panel = pd.DataFrame({"state_id": ["S2", "S1", "S3"], "wave_year": [2001, 2001, 2001]})
    joined = join_spi(panel, table, "unweighted")
    assert joined["spi"].iloc[0] == 10.0 and joined["spi"].iloc[1] == 4.0 and math.isnan(joined["spi"].iloc[2])
    with pytest.raises(ValueError):
        join_spi(panel, table, "other")
