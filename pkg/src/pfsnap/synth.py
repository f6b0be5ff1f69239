"""Synthetic individual panels with a known data-generating process.

The generator produces everything the pipeline reads (panel, policy, CPI,
prevalence and unemployment tables) plus a truth record. Every random draw
comes from a Philox stream keyed by ``(seed, stream name)`` whose counter
is offset by the unit index (individual or state), so a unit's draws do not
depend on how many other units are generated or in what order.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .panel_store import PanelDataset
from .spi import POLICIES, PolicyRecord, spi_table

TIME_VARYING = ("rp_age", "rp_age_sq", "rp_married", "rp_employed", "hh_size", "pct_children", "ln_income")
TIME_INVARIANT = ("rp_female", "rp_white", "rp_disabled", "rp_college")
FPL_BASE, FPL_STEP = 12_490.0, 4_420.0


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic data-generating process.

    Expenditure follows a Gamma distribution with log mean
    ``exp_intercept + exp_lag1 * L + exp_lag2 * L**2 + effects`` where
    ``L`` is the expenditure two years earlier in hundreds of dollars.
    ``exp_variance`` selects ``"cv"`` (variance ``mean**2 / exp_shape``)
    or ``"constant"`` (variance ``exp_sd**2``).

    Participation is ``1[a + relevance * (spi - 5) + income term + eta_i
    + v > 0]`` with ``v = -selection * eps / sd + sqrt(1 - selection**2) *
    xi``, so positive ``selection`` sends people with low outcome shocks
    into the program. The outcome ``fs_score`` is linear with treatment
    effect ``effect + qte_amplitude * sin(pi * U)**2`` where ``U`` is the
    normal rank of the outcome shock.
    """

    n_individuals: int = 1200
    n_waves: int = 9
    first_year: int = 1997
    wave_step: int = 2
    n_states: int = 20
    seed: int = 0
    # expenditure process (dollars per person per month)
    exp_intercept: float = 4.9
    exp_lag1: float = 0.30
    exp_lag2: float = -0.03
    exp_shape: float = 6.0
    exp_sd: float = 60.0
    exp_variance: str = "cv"
    exp_individual_sd: float = 0.15
    exp_effect: float = 0.05
    # participation
    snap_intercept: float = -1.6
    relevance: float = 0.30
    selection: float = 0.5
    snap_individual_sd: float = 0.5
    # outcome
    effect: float = 0.10
    qte_amplitude: float = 0.0
    outcome_sd: float = 0.10
    outcome_individual_sd: float = 0.08
    # policy and prices
    tfp_cost: float = 110.0
    cpi_growth: float = 0.025
    base_year: int = 2019
    prevalence: float = 0.12
    weight_sd: float = 0.5

    def __post_init__(self):
        if self.n_individuals < 2:
            raise ValueError("n_individuals must be at least 2")
        if self.n_waves < 1 or self.wave_step < 1 or self.n_states < 1:
            raise ValueError("n_waves, wave_step and n_states must be positive")
        if not -1.0 <= self.selection <= 1.0:
            raise ValueError("selection must lie in [-1, 1]")
        if self.exp_variance not in ("cv", "constant"):
            raise ValueError("exp_variance must be 'cv' or 'constant'")
        if self.outcome_sd <= 0 or self.exp_shape <= 0 or self.exp_sd <= 0:
            raise ValueError("dispersion parameters must be positive")
        if not 0.0 <= self.prevalence <= 1.0:
            raise ValueError("prevalence must lie in [0, 1]")

    @property
    def years(self) -> np.ndarray:
        return self.first_year + self.wave_step * np.arange(self.n_waves)


@dataclass
class SyntheticBundle:
    panel: PanelDataset
    policies: list
    cpi: pd.DataFrame
    prevalence: pd.DataFrame
    unemployment: pd.DataFrame
    truth: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# counter-based streams


def _key(seed: int, stream: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{stream}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def _rng(seed, stream, unit) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_key(seed, stream), counter=[0, 0, 0, int(unit)]))


def _draw(seed, stream, units, per_unit, kind="normal"):
    """``(len(units), per_unit)`` draws, each row from its unit's own stream."""
    out = np.empty((len(units), per_unit))
    for row, u in enumerate(units):
        g = _rng(seed, stream, u)
        out[row] = g.standard_normal(per_unit) if kind == "normal" else g.random(per_unit)
    return out


# ---------------------------------------------------------------------------
# policy panel


def _policy_records(cfg: SynthConfig):
    years = np.arange(cfg.first_year - cfg.wave_step, cfg.years[-1] + 1)
    span = (years[0] - 8, years[-1] + 8)
    u = _draw(cfg.seed, "policy", range(cfg.n_states), 16, "uniform")
    records = []
    for s in range(cfg.n_states):
        draws = u[s]
        adopt = span[0] + draws[:10] * (span[1] - span[0])
        mid_ebt = years[0] + draws[10] * (years[-1] - years[0])
        recert0 = 0.2 + 0.6 * draws[11]
        for yr in years:
            some = float(yr >= adopt[0])
            every = float(yr >= adopt[1])
            if every:
                some = 0.0
            vals = {
                "vehicle_exempt_some": some,
                "vehicle_exempt_all": every,
                "bbce": float(yr >= adopt[2]),
                # restrictive rules are repealed over time
                "noncitizen_restriction": float(yr < adopt[3]),
                "short_recert_share": float(np.clip(recert0 - 0.03 * (yr - years[0]) * draws[12], 0.0, 1.0)),
                "simplified_reporting": float(yr >= adopt[5]),
                "online_application": float(yr >= adopt[6]),
                "ebt_share": float(1.0 / (1.0 + math.exp(-(yr - mid_ebt) / 1.5))),
                "fingerprint_required": float(yr < adopt[8]),
                "outreach_ad": float(yr >= adopt[9]),
            }
            records.append(PolicyRecord(f"S{s + 1:02d}", int(yr), **vals))
    return records


def _state_series(cfg: SynthConfig):
    """COLI and unemployment per state-year over the policy years."""
    years = np.arange(cfg.first_year - cfg.wave_step, cfg.years[-1] + 1)
    n_y = len(years)
    base = _draw(cfg.seed, "coli", range(cfg.n_states), 1, "uniform")[:, 0]
    noise = _draw(cfg.seed, "coli_year", range(cfg.n_states), n_y)
    shocks = _draw(cfg.seed, "unemployment", range(cfg.n_states), n_y)
    rows = []
    for s in range(cfg.n_states):
        level = 95.0 + 50.0 * base[s]
        unemp = 5.0
        for j, yr in enumerate(years):
            unemp = float(np.clip(unemp + 0.6 * shocks[s, j], 2.5, 12.0))
            coli = float(np.clip(level + 3.0 * noise[s, j], 88.0, 166.0))
            rows.append({"state_id": f"S{s + 1:02d}", "year": int(yr), "coli": coli, "unemployment_rate": unemp})
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# individuals


def generate_panel(config: SynthConfig) -> SyntheticBundle:
    """Draw one synthetic bundle.

    The panel's monetary columns (``food_exp_pc``, ``income_pc``,
    ``tfp_cost``) are nominal; deflating with the bundled CPI gives values
    in base-year dollars. ``fs_score`` is a linear food-security outcome
    with a known participation effect, and ``spi`` is the weighted policy
    index of the individual's state and wave.
    """
    cfg = config
    n, T = cfg.n_individuals, cfg.n_waves
    years = cfg.years
    ids = np.arange(1, n + 1)
    units = ids - 1

    policies = _policy_records(cfg)
    spi = spi_table(policies).set_index(["state_id", "year"])["spi_weighted"]
    series = _state_series(cfg).set_index(["state_id", "year"])

    fixed = _draw(cfg.seed, "individual", units, 12, "uniform")
    z_fixed = stats.norm.ppf(np.clip(fixed, 1e-12, 1 - 1e-12))
    state = np.minimum((fixed[:, 0] * cfg.n_states).astype(int), cfg.n_states - 1)
    state_ids = np.array([f"S{s + 1:02d}" for s in state])
    female = (fixed[:, 1] < 0.3).astype(float)
    white = (fixed[:, 2] < 0.7).astype(float)
    disabled = (fixed[:, 3] < 0.1).astype(float)
    college = (fixed[:, 4] < 0.3).astype(float)
    birth = years[0] - (25.0 + 45.0 * fixed[:, 5])
    income_level = 6.8 + 0.6 * z_fixed[:, 6] + 0.3 * college
    snap_eta = cfg.snap_individual_sd * z_fixed[:, 7] - 0.6 * (income_level - 6.8)
    out_alpha = cfg.outcome_individual_sd * z_fixed[:, 8]
    exp_alpha = cfg.exp_individual_sd * z_fixed[:, 9]
    weight_i = 1000.0 * np.exp(cfg.weight_sd * z_fixed[:, 10] - cfg.weight_sd**2 / 2)
    base_size = 1 + np.floor(4.0 * fixed[:, 11])

    tv = _draw(cfg.seed, "time_varying", units, 6 * T, "uniform").reshape(n, 6, T)
    inc_shock = _draw(cfg.seed, "income", units, T)
    xi = _draw(cfg.seed, "participation", units, T)
    eps = _draw(cfg.seed, "outcome", units, T) * cfg.outcome_sd
    exp_u = _draw(cfg.seed, "expenditure", units, T + 1, "uniform")
    wave_w = _draw(cfg.seed, "weight", units, T)

    yr = np.broadcast_to(years, (n, T))
    age = yr - birth[:, None] - (tv[:, 0] < 0.5)
    married = (tv[:, 1] < 0.55 + 0.1 * college[:, None]).astype(float)
    employed = (tv[:, 2] < 0.7 - 0.2 * disabled[:, None]).astype(float)
    hh_size = np.clip(base_size[:, None] + (tv[:, 3] > 0.85) - (tv[:, 3] < 0.1), 1, 8)
    pct_children = np.where(hh_size > 1, np.round(tv[:, 4] * (hh_size - 1)) / hh_size, 0.0)
    ln_income = income_level[:, None] + 0.2 * employed + 0.25 * inc_shock
    income = np.exp(ln_income)

    keys = list(zip(np.repeat(state_ids, T), yr.ravel().tolist()))
    spi_it = np.array([spi[k] for k in keys]).reshape(n, T)
    coli = np.array([series.loc[k, "coli"] for k in keys]).reshape(n, T)
    unemp = np.array([series.loc[k, "unemployment_rate"] for k in keys]).reshape(n, T)

    # participation with selection on the outcome shock
    sel = cfg.selection
    v = -sel * eps / cfg.outcome_sd + math.sqrt(1.0 - sel * sel) * xi
    latent = cfg.snap_intercept + cfg.relevance * (spi_it - 5.0) + snap_eta[:, None] - 0.3 * (ln_income - 6.8) + v
    snap = (latent > 0).astype(float)

    # linear outcome with a possibly rank-dependent effect
    rank = stats.norm.cdf(eps / cfg.outcome_sd)
    unit_effect = cfg.effect + cfg.qte_amplitude * np.sin(np.pi * rank) ** 2
    year_eff = 0.01 * (yr - years[0]) / cfg.wave_step
    fs_score = (
        0.75
        + out_alpha[:, None]
        + year_eff
        + 0.03 * employed
        - 0.01 * hh_size
        + 0.02 * (ln_income - 6.8)
        + unit_effect * snap
        + eps
    )

    # expenditure: one pre-sample wave feeds the first lag
    lag = np.empty((n, T + 1))
    pre_mu = np.exp(cfg.exp_intercept + exp_alpha + 0.3)
    lag[:, 0] = _gamma_ppf(exp_u[:, 0], pre_mu, cfg)
    for t in range(T):
        L = lag[:, t] / 100.0
        log_mu = (
            cfg.exp_intercept
            + cfg.exp_lag1 * L
            + cfg.exp_lag2 * L * L
            + exp_alpha
            + 0.05 * (ln_income[:, t] - 6.8)
            - 0.03 * (hh_size[:, t] - 2)
            + 0.02 * t
            + cfg.exp_effect * snap[:, t]
        )
        lag[:, t + 1] = _gamma_ppf(exp_u[:, t + 1], np.exp(log_mu), cfg)
    food_exp = lag[:, 1:]

    price = (1.0 + cfg.cpi_growth) ** (yr - cfg.base_year)
    fpl = FPL_BASE + FPL_STEP * (hh_size - 1)
    frame = pd.DataFrame(
        {
            "individual_id": np.repeat(ids, T),
            "wave_year": yr.ravel().astype(np.int64),
            "state_id": np.repeat(state_ids, T),
            "food_exp_pc": (food_exp * price).ravel(),
            "income_pc": (income * price).ravel(),
            "snap": snap.ravel(),
            "weight": (weight_i[:, None] * np.exp(0.05 * wave_w)).ravel(),
            "rp_female": np.repeat(female, T),
            "rp_age": age.ravel(),
            "rp_age_sq": (age**2).ravel(),
            "rp_white": np.repeat(white, T),
            "rp_married": married.ravel(),
            "rp_employed": employed.ravel(),
            "rp_disabled": np.repeat(disabled, T),
            "rp_college": np.repeat(college, T),
            "hh_size": hh_size.ravel(),
            "pct_children": pct_children.ravel(),
            "tfp_cost": (cfg.tfp_cost * price).ravel(),
            "coli": coli.ravel(),
            "unemployment_rate": unemp.ravel(),
            "income_to_fpl_ratio": (12.0 * income * hh_size / fpl).ravel(),
            "ln_income": ln_income.ravel(),
            "fs_score": fs_score.ravel(),
            "spi": spi_it.ravel(),
        }
    )
    below = (frame["income_to_fpl_ratio"] < 1.3).astype(float)
    frame["low_income_flag"] = below.groupby(frame["individual_id"]).transform("max")

    all_years = np.arange(min(cfg.first_year - cfg.wave_step, cfg.base_year), max(years[-1], cfg.base_year) + 1)
    cpi = pd.DataFrame({"year": all_years, "cpi": 100.0 * (1.0 + cfg.cpi_growth) ** (all_years - cfg.base_year)})
    prevalence = pd.DataFrame({"year": years, "rate": np.round(cfg.prevalence + 0.01 * np.sin(np.arange(T)), 4)})
    unemployment = series.reset_index()[["state_id", "year", "unemployment_rate"]]
    truth = _truth(cfg, frame)
    return SyntheticBundle(PanelDataset(frame), policies, cpi, prevalence, unemployment, truth)


def _gamma_ppf(u, mean, cfg: SynthConfig):
    if cfg.exp_variance == "cv":
        shape = np.full_like(mean, cfg.exp_shape)
    else:
        shape = mean * mean / cfg.exp_sd**2
    return stats.gamma.ppf(np.clip(u, 1e-12, 1 - 1e-12), shape, scale=mean / shape)


def _truth(cfg: SynthConfig, frame) -> dict:
    out = asdict(cfg)
    out.update(
        {
            "average_effect": cfg.effect + cfg.qte_amplitude / 2.0,
            "lag_coef_per_dollar": cfg.exp_lag1 / 100.0,
            "lag_sq_coef_per_dollar2": cfg.exp_lag2 / 1e4,
            "snap_rate": float(frame["snap"].mean()),
            "n_rows": int(len(frame)),
        }
    )
    return out


def write_bundle(bundle: SyntheticBundle, out_dir) -> dict:
    """Write the bundle as CSV/JSON files; returns ``{name: path}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "panel": out / "panel.csv",
        "policy": out / "policy.csv",
        "cpi": out / "cpi.csv",
        "prevalence": out / "prevalence.csv",
        "unemployment": out / "unemployment.csv",
        "truth": out / "truth.json",
    }
    bundle.panel.data.to_csv(paths["panel"], index=False, lineterminator="\n", float_format="%.10g")
    pol = pd.DataFrame([{"state_id": r.state_id, "year": r.year, **{p: getattr(r, p) for p in POLICIES}} for r in bundle.policies])
    pol.to_csv(paths["policy"], index=False, lineterminator="\n", float_format="%.10g")
    bundle.cpi.to_csv(paths["cpi"], index=False, lineterminator="\n", float_format="%.10g")
    bundle.prevalence.to_csv(paths["prevalence"], index=False, lineterminator="\n")
    bundle.unemployment.to_csv(paths["unemployment"], index=False, lineterminator="\n", float_format="%.10g")
    paths["truth"].write_text(json.dumps(bundle.truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}


# ---------------------------------------------------------------------------
# Monte Carlo


ESTIMATORS = ("ols", "2sls", "three_step")


def _estimate_one(args):
    cfg, estimators, controls, fe, weighted = args
    from .errors import PfsnapError
    from .iv import three_step_iv, tsls_fit
    from .regress import ModelSpec, wls_fit

    bundle = generate_panel(cfg)
    df = bundle.panel.data
    weight = "weight" if weighted else None
    truth = cfg.effect + cfg.qte_amplitude / 2.0
    rows = []
    for name in estimators:
        row = {"seed": cfg.seed, "estimator": name, "truth": truth}
        try:
            if name == "ols":
                fit = wls_fit(ModelSpec("fs_score", ("snap", *controls), fe=fe, weight=weight), df)
                est, se, F = fit.params["snap"], fit.bse["snap"], np.nan
            else:
                spec = ModelSpec("fs_score", tuple(controls), fe=fe, weight=weight)
                if name == "2sls":
                    res = tsls_fit("fs_score", "snap", "spi", spec, df)
                elif name == "three_step":
                    res = three_step_iv("fs_score", "snap", "spi", spec, df)
                else:
                    raise ValueError(f"unknown estimator {name!r}")
                est, se, F = res.params["snap"], res.bse["snap"], res.kp_f
            row.update(estimate=float(est), std_error=float(se), kp_f=float(F), ok=True, error="")
        except (PfsnapError, np.linalg.LinAlgError, ValueError) as exc:
            row.update(estimate=np.nan, std_error=np.nan, kp_f=np.nan, ok=False, error=str(exc))
        rows.append(row)
    return rows


def monte_carlo(
    replications: int,
    config: SynthConfig,
    estimators=ESTIMATORS,
    *,
    controls=TIME_VARYING,
    fe=("individual_id", "wave_year"),
    weighted=False,
    n_jobs=1,
    level=0.95,
):
    """Bias, spread and coverage of each estimator across seeds.

    Replication ``r`` uses seed ``config.seed + r``. Returns ``(summary,
    draws)``: one summary row per estimator (mean bias, sd, RMSE, coverage
    of the normal ``level`` interval, median first-stage F, failures) and
    the per-replication estimates. With a single replication the sd is NaN
    and ``sd_defined`` is False. More than half the replications failing
    for any estimator raises ``RuntimeError`` with the error messages.
    """
    if replications < 1:
        raise ValueError("replications must be at least 1")
    jobs = [(replace(config, seed=config.seed + r), tuple(estimators), tuple(controls), tuple(fe), weighted) for r in range(replications)]
    if n_jobs == 1:
        results = [_estimate_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_estimate_one, jobs))
    draws = pd.DataFrame([row for rows in results for row in rows])
    z = stats.norm.ppf(0.5 + level / 2.0)
    summary = []
    for name in estimators:
        d = draws[draws["estimator"] == name]
        ok = d[d["ok"]]
        failed = len(d) - len(ok)
        if failed * 2 > len(d):
            msgs = sorted(set(d.loc[~d["ok"], "error"]))[:5]
            raise RuntimeError(f"estimator {name!r} failed in {failed} of {len(d)} replications: {msgs}")
        err = ok["estimate"] - ok["truth"]
        cover = (np.abs(err) <= z * ok["std_error"]).mean()
        kp_f = ok["kp_f"].dropna()
        summary.append(
            {
                "estimator": name,
                "replications": len(d),
                "failures": failed,
                "mean_estimate": ok["estimate"].mean(),
                "mean_bias": err.mean(),
                "sd": ok["estimate"].std(ddof=1) if len(ok) > 1 else np.nan,
                "sd_defined": len(ok) > 1,
                "rmse": float(np.sqrt((err**2).mean())),
                "coverage": cover,
                "median_kp_f": float(kp_f.median()) if len(kp_f) else np.nan,
                "share_negative_bias": float((err < 0).mean()),
            }
        )
    return pd.DataFrame(summary), draws


def sign_test_pvalue(errors) -> float:
    """One-sided binomial sign test that errors are more often negative than positive."""
    e = np.asarray(errors, dtype=float)
    e = e[e != 0]
    k = int((e < 0).sum())
    return float(stats.binom.sf(k - 1, e.size, 0.5))
