"""Probability of food security from a panel of food expenditures.

Each observation's expenditure is modelled as Gamma with a conditional mean
and variance estimated by Poisson quasi-MLE. The probability of food
security is the mass of that Gamma above the local Thrifty Food Plan cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .gammainc import gamma_cdf_reg
from .glm import GlmSpec, poisson_qmle, predict_response
from .panel_store import as_frame, lag_join
from .regress import absorbed_columns

DEGENERATE_VARIANCE = 1e-12

COVARIATES = (
    "rp_female",
    "rp_age",
    "rp_age_sq",
    "rp_white",
    "rp_married",
    "rp_employed",
    "rp_disabled",
    "rp_college",
    "hh_size",
    "pct_children",
)

PFS_COLUMNS = (
    "individual_id",
    "wave_year",
    "w_hat",
    "sigma2_hat",
    "alpha",
    "beta",
    "threshold",
    "pfs",
    "food_insecure",
)


def gamma_params(w_hat, sigma2_hat):
    """Method-of-moments Gamma shape and scale from a mean and a variance.

    Returns ``(alpha, beta)`` with ``alpha = w^2 / s2`` and ``beta = s2 / w``
    so that ``alpha * beta = w`` and ``alpha * beta**2 = s2``.
    """
    w = np.asarray(w_hat, dtype=float)
    s2 = np.asarray(sigma2_hat, dtype=float)
    if np.any(~(w > 0)) or np.any(~(s2 > 0)):
        raise ValueError("mean and variance must both be positive")
    alpha = w * w / s2
    beta = s2 / w
    if alpha.ndim == 0:
        return float(alpha), float(beta)
    return alpha, beta


def adjust_tfp(tfp_cost, coli):
    """Local food-need threshold: TFP cost scaled by a cost-of-living index (100 = national)."""
    tfp = np.asarray(tfp_cost, dtype=float)
    c = np.asarray(coli, dtype=float)
    if np.any(~(tfp > 0)) or np.any(~(c > 0)):
        raise ValueError("TFP cost and COLI must be positive")
    out = tfp * c / 100.0
    return float(out) if out.ndim == 0 else out


def _pfs_one(w, s2, thr):
    if not w > 0:
        raise ValueError(f"conditional mean must be positive, got {w}")
    if s2 < 0 or thr < 0:
        raise ValueError("variance and threshold must be nonnegative")
    if s2 <= DEGENERATE_VARIANCE:
        return 1.0 if w >= thr else 0.0
    alpha, beta = w * w / s2, s2 / w
    return 1.0 - gamma_cdf_reg(alpha, thr / beta)


def compute_pfs(w_hat, sigma2_hat, threshold):
    """``1 - F(threshold)`` for a Gamma with the given mean and variance.

    A variance at or below 1e-12 is treated as a point mass at the mean:
    the result is 1 when the mean reaches the threshold and 0 otherwise.
    Accepts scalars or broadcastable arrays.
    """
    w, s2, thr = np.broadcast_arrays(
        np.asarray(w_hat, dtype=float), np.asarray(sigma2_hat, dtype=float), np.asarray(threshold, dtype=float)
    )
    out = np.array([_pfs_one(a, b, c) for a, b, c in zip(w.ravel(), s2.ravel(), thr.ravel())])
    out = out.reshape(w.shape)
    return float(out) if out.ndim == 0 else out


def flag_food_insecure(pfs, cutoff):
    """1 where ``pfs < cutoff`` (strict), else 0."""
    out = (np.asarray(pfs, dtype=float) < np.asarray(cutoff, dtype=float)).astype(np.int64)
    return int(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# cutoffs


@dataclass(frozen=True)
class CutoffSchedule:
    """Year-specific PFS cutoffs.

    ``achieved`` holds the weighted share flagged at each cutoff and
    ``tolerance`` the largest single-observation weight share in that year.
    Years in ``unattainable`` miss their target by more than that tolerance
    (possible only with ties in PFS).
    """

    cutoffs: dict
    targets: dict = field(default_factory=dict)
    achieved: dict = field(default_factory=dict)
    tolerance: dict = field(default_factory=dict)

    @property
    def unattainable(self) -> tuple:
        return tuple(
            y for y in sorted(self.cutoffs) if abs(self.achieved[y] - self.targets[y]) > self.tolerance[y] * (1 + 1e-12)
        )

    def cutoff_for(self, years) -> np.ndarray:
        years = np.asarray(years)
        missing = sorted(set(years.tolist()) - set(self.cutoffs))
        if missing:
            raise KeyError(f"no cutoff for year(s) {missing}")
        return np.array([self.cutoffs[y] for y in years.tolist()], dtype=float)

    def to_frame(self) -> pd.DataFrame:
        years = sorted(self.cutoffs)
        return pd.DataFrame(
            {
                "wave_year": years,
                "target": [self.targets.get(y, np.nan) for y in years],
                "cutoff": [self.cutoffs[y] for y in years],
                "achieved": [self.achieved.get(y, np.nan) for y in years],
            }
        )


def _year_cutoff(values, weights, target):
    order = np.argsort(values, kind="mergesort")
    v, w = values[order], weights[order]
    uniq, start = np.unique(v, return_index=True)
    cw = np.cumsum(w)
    total = cw[-1]
    # F at each distinct value: cumulative weight through its last copy
    last = np.r_[start[1:], len(v)] - 1
    F = cw[last] / total
    above = np.flatnonzero(F > target * (1 + 1e-12) + 1e-15)
    if above.size:
        cut = float(uniq[above[0]])
    else:
        cut = float(np.nextafter(uniq[-1], np.inf))
    share = float(w[v < cut].sum() / total)
    return cut, share, float(w.max() / total)


def calibrate_cutoffs(pfs, weights, years, target_rates) -> CutoffSchedule:
    """Per-year cutoff whose flagged weighted share best matches a target.

    The cutoff for a year is the smallest observed PFS value whose weighted
    CDF exceeds the target rate, so the share strictly below it never
    exceeds the target and falls short by less than the weight of one
    observation. A target of 1 gives a cutoff just above the maximum.
    """
    pfs = np.asarray(pfs, dtype=float)
    w = np.ones_like(pfs) if weights is None else np.asarray(weights, dtype=float)
    years = np.asarray(years)
    if not (len(pfs) == len(w) == len(years)):
        raise ValueError("pfs, weights and years differ in length")
    cutoffs, achieved, tol, targets = {}, {}, {}, {}
    for year in sorted(set(years.tolist())):
        if year not in target_rates:
            raise KeyError(f"no target prevalence for year {year}")
    for year, rate in sorted(target_rates.items()):
        rate = float(rate)
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"target rate {rate} for {year} outside [0, 1]")
        sel = (years == year) & ~np.isnan(pfs) & (w > 0)
        if not sel.any():
            raise ValueError(f"no observations with positive weight for year {year}")
        cut, share, t = _year_cutoff(pfs[sel], w[sel], rate)
        cutoffs[year], achieved[year], tol[year], targets[year] = cut, share, t, rate
    return CutoffSchedule(cutoffs, targets, achieved, tol)


def read_prevalence(path) -> dict:
    """Year to target rate from a CSV with columns ``year`` and ``rate``."""
    df = pd.read_csv(path)
    cols = {c.lower(): c for c in df.columns}
    year_col = cols.get("year", cols.get("wave_year"))
    rate_col = cols.get("rate", cols.get("prevalence"))
    if year_col is None or rate_col is None:
        raise ValueError(f"{path}: expected columns 'year' and 'rate'")
    return {int(y): float(r) for y, r in zip(df[year_col], df[rate_col])}


# ---------------------------------------------------------------------------
# conditional moments


def mean_spec(
    weight="weight",
    covariates=COVARIATES,
    expenditure="food_exp_pc",
    lag_years=2,
    fe=("state_id", "wave_year", "individual_id"),
) -> GlmSpec:
    """Default specification for the conditional mean of expenditure."""
    lag = f"{expenditure}_lag{lag_years}"
    return GlmSpec(
        outcome=expenditure,
        regressors=(lag, f"{lag}_sq", *covariates),
        fe=tuple(fe),
        weight=weight,
        family="poisson",
    )


def prepare_lags(panel, expenditure="food_exp_pc", lag_years=2):
    """Attach the lagged expenditure and its square."""
    out = lag_join(panel, expenditure, lag_years)
    df = as_frame(out)
    lag = f"{expenditure}_lag{lag_years}"
    df = df.assign(**{f"{lag}_sq": df[lag] ** 2})
    return out.with_data(df) if hasattr(out, "with_data") else df


def fit_conditional_mean(panel, spec: GlmSpec):
    """Poisson QMLE of expenditure on its lag polynomial and covariates.

    Returns ``(fit, w_hat)`` where ``w_hat`` is aligned with the rows of
    ``panel``. Rows outside the estimation sample (missing lag, singleton
    groups) get NaN. Rows whose fixed-effect group has all-zero expenditure
    get 0, the limit of the exponential mean.
    """
    df = as_frame(panel)
    fit = poisson_qmle(spec, df)
    w_hat = np.full(len(df), np.nan)
    pos = df.index.get_indexer(fit.index)
    w_hat[pos] = fit.fitted
    lost = _dropped_zero_rows(df, spec, fit)
    w_hat[lost] = 0.0
    fit.diagnostics["n_missing_lag"] = int(fit.diagnostics.get("n_dropped_missing", 0))
    return fit, w_hat


def _dropped_zero_rows(df, spec, fit):
    """Positions of usable rows removed because their FE group had a zero outcome."""
    if not spec.fe or fit.diagnostics.get("n_dropped_constant_groups", 0) == 0:
        return np.zeros(0, dtype=int)
    cols = [spec.outcome, *spec.regressors, *spec.fe] + ([spec.weight] if spec.weight else [])
    usable = df[cols].notna().all(axis=1).to_numpy()
    if spec.weight:
        usable &= df[spec.weight].to_numpy(dtype=float) > 0
    zero_group = np.zeros(len(df), dtype=bool)
    y = df[spec.outcome].to_numpy(dtype=float)
    for dim in spec.fe:
        totals = pd.Series(np.where(usable, y, 0.0)).groupby(df[dim].to_numpy()).transform("sum").to_numpy()
        zero_group |= usable & (totals == 0)
    in_fit = np.zeros(len(df), dtype=bool)
    in_fit[df.index.get_indexer(fit.index)] = True
    return np.flatnonzero(zero_group & ~in_fit)


def fit_conditional_variance(panel, mean_fit, spec: GlmSpec, squared_name="resid_sq"):
    """Poisson QMLE of squared mean residuals on the mean regressors.

    Returns ``(fit, sigma2_hat)`` with ``sigma2_hat = |prediction|`` aligned
    with the rows of ``panel`` (NaN outside the mean-fit sample). Groups
    whose squared residuals are all zero predict 0.
    """
    df = as_frame(panel)
    resid = np.full(len(df), np.nan)
    resid[df.index.get_indexer(mean_fit.index)] = mean_fit.residuals
    work = df.assign(**{squared_name: resid**2})
    vspec = GlmSpec(
        outcome=squared_name,
        regressors=spec.regressors,
        fe=spec.fe,
        weight=spec.weight,
        cluster=spec.cluster,
        family="poisson",
        max_iter=spec.max_iter,
        tol=spec.tol,
        drop_singletons=spec.drop_singletons,
    )
    sigma2 = np.full(len(df), np.nan)
    in_mean = ~np.isnan(resid)
    if not np.any(resid[in_mean] != 0):
        sigma2[in_mean] = 0.0
        return None, sigma2
    fit = poisson_qmle(vspec, work)
    pred = predict_response(fit, work.loc[in_mean], "poisson")
    sigma2[in_mean] = np.abs(pred)
    # unseen FE levels come from groups with identically zero squared residuals
    sigma2[in_mean & np.isnan(sigma2)] = 0.0
    return fit, sigma2


def build_pfs_table(panel, target_rates=None, spec: GlmSpec | None = None, expenditure="food_exp_pc", lag_years=2):
    """Full PFS construction for every row with a lagged expenditure.

    Returns ``(table, info)``: the table has the columns in ``PFS_COLUMNS``
    and ``info`` holds the mean and variance fits and the cutoff schedule.
    Without ``target_rates`` the ``food_insecure`` column is left empty.
    Rows whose conditional mean is exactly 0 get PFS 0. Covariates that
    an absorbed fixed effect makes redundant (e.g. traits constant within
    individual) are dropped and listed in ``info["dropped_covariates"]``.
    """
    spec = spec or mean_spec(expenditure=expenditure, lag_years=lag_years)
    prepared = prepare_lags(panel, expenditure, lag_years)
    df = as_frame(prepared)
    lag = f"{expenditure}_lag{lag_years}"
    covariates = [c for c in spec.regressors if c not in (lag, f"{lag}_sq")]
    dropped = absorbed_columns(df, covariates, spec.fe, df[lag].notna().to_numpy())
    if dropped:
        spec = replace(spec, regressors=tuple(c for c in spec.regressors if c not in dropped))
    mean_fit, w_hat = fit_conditional_mean(df, spec)
    var_fit, sigma2 = fit_conditional_variance(df, mean_fit, spec)
    threshold = adjust_tfp(df["tfp_cost"].to_numpy(dtype=float), df["coli"].to_numpy(dtype=float))
    ok = ~np.isnan(w_hat) & ~np.isnan(sigma2)
    alpha = np.full(len(df), np.nan)
    beta = np.full(len(df), np.nan)
    pos = ok & (w_hat > 0) & (sigma2 > DEGENERATE_VARIANCE)
    alpha[pos], beta[pos] = gamma_params(w_hat[pos], sigma2[pos])
    pfs = np.full(len(df), np.nan)
    live = ok & (w_hat > 0)
    pfs[live] = compute_pfs(w_hat[live], sigma2[live], threshold[live])
    pfs[ok & (w_hat == 0)] = 0.0
    table = pd.DataFrame(
        {
            "individual_id": df["individual_id"].to_numpy(),
            "wave_year": df["wave_year"].to_numpy(),
            "w_hat": w_hat,
            "sigma2_hat": sigma2,
            "alpha": alpha,
            "beta": beta,
            "threshold": threshold,
            "pfs": pfs,
        }
    )
    table = table.loc[ok].reset_index(drop=True)
    schedule = None
    if target_rates is not None:
        wcol = spec.weight
        weights = df.loc[ok, wcol].to_numpy(dtype=float) if wcol else None
        years = table["wave_year"].to_numpy()
        rates = {y: r for y, r in target_rates.items() if y in set(years.tolist())}
        schedule = calibrate_cutoffs(table["pfs"].to_numpy(), weights, years, rates)
        table["food_insecure"] = flag_food_insecure(table["pfs"].to_numpy(), schedule.cutoff_for(years))
    else:
        table["food_insecure"] = pd.array([pd.NA] * len(table), dtype="Int64")
    info = {
        "mean_fit": mean_fit,
        "variance_fit": var_fit,
        "cutoffs": schedule,
        "n_rows": len(df),
        "n_pfs": int(ok.sum()),
        "n_missing_lag": int(df[f"{expenditure}_lag{lag_years}_missing"].sum()),
        "dropped_covariates": tuple(dropped),
        "spec": spec,
    }
    return table, info
